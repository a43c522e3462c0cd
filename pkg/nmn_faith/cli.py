from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any

from . import __version__
from .errors import GroundingError, NMNFaithError, ValidationError
from .executor import CountStrategy, ExecutorConfig, execute_many
from .faithfulness import (
    OVERALL,
    AggregationScheme,
    MetricConfig,
    NegativePolicy,
    aggregate,
    render_table,
    score_instances,
    score_text,
    text_aggregate,
    upper_bound,
)
from .records import (
    dumps_ndjson,
    load_attentions,
    load_groundings,
    load_json,
    load_programs,
    load_report,
    load_scenes,
    load_text_annotations,
    load_text_outputs,
    load_visual_annotations,
    scene_record,
    trace_record,
    write_atomic,
)
from .significance import Alternative, paired_scores, permutation_test
from .synth import SceneSpec, generate_example
from .util import dumps_record, map_or

if TYPE_CHECKING:
    from collections.abc import Callable, Mapping, Sequence

    from .executor import ExecutionTrace
    from .scene import Scene

__all__ = ('CommandResult', 'RunConfig', 'build_parser', 'main')

logger = logging.getLogger(__name__)


class _ExitCodeEnum(Enum):
    SUCCESS = 0
    INVALID = 2
    INTERNAL = 3


@dataclass(frozen=True)
class CommandResult:
    """You shouldn't construct this directly. use other classmethod instead."""

    _code: _ExitCodeEnum
    _message: str = ''
    _outputs: tuple[tuple[Path, str], ...] = ()

    @classmethod
    def success(cls, message: str = '', outputs: Mapping[str | Path, str] | None = None) -> CommandResult:
        """Command finished; outputs are written by commit.

        Args:
            message (str, optional): printed to stdout. Defaults to ''.
            outputs (Mapping[str | Path, str], optional): file contents keyed by path. Defaults to None.
        """
        files = tuple((Path(path), text) for path, text in (outputs or {}).items())
        return CommandResult(_code=_ExitCodeEnum.SUCCESS, _message=message, _outputs=files)

    @classmethod
    def invalid(cls, message: str) -> CommandResult:
        """Inputs failed validation. nothing is written."""
        return CommandResult(_code=_ExitCodeEnum.INVALID, _message=message)

    @classmethod
    def internal(cls, message: str) -> CommandResult:
        """Unexpected failure. nothing is written."""
        return CommandResult(_code=_ExitCodeEnum.INTERNAL, _message=message)

    @property
    def exit_code(self) -> int:
        return self._code.value

    def commit(self) -> None:
        if self._code is not _ExitCodeEnum.SUCCESS:
            print(f'error: {self._message}', file=sys.stderr)
            return
        for path, text in self._outputs:
            write_atomic(path, text)
            logger.info('wrote %s', path)
        if self._message:
            print(self._message)


@dataclass(frozen=True)
class RunConfig:
    """Every knob a command reads. all numeric fields are echoed into report metadata."""

    iou_threshold: float = 0.5
    neg_iou_threshold: float | None = None
    neg_policy: NegativePolicy = NegativePolicy.EXCLUDE
    prob_threshold: float = 0.5
    aggregation: AggregationScheme = AggregationScheme.EXAMPLEWISE
    max_count: int = 72
    sigma_sq: float = 0.25
    count_strategy: CountStrategy = CountStrategy.SUM
    cluster_iou: float = 0.5
    trials: int = 100_000
    seed: int = 0
    workers: int = 1
    alternative: Alternative = Alternative.TWO_SIDED
    upper_bound: bool = False

    def __post_init__(self) -> None:
        for name in ('iou_threshold', 'prob_threshold', 'cluster_iou'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValidationError(f'{name} must lie in [0, 1], got {value}')
        if self.neg_iou_threshold is not None and not 0 <= self.neg_iou_threshold <= self.iou_threshold:
            raise ValidationError(f'neg_iou_threshold must lie in [0, iou_threshold], got {self.neg_iou_threshold}')
        if self.trials < 1:
            raise ValidationError(f'trials must be at least 1, got {self.trials}')
        if self.max_count < 1:
            raise ValidationError(f'max_count must be at least 1, got {self.max_count}')
        if self.sigma_sq < 0:
            raise ValidationError(f'sigma_sq must be nonnegative, got {self.sigma_sq}')
        if self.workers < 1:
            raise ValidationError(f'workers must be at least 1, got {self.workers}')

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> RunConfig:
        return cls(
            iou_threshold=args.iou_threshold,
            neg_iou_threshold=args.neg_iou_threshold,
            neg_policy=NegativePolicy(args.neg_policy),
            prob_threshold=args.prob_threshold,
            aggregation=AggregationScheme(args.aggregation),
            max_count=args.max_count,
            sigma_sq=args.sigma_sq,
            count_strategy=CountStrategy(args.count_strategy),
            cluster_iou=args.cluster_iou,
            trials=args.trials,
            seed=args.seed,
            workers=args.workers,
            alternative=Alternative(args.alternative),
            upper_bound=args.upper_bound,
        )

    def executor_config(self) -> ExecutorConfig:
        return ExecutorConfig(self.max_count, self.sigma_sq, self.count_strategy, self.cluster_iou)

    def metric_config(self) -> MetricConfig:
        return MetricConfig(self.iou_threshold, self.prob_threshold, self.neg_iou_threshold, self.neg_policy)

    def metadata(self) -> dict[str, Any]:
        return {key: value.value if isinstance(value, Enum) else value for key, value in asdict(self).items()}


def _json_text(record: Any) -> str:
    return dumps_record(record) + '\n'


def _run_programs(
    programs_path: str, groundings_path: str, scenes: Mapping[str, Scene], scenes_path: str, config: RunConfig
) -> list[tuple[str, ExecutionTrace]]:
    programs = load_programs(programs_path)
    provider = load_groundings(groundings_path)
    executor_config = config.executor_config()

    items = []
    for example_id in sorted(programs):
        scene = scenes.get(example_id)
        if scene is None:
            raise ValidationError(f'no scene for example {example_id!r}', scenes_path)
        program = programs[example_id].program
        if (node := provider.missing(example_id, program, executor_config)) is not None:
            raise GroundingError(example_id, node)
        items.append((program, scene))

    traces = execute_many(items, provider, executor_config, config.workers)
    return [(scene.example_id, trace) for (_, scene), trace in zip(items, traces, strict=True)]


def cmd_exec(args: argparse.Namespace, config: RunConfig) -> CommandResult:
    traces = _run_programs(args.programs, args.groundings, load_scenes(args.scenes), args.scenes, config)
    records = [trace_record(example_id, trace) for example_id, trace in traces]
    logger.info('executed %d example(s)', len(records))
    return CommandResult.success(outputs={args.out: dumps_ndjson(records)})


def cmd_eval_visual(args: argparse.Namespace, config: RunConfig) -> CommandResult:
    annotations = load_visual_annotations(args.annotations)
    scenes = load_scenes(args.scenes)
    if args.programs is None:
        attentions = load_attentions(args.outputs)
    else:
        # outputs holds groundings; module outputs come from executing them
        traces = _run_programs(args.programs, args.outputs, scenes, args.scenes, config)
        attentions = {
            (example_id, node): attention
            for example_id, trace in traces
            for node in trace
            if (attention := trace.box_attention(node)) is not None
        }
    metric_config = config.metric_config()

    instances = score_instances(annotations, attentions, scenes, metric_config)
    report = aggregate(instances, config.aggregation, metadata=config.metadata())
    rows = [('model', report)]
    record = report.to_record()
    if config.upper_bound:
        bound = upper_bound(scenes, annotations, metric_config, config.aggregation)
        rows.append(('upper bound', bound))
        record['upper_bound'] = bound.to_record()

    table = render_table(rows)
    outputs = {args.out: _json_text(record)}
    if args.table is not None:
        outputs[args.table] = table + '\n'
    return CommandResult.success(table, outputs)


def cmd_eval_text(args: argparse.Namespace, config: RunConfig) -> CommandResult:
    annotations = load_text_annotations(args.annotations)
    outputs = map_or(args.outputs, None, load_text_outputs)
    report = text_aggregate(score_text(annotations, outputs), metadata=config.metadata())
    table = report.to_table()
    files = {args.out: _json_text(report.to_record())}
    if args.table is not None:
        files[args.table] = table + '\n'
    return CommandResult.success(table, files)


def cmd_perm_test(args: argparse.Namespace, config: RunConfig) -> CommandResult:
    report_a = load_report(args.a)
    report_b = load_report(args.b)
    ids, scores_a, scores_b = paired_scores(report_a, report_b, args.module, args.metric)
    result = permutation_test(
        scores_a, scores_b, config.trials, config.seed, alternative=config.alternative, workers=config.workers
    )
    record = {
        'p_value': result.p_value,
        'observed': result.observed,
        'trials': result.trials,
        'seed': result.seed,
        'module': args.module,
        'metric': args.metric,
        'alternative': config.alternative.value,
        'examples': len(ids),
    }
    text = _json_text(record)
    return CommandResult.success(text.rstrip('\n'), {args.out: text} if args.out is not None else None)


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> CommandResult:
    spec = SceneSpec() if args.spec is None else SceneSpec.from_record(load_json(args.spec))
    programs = load_programs(args.programs)
    executor_config = config.executor_config()

    scenes, groundings, annotations, expected = [], [], [], []
    for index, example_id in enumerate(sorted(programs)):
        example = generate_example(
            programs[example_id].program,
            spec,
            seed=(config.seed, index),
            example_id=example_id,
            noise=args.noise,
            config=executor_config,
        )
        scenes.append(scene_record(example.scene))
        groundings.extend(example.groundings)
        annotations.extend(example.annotations)
        expected.append({'id': example_id, 'expected': example.expected})

    out = Path(args.out_dir)
    logger.info('generated %d synthetic example(s)', len(scenes))
    return CommandResult.success(
        outputs={
            out / 'scenes.ndjson': dumps_ndjson(scenes),
            out / 'groundings.ndjson': dumps_ndjson(groundings),
            out / 'annotations.ndjson': dumps_ndjson(annotations),
            out / 'expected.ndjson': dumps_ndjson(expected),
        }
    )


def _config_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group('run config')
    group.add_argument('--iou-threshold', type=float, default=0.5, help='boxes align iff IOU exceeds this')
    group.add_argument('--neg-iou-threshold', type=float, default=None, help='negative IOU threshold for precision')
    group.add_argument('--neg-policy', choices=[p.value for p in NegativePolicy], default='exclude')
    group.add_argument('--prob-threshold', type=float, default=0.5, help='a proposal is predicted above this')
    group.add_argument('--aggregation', choices=[s.value for s in AggregationScheme], default='examplewise')
    group.add_argument('--count-strategy', choices=[s.value for s in CountStrategy], default='sum')
    group.add_argument('--sigma-sq', type=float, default=0.25, help='variance attached to counts')
    group.add_argument('--max-count', type=int, default=72, help='largest count of the discretization')
    group.add_argument('--cluster-iou', type=float, default=0.5, help='clustering IOU of the overlap count')
    group.add_argument('--trials', type=int, default=100_000)
    group.add_argument('--seed', type=int, default=0)
    group.add_argument('--workers', type=int, default=1)
    group.add_argument('--alternative', choices=[a.value for a in Alternative], default='two-sided')
    group.add_argument('--upper-bound', action='store_true', help='add the upper-bound row to visual reports')
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='nmn-faith', description='Execute module programs and score faithfulness.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true')
    verbosity.add_argument('-q', '--quiet', action='store_true')
    config = _config_parser()
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('exec', parents=[config], help='execute programs and write traces')
    p.add_argument('--programs', required=True)
    p.add_argument('--scenes', required=True)
    p.add_argument('--groundings', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_exec)

    p = sub.add_parser('eval-visual', parents=[config], help='score box attentions against gold boxes')
    p.add_argument('--outputs', required=True, help='trace file, module outputs file, or groundings with --programs')
    p.add_argument('--programs', default=None, help='execute these programs over the groundings in --outputs')
    p.add_argument('--annotations', required=True)
    p.add_argument('--scenes', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--table', default=None)
    p.set_defaults(func=cmd_eval_visual)

    p = sub.add_parser('eval-text', parents=[config], help='score token distributions against gold spans')
    p.add_argument('--annotations', required=True)
    p.add_argument('--outputs', default=None, help='module outputs file; defaults to token_dist in annotations')
    p.add_argument('--out', required=True)
    p.add_argument('--table', default=None)
    p.set_defaults(func=cmd_eval_text)

    p = sub.add_parser('perm-test', parents=[config], help='paired permutation test between two reports')
    p.add_argument('--a', required=True)
    p.add_argument('--b', required=True)
    p.add_argument('--module', default=OVERALL)
    p.add_argument('--metric', default='f1')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_perm_test)

    p = sub.add_parser('synth', parents=[config], help='generate a synthetic bundle for programs')
    p.add_argument('--programs', required=True)
    p.add_argument('--spec', default=None, help='scene spec JSON; defaults to the built-in spec')
    p.add_argument('--noise', type=float, default=0.0)
    p.add_argument('--out-dir', required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr)

    command: Callable[[argparse.Namespace, RunConfig], CommandResult] = args.func
    try:
        result = command(args, RunConfig.from_args(args))
    except NMNFaithError as e:
        result = CommandResult.invalid(str(e))
    except Exception as e:
        logger.exception('%s failed', args.command)
        result = CommandResult.internal(f'{type(e).__name__}: {e}')

    try:
        result.commit()
    except OSError as e:
        print(f'error: cannot write output: {e}', file=sys.stderr)
        return _ExitCodeEnum.INTERNAL.value
    return result.exit_code
