from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np

from .errors import ValidationError
from .scene import BoundingBox, BoxAttention, ImageSide, Scene, iou_matrix
from .util import harmonic_mean, safe_ratio

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from numpy.typing import ArrayLike, NDArray

__all__ = (
    'OVERALL',
    'TEXT_EPSILON',
    'AggregationScheme',
    'NegativePolicy',
    'MetricConfig',
    'VisualAnnotation',
    'TextAnnotation',
    'MatchCounts',
    'ModuleScore',
    'ScoredInstance',
    'TextInstance',
    'FaithfulnessReport',
    'align',
    'instance_counts',
    'example_module_score',
    'score_instances',
    'aggregate',
    'oracle_attention',
    'upper_bound',
    'text_instance_score',
    'score_text',
    'text_aggregate',
    'render_table',
)

logger = logging.getLogger(__name__)

OVERALL = 'overall'
TEXT_EPSILON = 1e-12
"""Lower clamp of a gold span's probability mass before taking its log."""


class AggregationScheme(Enum):
    EXAMPLEWISE = 'examplewise'
    CUMULATIVE = 'cumulative'
    OCCURRENCE = 'occurrence'


class NegativePolicy(Enum):
    """Treatment of predicted boxes whose best IOU lies in [neg_iou_threshold, iou_threshold].

    EXCLUDE drops them from the predicted count; PENALIZE keeps them as false positives.
    """

    EXCLUDE = 'exclude'
    PENALIZE = 'penalize'


@dataclass(frozen=True)
class MetricConfig:
    """Thresholds of the visual faithfulness metric.

    iou_threshold: boxes align iff IOU > iou_threshold.
    prob_threshold: a proposal is predicted iff its probability > prob_threshold.
    neg_iou_threshold: optional second threshold for precision, see NegativePolicy.
    """

    iou_threshold: float = 0.5
    prob_threshold: float = 0.5
    neg_iou_threshold: float | None = None
    neg_policy: NegativePolicy = NegativePolicy.EXCLUDE

    def __post_init__(self) -> None:
        for name in ('iou_threshold', 'prob_threshold'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f'{name} must lie in [0, 1], got {value}')
        if self.neg_iou_threshold is not None and not 0 <= self.neg_iou_threshold <= self.iou_threshold:
            raise ValueError(f'neg_iou_threshold must lie in [0, iou_threshold], got {self.neg_iou_threshold}')


class VisualAnnotation(NamedTuple):
    """Gold boxes for one module instance. `image` is set for per-image occurrences inside macros."""

    example_id: str
    node: int
    module: str
    boxes: tuple[BoundingBox, ...]
    image: ImageSide | None = None


class TextAnnotation(NamedTuple):
    """Gold spans (inclusive token indices) for one text module instance."""

    example_id: str
    node: int
    module: str
    spans: tuple[tuple[int, int], ...]
    token_dist: tuple[float, ...] | None = None


class MatchCounts(NamedTuple):
    matched_proposed: int
    predicted: int
    matched_annotated: int
    annotated: int

    @classmethod
    def pooled(cls, counts: Iterable[MatchCounts]) -> MatchCounts:
        totals = [0, 0, 0, 0]
        for c in counts:
            for i, value in enumerate(c):
                totals[i] += value
        return cls(*totals)

    @property
    def precision(self) -> float:
        return safe_ratio(self.matched_proposed, self.predicted)

    @property
    def recall(self) -> float:
        return safe_ratio(self.matched_annotated, self.annotated)

    def score(self) -> ModuleScore:
        p, r = self.precision, self.recall
        return ModuleScore(p, r, harmonic_mean(p, r))


class ModuleScore(NamedTuple):
    precision: float
    recall: float
    f1: float

    def as_record(self) -> dict[str, float]:
        return self._asdict()

    @classmethod
    def mean(cls, scores: Sequence[ModuleScore]) -> ModuleScore:
        """Componentwise mean. F1 is the mean of F1s, not the harmonic mean of the mean P and R."""
        if not scores:
            raise ValueError('cannot average zero scores')
        return cls(*(math.fsum(column) / len(scores) for column in zip(*scores, strict=True)))


class ScoredInstance(NamedTuple):
    example_id: str
    node: int
    module: str
    image: ImageSide | None
    counts: MatchCounts


class TextInstance(NamedTuple):
    example_id: str
    node: int
    module: str
    cross_entropy: float


def align(annotated: Sequence[BoundingBox], proposed: Sequence[BoundingBox], T: float = 0.5) -> NDArray[np.bool_]:
    """Alignment relation between annotated and proposed boxes.

    Returns:
        NDArray[np.bool_]: shape (len(annotated), len(proposed)); entry (i, j) is True iff IOU > T.
            many-to-many, not a matching.
    """
    return iou_matrix(annotated, proposed) > T


def instance_counts(
    annotation: VisualAnnotation, attention: BoxAttention, scene: Scene, config: MetricConfig | None = None
) -> MatchCounts:
    """Match counts of one module instance.

    Only proposals on the annotation's image count when `annotation.image` is set.

    Args:
        annotation (VisualAnnotation): gold boxes.
        attention (BoxAttention): module output aligned with scene.
        scene (Scene): proposals.
        config (MetricConfig, optional): thresholds. Defaults to MetricConfig().

    Returns:
        MatchCounts: matched proposed and annotated boxes with their denominators.
    """
    config = config or MetricConfig()
    if len(attention) != len(scene):
        raise ValueError(f'attention has {len(attention)} entries, scene has {len(scene)} proposals')
    candidates = np.asarray(scene.indices(annotation.image), dtype=np.intp)
    proposals = [scene.proposals[i] for i in candidates]
    predicted = attention.probs[candidates] > config.prob_threshold

    overlap = iou_matrix(annotation.boxes, proposals)
    aligned = overlap > config.iou_threshold
    proposal_aligned = aligned.any(axis=0)

    matched_proposed = int(np.count_nonzero(predicted & proposal_aligned))
    matched_annotated = int(np.count_nonzero((aligned & predicted[None, :]).any(axis=1)))
    n_predicted = int(np.count_nonzero(predicted))

    if config.neg_iou_threshold is not None and config.neg_policy is NegativePolicy.EXCLUDE:
        best = overlap.max(axis=0, initial=0.0)
        ambiguous = predicted & ~proposal_aligned & (best >= config.neg_iou_threshold)
        n_predicted -= int(np.count_nonzero(ambiguous))

    return MatchCounts(matched_proposed, n_predicted, matched_annotated, len(annotation.boxes))


def example_module_score(counts: Iterable[MatchCounts]) -> ModuleScore:
    """Pooled P/R/F1 of every instance of one module type in one example."""
    counts = list(counts)
    if not counts:
        raise ValueError('example_module_score needs at least one instance')
    return MatchCounts.pooled(counts).score()


def score_instances(
    annotations: Iterable[VisualAnnotation],
    attentions: Mapping[tuple[str, int], BoxAttention],
    scenes: Mapping[str, Scene],
    config: MetricConfig | None = None,
) -> list[ScoredInstance]:
    """Count matches of every annotated instance.

    Raises:
        ValidationError: an annotation references an unknown example or a node without a box attention, or the
            attention length differs from the scene's proposal count.
    """
    out: list[ScoredInstance] = []
    for annotation in annotations:
        scene = scenes.get(annotation.example_id)
        if scene is None:
            raise ValidationError(f'annotation references unknown example {annotation.example_id!r}')
        attention = attentions.get((annotation.example_id, annotation.node))
        if attention is None:
            raise ValidationError(
                f'annotation references node {annotation.node} of example {annotation.example_id!r}, '
                'which has no box attention'
            )
        if len(attention) != len(scene):
            raise ValidationError(
                f'node {annotation.node} of example {annotation.example_id!r} attends over {len(attention)} '
                f'proposals, scene has {len(scene)}'
            )
        counts = instance_counts(annotation, attention, scene, config)
        out.append(ScoredInstance(annotation.example_id, annotation.node, annotation.module, annotation.image, counts))
    out.sort(key=lambda s: (s.example_id, s.node, s.image.value if s.image else ''))
    return out


@dataclass(frozen=True)
class FaithfulnessReport:
    """Aggregated faithfulness scores.

    Scores are metric-name mappings: `precision`, `recall`, `f1` for visual reports and `cross_entropy` for text.
    `per_example` maps example id to module type (and `overall`) to scores; `skipped` counts examples left
    out of a module type's average because they have no instance of it.
    """

    kind: str
    scheme: str
    modules: Mapping[str, Mapping[str, float]]
    overall: Mapping[str, float]
    examples: int
    per_example: Mapping[str, Mapping[str, Mapping[str, float]]] = field(default_factory=dict, repr=False)
    skipped: Mapping[str, int] = field(default_factory=dict)
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def with_metadata(self, **metadata: Any) -> FaithfulnessReport:
        return FaithfulnessReport(
            self.kind,
            self.scheme,
            self.modules,
            self.overall,
            self.examples,
            self.per_example,
            self.skipped,
            {**self.metadata, **metadata},
        )

    def example_scores(self, module: str = OVERALL, metric: str = 'f1') -> dict[str, float]:
        """Per-example score of one module type; examples without that module are omitted."""
        out: dict[str, float] = {}
        for example_id, modules in self.per_example.items():
            scores = modules.get(module)
            if scores is None:
                continue
            if metric not in scores:
                raise KeyError(f'{self.kind} reports have no metric {metric!r}')
            out[example_id] = scores[metric]
        return out

    def to_record(self) -> dict[str, Any]:
        return {
            'kind': self.kind,
            'scheme': self.scheme,
            'modules': {name: dict(scores) for name, scores in self.modules.items()},
            'overall': dict(self.overall),
            'examples': self.examples,
            'per_example': {
                example_id: {name: dict(scores) for name, scores in modules.items()}
                for example_id, modules in self.per_example.items()
            },
            'skipped': dict(self.skipped),
            'metadata': dict(self.metadata),
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> FaithfulnessReport:
        try:
            return cls(
                kind=str(record['kind']),
                scheme=str(record['scheme']),
                modules={str(k): {str(m): float(v) for m, v in s.items()} for k, s in record['modules'].items()},
                overall={str(m): float(v) for m, v in record['overall'].items()},
                examples=int(record['examples']),
                per_example={
                    str(e): {str(k): {str(m): float(v) for m, v in s.items()} for k, s in mods.items()}
                    for e, mods in record.get('per_example', {}).items()
                },
                skipped={str(k): int(v) for k, v in record.get('skipped', {}).items()},
                metadata=dict(record.get('metadata', {})),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ValidationError(f'malformed report record: {e}') from e

    def to_table(self, label: str = 'model') -> str:
        return render_table([(label, self)])


def _per_example(instances: Sequence[ScoredInstance]) -> dict[str, dict[str, MatchCounts]]:
    grouped: dict[str, dict[str, list[MatchCounts]]] = defaultdict(lambda: defaultdict(list))
    for instance in instances:
        grouped[instance.example_id][instance.module].append(instance.counts)
        grouped[instance.example_id][OVERALL].append(instance.counts)
    return {
        example_id: {module: MatchCounts.pooled(counts) for module, counts in sorted(modules.items())}
        for example_id, modules in sorted(grouped.items())
    }


def aggregate(
    instances: Iterable[ScoredInstance],
    scheme: AggregationScheme | str = AggregationScheme.EXAMPLEWISE,
    metadata: Mapping[str, Any] | None = None,
) -> FaithfulnessReport:
    """Aggregate instance counts into a visual FaithfulnessReport.

    Args:
        instances (Iterable[ScoredInstance]): scored module instances.
        scheme (AggregationScheme | str, optional): examplewise averages per-example pooled scores,
            cumulative pools counts over the whole dataset, occurrence averages every (node, image)
            occurrence separately. Defaults to examplewise.
        metadata (Mapping[str, Any], optional): echoed into the report. Defaults to None.

    Returns:
        FaithfulnessReport: per module type and overall scores.

    Raises:
        ValueError: empty input or unknown scheme.
    """
    scheme = AggregationScheme(scheme)
    instances = sorted(instances, key=lambda s: (s.example_id, s.node, s.image.value if s.image else ''))
    if not instances:
        raise ValueError('cannot aggregate zero instances')

    per_example = _per_example(instances)
    module_names = sorted({s.module for s in instances})
    skipped: dict[str, int] = {}

    match scheme:
        case AggregationScheme.EXAMPLEWISE:
            modules: dict[str, ModuleScore] = {}
            for module in module_names:
                scores = [counts[module].score() for counts in per_example.values() if module in counts]
                modules[module] = ModuleScore.mean(scores)
                if missing := len(per_example) - len(scores):
                    skipped[module] = missing
                    logger.debug('%d example(s) have no %s instance', missing, module)
            overall = ModuleScore.mean([counts[OVERALL].score() for counts in per_example.values()])
        case AggregationScheme.CUMULATIVE:
            modules = {
                module: MatchCounts.pooled(s.counts for s in instances if s.module == module).score()
                for module in module_names
            }
            overall = MatchCounts.pooled(s.counts for s in instances).score()
        case AggregationScheme.OCCURRENCE:
            modules = {
                module: ModuleScore.mean([s.counts.score() for s in instances if s.module == module])
                for module in module_names
            }
            overall = ModuleScore.mean([s.counts.score() for s in instances])

    return FaithfulnessReport(
        kind='visual',
        scheme=scheme.value,
        modules={name: score.as_record() for name, score in modules.items()},
        overall=overall.as_record(),
        examples=len(per_example),
        per_example={
            example_id: {name: c.score().as_record() for name, c in counts.items()}
            for example_id, counts in per_example.items()
        },
        skipped=skipped,
        metadata=dict(metadata or {}),
    )


def oracle_attention(annotation: VisualAnnotation, scene: Scene, T: float = 0.5) -> BoxAttention:
    """1.0 on every proposal of the annotation's image aligned with one of its boxes, 0 elsewhere."""
    probs = np.zeros(len(scene))
    candidates = np.asarray(scene.indices(annotation.image), dtype=np.intp)
    proposals = [scene.proposals[i] for i in candidates]
    probs[candidates] = align(annotation.boxes, proposals, T).any(axis=0)
    return BoxAttention(probs)


def upper_bound(
    scenes: Mapping[str, Scene],
    annotations: Iterable[VisualAnnotation],
    config: MetricConfig | None = None,
    scheme: AggregationScheme | str = AggregationScheme.EXAMPLEWISE,
) -> FaithfulnessReport:
    """Best faithfulness any predictor can reach with the given proposals.

    The oracle selects exactly the aligned proposals, which gives precision 1 and the largest recall at once.
    """
    config = config or MetricConfig()
    instances: list[ScoredInstance] = []
    for annotation in annotations:
        scene = scenes.get(annotation.example_id)
        if scene is None:
            raise ValidationError(f'annotation references unknown example {annotation.example_id!r}')
        attention = oracle_attention(annotation, scene, config.iou_threshold)
        counts = instance_counts(annotation, attention, scene, config)
        instances.append(
            ScoredInstance(annotation.example_id, annotation.node, annotation.module, annotation.image, counts)
        )
    return aggregate(instances, scheme, metadata={'upper_bound': True})


def text_instance_score(token_dist: ArrayLike, spans: Sequence[tuple[int, int]]) -> float:
    """Cross-entropy style score −Σ_i log Σ_{j=s_i}^{e_i} p_j of a token distribution against gold spans.

    Args:
        token_dist (ArrayLike): module attention over passage tokens.
        spans (Sequence[tuple[int, int]]): gold (start, end) token spans, both ends inclusive.

    Returns:
        float: nonnegative score; 0 iff every span holds all the mass.

    Raises:
        ValueError: empty span list, negative probabilities or a span out of range.
    """
    dist = np.asarray(token_dist, dtype=np.float64).reshape(-1)
    if not spans:
        raise ValueError('text instance needs at least one gold span')
    if not np.all(np.isfinite(dist)) or np.any(dist < 0):
        raise ValueError('token distribution entries must be finite and nonnegative')
    total = 0.0
    for start, end in spans:
        if not 0 <= start <= end < dist.size:
            raise ValueError(f'span ({start}, {end}) out of range for {dist.size} tokens')
        mass = min(float(dist[start : end + 1].sum()), 1.0)
        total -= math.log(max(mass, TEXT_EPSILON))
    return total


def score_text(
    annotations: Iterable[TextAnnotation], outputs: Mapping[tuple[str, int], Sequence[float]] | None = None
) -> list[TextInstance]:
    """Score every text annotation. The token distribution comes from outputs, else from the annotation itself."""
    outputs = outputs or {}
    out: list[TextInstance] = []
    for annotation in annotations:
        dist = outputs.get((annotation.example_id, annotation.node), annotation.token_dist)
        if dist is None:
            raise ValidationError(
                f'no token distribution for node {annotation.node} of example {annotation.example_id!r}'
            )
        try:
            score = text_instance_score(dist, annotation.spans)
        except ValueError as e:
            raise ValidationError(f'example {annotation.example_id!r}, node {annotation.node}: {e}') from e
        out.append(TextInstance(annotation.example_id, annotation.node, annotation.module, score))
    out.sort(key=lambda s: (s.example_id, s.node))
    return out


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def text_aggregate(instances: Iterable[TextInstance], metadata: Mapping[str, Any] | None = None) -> FaithfulnessReport:
    """Per module type mean cross-entropy; overall is the mean over every instance."""
    instances = list(instances)
    if not instances:
        raise ValueError('cannot aggregate zero instances')
    by_module: dict[str, list[float]] = defaultdict(list)
    by_example: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for instance in instances:
        by_module[instance.module].append(instance.cross_entropy)
        by_example[instance.example_id][instance.module].append(instance.cross_entropy)
        by_example[instance.example_id][OVERALL].append(instance.cross_entropy)
    return FaithfulnessReport(
        kind='text',
        scheme='instance-mean',
        modules={module: {'cross_entropy': _mean(values)} for module, values in sorted(by_module.items())},
        overall={'cross_entropy': _mean([i.cross_entropy for i in instances])},
        examples=len(by_example),
        per_example={
            example_id: {module: {'cross_entropy': _mean(values)} for module, values in sorted(modules.items())}
            for example_id, modules in sorted(by_example.items())
        },
        metadata=dict(metadata or {}),
    )


def render_table(rows: Sequence[tuple[str, FaithfulnessReport]]) -> str:
    """Fixed-width table of reports, one row each.

    Visual reports get Prec./Rec./F1 columns followed by the F1 of each module type; text reports get
    the overall and per module type cross-entropy.
    """
    if not rows:
        return ''
    kind = rows[0][1].kind
    modules = sorted({name for _, report in rows for name in report.modules})
    label_width = max(12, *(len(label) for label, _ in rows))
    if kind == 'visual':
        headers = ['Prec.', 'Rec.', 'F1', *modules]
    else:
        headers = ['Overall', *modules]
    widths = [max(8, len(h)) for h in headers]

    lines = [' '.join([''.ljust(label_width), *(h.rjust(w) for h, w in zip(headers, widths, strict=True))])]
    for label, report in rows:
        if kind == 'visual':
            values: list[float | None] = [report.overall['precision'], report.overall['recall'], report.overall['f1']]
            metric = 'f1'
        else:
            values = [report.overall['cross_entropy']]
            metric = 'cross_entropy'
        values += [report.modules[m][metric] if m in report.modules else None for m in modules]
        cells = ['-'.rjust(w) if v is None else f'{v:{w}.3f}' for v, w in zip(values, widths, strict=True)]
        lines.append(' '.join([label.ljust(label_width), *cells]))
    return '\n'.join(lines)
