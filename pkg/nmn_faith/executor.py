from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .algebra import (
    DEFAULT_MAX_COUNT,
    BoolOp,
    Comparison,
    NumberValue,
    TruthProb,
    bool_combine,
    compare,
    gaussian_arith,
)
from .errors import GroundingError, ProviderError
from .program import TypedProgram, ValueType
from .scene import BoxAttention, ImageSide, Scene

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator, Mapping, Sequence

    from numpy.typing import ArrayLike, NDArray

    from .program import UtteranceAttention

__all__ = (
    'CountStrategy',
    'ExecutorConfig',
    'LearnedKind',
    'GroundingRequest',
    'GroundingProvider',
    'GroundingEntry',
    'FileGroundingProvider',
    'ImagePair',
    'ExecutionTrace',
    'Executor',
    'execute',
    'execute_many',
    'apply_learned',
    'intersect',
    'discard',
    'restrict_to_image',
    'count_sum',
    'count_overlap_aware',
    'exist',
    'combine_macro',
    'LEARNED_MODULES',
    'MACROS',
)

logger = logging.getLogger(__name__)

_SCORE_TOLERANCE = 1e-9


class CountStrategy(Enum):
    """How `count` turns a box attention into a number.

    SUM is the closed form Σp; OVERLAP clusters overlapping proposals first; PROVIDER asks the grounding provider.
    """

    SUM = 'sum'
    OVERLAP = 'overlap'
    PROVIDER = 'provider'


@dataclass(frozen=True)
class ExecutorConfig:
    """Config for Executor.

    max_count: K, the largest count of the categorical discretization.
    sigma_sq: variance attached to counts.
    count_strategy: see CountStrategy.
    cluster_iou: IOU above which proposals join one cluster for CountStrategy.OVERLAP.
    """

    max_count: int = DEFAULT_MAX_COUNT
    sigma_sq: float = 0.25
    count_strategy: CountStrategy = CountStrategy.SUM
    cluster_iou: float = 0.5

    def __post_init__(self) -> None:
        if self.max_count < 1:
            raise ValueError(f'max_count must be at least 1, got {self.max_count}')
        if self.sigma_sq < 0:
            raise ValueError(f'sigma_sq must be nonnegative, got {self.sigma_sq}')
        if not 0 <= self.cluster_iou <= 1:
            raise ValueError(f'cluster_iou must lie in [0, 1], got {self.cluster_iou}')


class LearnedKind(Enum):
    """Learned module factors a provider supplies. PROJECT_QUERY is the find(q) factor inside project."""

    FIND = 'find'
    FILTER = 'filter'
    WITH_RELATION = 'with-relation'
    PROJECT = 'project'
    PROJECT_QUERY = 'project-query'


LEARNED_MODULES = frozenset({'find', 'filter', 'with-relation', 'project'})
MACROS = frozenset({'in-at-least-one-image', 'in-each-image', 'in-one-other-image'})


class GroundingRequest(NamedTuple):
    """What a provider is asked for.

    `image` is the image a macro restricts execution to, None outside macros. the executor masks the
    other image itself, so providers may ignore it.
    """

    kind: LearnedKind
    utterance: UtteranceAttention | None
    inputs: tuple[BoxAttention, ...]
    node: int
    image: ImageSide | None = None


class GroundingProvider:
    """The base class that all grounding providers must inherit from.

    A provider stands in for the learned parts of find, filter, with-relation and project. It returns one
    score in [0, 1] per proposal; the executor applies the module's algebraic skeleton around it.
    """

    def scores(self, scene: Scene, request: GroundingRequest) -> ArrayLike:
        """Per-proposal learned factor for request, aligned with scene.proposals."""
        raise NotImplementedError

    def count(self, scene: Scene, attention: BoxAttention, node: int, image: ImageSide | None = None) -> NumberValue:
        """Number for `count` and `exist` under CountStrategy.PROVIDER. `image` is the macro restriction in force."""
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class GroundingEntry:
    """Stored groundings of one node of one example. `numbers` is keyed by image restriction, None outside macros."""

    scores: NDArray[np.float64] | None = None
    find_scores: NDArray[np.float64] | None = None
    numbers: Mapping[ImageSide | None, NumberValue] = field(default_factory=dict)


class FileGroundingProvider(GroundingProvider):
    """Serves groundings loaded from a groundings file.

    Args:
        entries (Mapping[tuple[str, int], GroundingEntry]): groundings keyed by (example id, NodeId).
    """

    def __init__(self, entries: Mapping[tuple[str, int], GroundingEntry]) -> None:
        self.entries = dict(entries)

    def _entry(self, example_id: str, node: int) -> GroundingEntry:
        try:
            return self.entries[example_id, node]
        except KeyError:
            raise GroundingError(example_id, node) from None

    def scores(self, scene: Scene, request: GroundingRequest) -> ArrayLike:
        entry = self._entry(scene.example_id, request.node)
        if request.kind is LearnedKind.PROJECT_QUERY:
            return entry.find_scores if entry.find_scores is not None else np.ones(len(scene))
        if entry.scores is None:
            raise GroundingError(scene.example_id, request.node, 'grounding has no scores')
        return entry.scores

    def count(self, scene: Scene, attention: BoxAttention, node: int, image: ImageSide | None = None) -> NumberValue:
        entry = self._entry(scene.example_id, node)
        number = entry.numbers.get(image, entry.numbers.get(None))
        if number is None:
            raise GroundingError(scene.example_id, node, 'grounding has no number')
        return number

    def missing(self, example_id: str, program: TypedProgram, config: ExecutorConfig) -> int | None:
        """First node of program the stored groundings cannot serve, None if complete."""
        for node in range(len(program)):
            module = program.module(node)
            entry = self.entries.get((example_id, node))
            if module in LEARNED_MODULES and (entry is None or entry.scores is None):
                return node
            if (
                config.count_strategy is CountStrategy.PROVIDER
                and module in ('count', 'exist')
                and (entry is None or not entry.numbers)
            ):
                return node
        return None


Value = TruthProb | NumberValue | BoxAttention


class ImagePair(NamedTuple):
    """Values of one node evaluated once per image inside a macro."""

    left: Value
    right: Value


TraceValue = Value | ImagePair


@dataclass(frozen=True)
class ExecutionTrace:
    """Every intermediate output of one execution, keyed by NodeId."""

    program: TypedProgram = field(repr=False)
    values: Mapping[int, TraceValue]
    denotation: Value

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, node: int) -> TraceValue:
        return self.values[node]

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self.values))

    def box_attention(self, node: int) -> BoxAttention | None:
        """Attention output of node; both images' runs merged for macro subprograms. None for other types."""
        value = self.values[node]
        if isinstance(value, ImagePair):
            left, right = value
            if isinstance(left, BoxAttention) and isinstance(right, BoxAttention):
                return BoxAttention(np.maximum(left.probs, right.probs))
            return None
        return value if isinstance(value, BoxAttention) else None


def _check_lengths(*attentions: BoxAttention | NDArray[np.float64]) -> int:
    sizes = {len(a) for a in attentions}
    if len(sizes) != 1:
        raise ValueError(f'length mismatch between box attentions: {sorted(sizes)}')
    return sizes.pop()


def apply_learned(
    kind: LearnedKind | str,
    inputs: Sequence[BoxAttention],
    scores: ArrayLike,
    query: ArrayLike | None = None,
) -> BoxAttention:
    """Compose a learned factor with the module's deterministic skeleton.

    find: score; filter: p ⊙ score; with-relation: max(p2) · p1 ⊙ score; project: max(p) · query ⊙ score,
    where query is the find(q) factor (all ones when omitted).

    Args:
        kind (LearnedKind | str): module kind.
        inputs (Sequence[BoxAttention]): input attentions, in argument order.
        scores (ArrayLike): provider scores in [0, 1].
        query (ArrayLike, optional): find(q) factor of project. Defaults to None.

    Returns:
        BoxAttention: module output.
    """
    factor = np.asarray(scores, dtype=np.float64)
    match LearnedKind(kind):
        case LearnedKind.FIND | LearnedKind.PROJECT_QUERY:
            return BoxAttention(factor)
        case LearnedKind.FILTER:
            (p,) = inputs
            _check_lengths(p, factor)
            return BoxAttention(p.probs * factor)
        case LearnedKind.WITH_RELATION:
            p1, p2 = inputs
            _check_lengths(p1, p2, factor)
            scale = float(p2.probs.max(initial=0.0))
            return BoxAttention(scale * p1.probs * factor)
        case LearnedKind.PROJECT:
            (p,) = inputs
            q = np.ones_like(factor) if query is None else np.asarray(query, dtype=np.float64)
            _check_lengths(p, factor, q)
            return BoxAttention(float(p.probs.max(initial=0.0)) * q * factor)


def intersect(p1: BoxAttention, p2: BoxAttention) -> BoxAttention:
    """Elementwise product."""
    _check_lengths(p1, p2)
    return BoxAttention(p1.probs * p2.probs)


def discard(p1: BoxAttention, p2: BoxAttention) -> BoxAttention:
    """max(p1 - p2, 0) elementwise."""
    _check_lengths(p1, p2)
    return BoxAttention(np.maximum(p1.probs - p2.probs, 0.0))


def restrict_to_image(p: BoxAttention, scene: Scene, side: ImageSide) -> BoxAttention:
    """Zero every proposal not on side."""
    _check_lengths(p, scene.image_mask(side))
    return BoxAttention(p.probs * scene.image_mask(side))


def count_sum(p: BoxAttention, sigma_sq: float = 0.25) -> NumberValue:
    """number(Σp, σ²)."""
    return NumberValue(math.fsum(p.probs.tolist()), sigma_sq)


def count_overlap_aware(p: BoxAttention, scene: Scene, cluster_iou: float = 0.5, sigma_sq: float = 0.25) -> NumberValue:
    """Count after single-link clustering of proposals whose IOU exceeds cluster_iou.

    Each cluster contributes its largest probability. pairwise-disjoint proposals reduce to count_sum.
    """
    _check_lengths(p, scene.image_mask(ImageSide.LEFT))
    if len(p) == 0:
        return NumberValue(0.0, sigma_sq)
    adjacency = csr_matrix(scene.self_iou > cluster_iou)
    n_clusters, labels = connected_components(adjacency, directed=False)
    best = np.zeros(n_clusters)
    np.maximum.at(best, labels, p.probs)
    return NumberValue(math.fsum(best.tolist()), sigma_sq)


def exist(p: BoxAttention, config: ExecutorConfig | None = None, scene: Scene | None = None) -> TruthProb:
    """greater-equal(count(p), 1) under the sum or overlap count strategy."""
    config = config or ExecutorConfig()
    match config.count_strategy:
        case CountStrategy.SUM:
            number = count_sum(p, config.sigma_sq)
        case CountStrategy.OVERLAP:
            if scene is None:
                raise ValueError('overlap-aware counting needs the scene')
            number = count_overlap_aware(p, scene, config.cluster_iou, config.sigma_sq)
        case CountStrategy.PROVIDER:
            raise ValueError('provider counts are only available inside an Executor')
    return compare(Comparison.GREATER_EQUAL, number, NumberValue.point(1), config.max_count)


def combine_macro(kind: str, results: Sequence[tuple[TruthProb, TruthProb]]) -> TruthProb:
    """Combine per-image subprogram truths of a macro.

    Args:
        kind (str): macro name.
        results (Sequence[tuple[TruthProb, TruthProb]]): (left, right) truth of each subprogram.

    Returns:
        TruthProb: at-least-one = or(L, R); each = and(L, R); one-other = or(and(p1@L, p2@R), and(p1@R, p2@L)).
    """
    match kind, results:
        case 'in-at-least-one-image', [(left, right)]:
            return bool_combine(BoolOp.OR, left, right)
        case 'in-each-image', [(left, right)]:
            return bool_combine(BoolOp.AND, left, right)
        case 'in-one-other-image', [(first_left, first_right), (second_left, second_right)]:
            return bool_combine(
                BoolOp.OR,
                bool_combine(BoolOp.AND, first_left, second_right),
                bool_combine(BoolOp.AND, first_right, second_left),
            )
        case _:
            raise ValueError(f'unknown macro {kind!r} or wrong number of subprograms ({len(results)})')


_VALUE_TYPES: dict[ValueType, type[Value]] = {
    ValueType.BOOLEAN: TruthProb,
    ValueType.NUMBER: NumberValue,
    ValueType.BOX_ATTENTION: BoxAttention,
}


class _Run:
    """State of one execution: per-node values keyed by the image restriction in force."""

    def __init__(self, program: TypedProgram, scene: Scene) -> None:
        self.program = program
        self.scene = scene
        self.values: dict[int, dict[ImageSide | None, Value]] = {}

    def record(self, node: int, side: ImageSide | None, value: Value) -> None:
        expected = _VALUE_TYPES.get(self.program.type_of(node))
        assert expected is not None and isinstance(value, expected), (node, value)
        self.values.setdefault(node, {})[side] = value

    def trace(self, denotation: Value) -> ExecutionTrace:
        out: dict[int, TraceValue] = {}
        for node, by_side in sorted(self.values.items()):
            if None in by_side:
                out[node] = by_side[None]
            else:
                out[node] = ImagePair(by_side[ImageSide.LEFT], by_side[ImageSide.RIGHT])
        return ExecutionTrace(self.program, out, denotation)


class Executor:
    """Program executor.

    This class evaluates typed visual programs in post-order: deterministic modules in closed form, learned
    modules through the grounding provider.

    Args:
        provider (GroundingProvider): source of learned-module scores.
        config (ExecutorConfig, optional): execution config. Defaults to ExecutorConfig().
    """

    provider: GroundingProvider
    config: ExecutorConfig

    def __init__(self, provider: GroundingProvider, config: ExecutorConfig | None = None) -> None:
        self.provider = provider
        self.config = config or ExecutorConfig()

    def execute(self, program: TypedProgram, scene: Scene) -> tuple[Value, ExecutionTrace]:
        """Execute program over scene.

        Args:
            program (TypedProgram): typechecked visual program.
            scene (Scene): the example's proposals.

        Returns:
            tuple[Value, ExecutionTrace]: denotation and the trace of every node.

        Raises:
            TypeError: program was not typechecked.
            GroundingError: the provider has nothing for a learned node.
            ProviderError: the provider returned scores outside its contract.
        """
        if not isinstance(program, TypedProgram):
            raise TypeError('execute needs a TypedProgram; run typecheck first')
        if program.signatures.domain != 'visual':
            raise ValueError(f'cannot execute {program.signatures.domain} programs over a scene')
        run = _Run(program, scene)
        denotation = self._eval(run, program.program.root, None)
        trace = run.trace(denotation)
        assert len(trace) == len(program)
        logger.debug('executed %s on %s: %s', program.program, scene.example_id, denotation)
        return denotation, trace

    def run_macro(self, run: _Run, node: int, side: ImageSide | None) -> TruthProb:
        """Evaluate each subprogram of a macro once per image and combine the truths."""
        assert side is None, 'nested macros are rejected by typecheck'
        results: list[tuple[TruthProb, TruthProb]] = []
        for child in run.program.program[node].children:
            left = self._eval(run, child, ImageSide.LEFT)
            right = self._eval(run, child, ImageSide.RIGHT)
            assert isinstance(left, TruthProb) and isinstance(right, TruthProb)
            results.append((left, right))
        return combine_macro(run.program.module(node), results)

    def _learned(
        self, run: _Run, node: int, kind: LearnedKind, inputs: tuple[BoxAttention, ...], side: ImageSide | None
    ) -> NDArray[np.float64]:
        request = GroundingRequest(kind, run.program.program[node].utterance, inputs, node, side)
        raw = np.asarray(self.provider.scores(run.scene, request), dtype=np.float64)
        if raw.shape != (len(run.scene),):
            raise ProviderError(node, f'expected {len(run.scene)} scores, got shape {raw.shape}')
        if not np.all(np.isfinite(raw)) or np.any(raw < -_SCORE_TOLERANCE) or np.any(raw > 1 + _SCORE_TOLERANCE):
            raise ProviderError(node, f'{kind.value} scores must lie in [0, 1]')
        scores = np.clip(raw, 0.0, 1.0)
        if side is not None:
            scores = scores * run.scene.image_mask(side)
        return scores

    def _count(self, run: _Run, node: int, p: BoxAttention, side: ImageSide | None) -> NumberValue:
        match self.config.count_strategy:
            case CountStrategy.SUM:
                return count_sum(p, self.config.sigma_sq)
            case CountStrategy.OVERLAP:
                return count_overlap_aware(p, run.scene, self.config.cluster_iou, self.config.sigma_sq)
            case CountStrategy.PROVIDER:
                number = self.provider.count(run.scene, p, node, side)
                if not isinstance(number, NumberValue):
                    raise ProviderError(node, f'count provider returned {type(number).__name__}')
                return number

    def _eval(self, run: _Run, node: int, side: ImageSide | None) -> Value:
        module = run.program.module(node)
        if module in MACROS:
            value: Value = self.run_macro(run, node, side)
            run.record(node, side, value)
            return value

        args = [self._eval(run, child, side) for child in run.program.program[node].children]
        boxes = tuple(a for a in args if isinstance(a, BoxAttention))
        numbers = [a for a in args if isinstance(a, NumberValue)]
        truths = [a for a in args if isinstance(a, TruthProb)]
        K = self.config.max_count

        match module:
            case 'find':
                value = apply_learned(LearnedKind.FIND, (), self._learned(run, node, LearnedKind.FIND, (), side))
            case 'filter':
                scores = self._learned(run, node, LearnedKind.FILTER, boxes, side)
                value = apply_learned(LearnedKind.FILTER, boxes, scores)
            case 'with-relation':
                scores = self._learned(run, node, LearnedKind.WITH_RELATION, boxes, side)
                value = apply_learned(LearnedKind.WITH_RELATION, boxes, scores)
            case 'project':
                query = self._learned(run, node, LearnedKind.PROJECT_QUERY, (), side)
                scores = self._learned(run, node, LearnedKind.PROJECT, boxes, side)
                value = apply_learned(LearnedKind.PROJECT, boxes, scores, query)
            case 'count':
                value = self._count(run, node, boxes[0], side)
            case 'exist':
                value = compare(
                    Comparison.GREATER_EQUAL, self._count(run, node, boxes[0], side), NumberValue.point(1), K
                )
            case 'equal' | 'less' | 'greater' | 'less-equal' | 'greater-equal':
                value = compare(module, numbers[0], numbers[1], K)
            case 'and' | 'or':
                value = bool_combine(module, truths[0], truths[1])
            case 'sum' | 'difference' | 'division':
                value = gaussian_arith(module, numbers[0], numbers[1])
            case 'intersect':
                value = intersect(*boxes)
            case 'discard':
                value = discard(*boxes)
            case 'in-left-image':
                value = restrict_to_image(boxes[0], run.scene, ImageSide.LEFT)
            case 'in-right-image':
                value = restrict_to_image(boxes[0], run.scene, ImageSide.RIGHT)
            case _:
                raise NotImplementedError(f'no executor rule for module {module!r}')

        run.record(node, side, value)
        return value


def execute(
    program: TypedProgram, scene: Scene, provider: GroundingProvider, config: ExecutorConfig | None = None
) -> tuple[Value, ExecutionTrace]:
    """Shorthand for `Executor(provider, config).execute(program, scene)`."""
    return Executor(provider, config).execute(program, scene)


def execute_many(
    examples: Iterable[tuple[TypedProgram, Scene]],
    provider: GroundingProvider,
    config: ExecutorConfig | None = None,
    workers: int = 1,
) -> list[ExecutionTrace]:
    """Execute independent examples, possibly in parallel. Traces are ordered by example id."""
    executor = Executor(provider, config)
    items = sorted(examples, key=lambda item: item[1].example_id)
    if workers <= 1:
        return [executor.execute(program, scene)[1] for program, scene in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [trace for _, trace in pool.map(lambda item: executor.execute(*item), items)]
