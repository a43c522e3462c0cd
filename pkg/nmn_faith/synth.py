from __future__ import annotations

import logging
import threading
import zlib
from dataclasses import dataclass, fields
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np
from scipy.optimize import brentq

from .algebra import DEFAULT_MAX_COUNT, NumberValue
from .errors import GroundingError, ValidationError
from .executor import (
    LEARNED_MODULES,
    MACROS,
    Executor,
    ExecutorConfig,
    GroundingProvider,
    GroundingRequest,
    LearnedKind,
)
from .program import Program, TypedProgram, ValueType, parse
from .scene import BoundingBox, BoxAttention, ImageSide, Scene, iou_matrix

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from numpy.typing import NDArray

__all__ = (
    'RELATIONS',
    'SceneSpec',
    'SyntheticObject',
    'GoldWorld',
    'GoldTrace',
    'SyntheticExample',
    'OracleProvider',
    'RecordingProvider',
    'relation_holds',
    'jitter_box',
    'generate_scene',
    'evaluate_gold',
    'generate_program',
    'check_vocabulary',
    'generate_example',
)

logger = logging.getLogger(__name__)

RELATIONS = ('left-of', 'right-of', 'above', 'below')
ALIGN_IOU = 0.5
SELECTED_PROB = 0.5
_MAX_PLACEMENT_TRIES = 1000
_MAX_JITTER_TRIES = 100
_NO_SET_SEMANTICS = frozenset({'division'})
_KIND_INDEX = {kind: index for index, kind in enumerate(LearnedKind)}
_SIDE_INDEX = {None: 0, ImageSide.LEFT: 1, ImageSide.RIGHT: 2}


def _range(name: str, value: Sequence[float], low: float, high: float) -> None:
    lo, hi = value
    if not low <= lo <= hi <= high:
        raise ValidationError(f'{name} must be an ordered range within [{low}, {high}], got {tuple(value)}')


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of synthetic two-image scenes.

    Ranges are inclusive (low, high) pairs; counts are per image except proposals_per_object.
    """

    image_size: tuple[int, int] = (640, 480)
    object_count: tuple[int, int] = (1, 4)
    categories: tuple[str, ...] = ('dog', 'cat', 'bird', 'car', 'ball')
    attributes: tuple[str, ...] = ('black', 'white', 'red', 'small', 'large')
    attribute_prob: float = 0.4
    relations: tuple[str, ...] = RELATIONS
    jitter_iou: tuple[float, float] = (0.9, 1.0)
    proposals_per_object: tuple[int, int] = (1, 3)
    distractors: tuple[int, int] = (0, 2)
    object_size: tuple[int, int] = (40, 120)
    max_object_iou: float = 0.0

    def __post_init__(self) -> None:
        width, height = self.image_size
        if width <= 0 or height <= 0:
            raise ValidationError(f'image_size must be positive, got {self.image_size}')
        _range('object_count', self.object_count, 0, float('inf'))
        _range('proposals_per_object', self.proposals_per_object, 0, float('inf'))
        _range('distractors', self.distractors, 0, float('inf'))
        _range('object_size', self.object_size, 1, min(width, height) - 1)
        _range('jitter_iou', self.jitter_iou, 0, 1)
        if self.jitter_iou[0] <= 0:
            raise ValidationError('jitter_iou targets must lie in (0, 1]')
        if not 0 <= self.attribute_prob <= 1:
            raise ValidationError(f'attribute_prob must lie in [0, 1], got {self.attribute_prob}')
        if not 0 <= self.max_object_iou < 1:
            raise ValidationError(f'max_object_iou must lie in [0, 1), got {self.max_object_iou}')
        if not self.categories:
            raise ValidationError('at least one category is required')
        if set(self.categories) & set(self.attributes):
            raise ValidationError('categories and attributes must be disjoint')
        if unknown := sorted(set(self.relations) - set(RELATIONS)):
            raise ValidationError(f'unknown relations {unknown}; supported: {", ".join(RELATIONS)}')

    @property
    def labels(self) -> frozenset[str]:
        return frozenset(self.categories) | frozenset(self.attributes)

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> SceneSpec:
        """Build a spec from its JSON form; missing keys keep their defaults."""
        known = {f.name for f in fields(cls)}
        if unknown := sorted(set(record) - known):
            raise ValidationError(f'unknown scene spec keys {unknown}')
        try:
            return cls(**{key: tuple(value) if isinstance(value, list) else value for key, value in record.items()})
        except TypeError as e:
            raise ValidationError(f'malformed scene spec: {e}') from e

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            record[f.name] = list(value) if isinstance(value, tuple) else value
        return record


def relation_holds(relation: str, a: BoundingBox, b: BoundingBox) -> bool:
    """Binary geometric relation between boxes of the same image."""
    if a.image is not b.image:
        return False
    match relation:
        case 'left-of':
            return a.x2 <= b.x1
        case 'right-of':
            return a.x1 >= b.x2
        case 'above':
            return a.y2 <= b.y1
        case 'below':
            return a.y1 >= b.y2
        case _:
            return False


@dataclass(frozen=True)
class SyntheticObject:
    index: int
    category: str
    attributes: frozenset[str]
    box: BoundingBox
    relations: tuple[tuple[str, int], ...] = ()

    @property
    def labels(self) -> frozenset[str]:
        return self.attributes | {self.category}


@dataclass(frozen=True, eq=False)
class GoldWorld:
    """Ground truth behind a synthetic scene.

    `referents[i]` is the object proposal i aligns with best (IOU > 0.5), None for distractors.
    """

    example_id: str
    objects: tuple[SyntheticObject, ...]
    proposal_iou: NDArray[np.float64]
    referents: tuple[int | None, ...]

    def relates(self, relation: str, subject: int, target: int) -> bool:
        return (relation, target) in self.objects[subject].relations

    def on(self, side: ImageSide | None) -> frozenset[int]:
        return frozenset(o.index for o in self.objects if side is None or o.box.image is side)


def _seed_parts(seed: int | Sequence[int]) -> tuple[int, ...]:
    return (int(seed),) if isinstance(seed, int | np.integer) else tuple(int(s) for s in seed)


def _raw_iou(a: NDArray[np.float64], b: NDArray[np.float64]) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return float(inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter))


def jitter_box(
    box: BoundingBox, target_iou: float, rng: np.random.Generator, image_size: tuple[int, int]
) -> BoundingBox:
    """A box whose IOU with `box` equals target_iou.

    The four corners move along a random direction scaled by the box size; the step length is solved with
    brentq. Directions that leave the image are redrawn.

    Raises:
        ValidationError: no direction found inside the image bounds.
    """
    if not 0 < target_iou <= 1:
        raise ValueError(f'target IOU must lie in (0, 1], got {target_iou}')
    if target_iou >= 1:
        return box
    base = np.asarray(box.coords)
    width, height = image_size
    size = np.asarray([box.x2 - box.x1, box.y2 - box.y1] * 2)
    for _ in range(_MAX_JITTER_TRIES):
        step = rng.uniform(-1.0, 1.0, size=4) * size
        limit = 8.0
        for lo, hi in ((0, 2), (1, 3)):
            # largest step before the box collapses
            shrink = step[lo] - step[hi]
            if shrink > 0:
                limit = min(limit, (base[hi] - base[lo]) / shrink)
        limit *= 1 - 1e-9

        def gap(s: float, step: NDArray[np.float64] = step) -> float:
            return _raw_iou(base, base + s * step) - target_iou

        if gap(limit) >= 0:
            continue
        s = brentq(gap, 0.0, limit, xtol=1e-12)
        coords = base + s * step
        if coords.min() < 0 or coords[2] > width or coords[3] > height:
            continue
        return BoundingBox.from_coords(coords.tolist(), box.image)
    raise ValidationError(f'cannot jitter {box.coords} to IOU {target_iou} inside a {width}x{height} image')


def _place(
    rng: np.random.Generator, spec: SceneSpec, side: ImageSide, avoid: Sequence[BoundingBox], max_iou: float
) -> BoundingBox:
    width, height = spec.image_size
    lo, hi = spec.object_size
    for _ in range(_MAX_PLACEMENT_TRIES):
        w, h = rng.uniform(lo, hi, size=2)
        x1 = rng.uniform(0, width - w)
        y1 = rng.uniform(0, height - h)
        box = BoundingBox(x1, y1, x1 + w, y1 + h, side)
        if not avoid or iou_matrix([box], avoid).max() <= max_iou:
            return box
    raise ValidationError(f'cannot place a box on the {side.value} image after {_MAX_PLACEMENT_TRIES} tries')


def generate_scene(
    spec: SceneSpec, seed: int | Sequence[int] = 0, example_id: str | None = None
) -> tuple[Scene, GoldWorld]:
    """Sample objects and jittered proposals for one two-image example.

    Args:
        spec (SceneSpec): scene parameters.
        seed (int | Sequence[int], optional): seed of the scene. Defaults to 0.
        example_id (str, optional): Defaults to `synth-<seed>`.

    Returns:
        tuple[Scene, GoldWorld]: proposals and the gold world they were drawn from.

    Raises:
        ValidationError: the spec cannot be satisfied within the image bounds.
    """
    parts = _seed_parts(seed)
    example_id = example_id or 'synth-' + '-'.join(map(str, parts))
    rng = np.random.default_rng(parts)

    drawn: list[tuple[str, frozenset[str], BoundingBox]] = []
    for side in ImageSide:
        boxes: list[BoundingBox] = []
        for _ in range(rng.integers(spec.object_count[0], spec.object_count[1] + 1)):
            boxes.append(_place(rng, spec, side, boxes, spec.max_object_iou))
        for box in boxes:
            category = spec.categories[rng.integers(len(spec.categories))]
            attributes = frozenset(a for a in spec.attributes if rng.random() < spec.attribute_prob)
            drawn.append((category, attributes, box))

    objects = tuple(
        SyntheticObject(
            index,
            category,
            attributes,
            box,
            tuple(
                (relation, target)
                for target, (_, _, other) in enumerate(drawn)
                if target != index
                for relation in spec.relations
                if relation_holds(relation, box, other)
            ),
        )
        for index, (category, attributes, box) in enumerate(drawn)
    )

    proposals: list[BoundingBox] = []
    for obj in objects:
        for _ in range(rng.integers(spec.proposals_per_object[0], spec.proposals_per_object[1] + 1)):
            target = rng.uniform(*spec.jitter_iou)
            proposals.append(jitter_box(obj.box, target, rng, spec.image_size))
    for side in ImageSide:
        gold = [o.box for o in objects if o.box.image is side]
        for _ in range(rng.integers(spec.distractors[0], spec.distractors[1] + 1)):
            proposals.append(_place(rng, spec, side, gold, ALIGN_IOU))

    order = rng.permutation(len(proposals))
    scene = Scene(example_id, tuple(proposals[i] for i in order))

    overlap = iou_matrix(scene.proposals, [o.box for o in objects])
    referents: list[int | None] = []
    for row in overlap:
        best = int(np.argmax(row)) if row.size else -1
        referents.append(best if best >= 0 and row[best] > ALIGN_IOU else None)
    logger.debug('generated %s: %d objects, %d proposals', example_id, len(objects), len(scene))
    return scene, GoldWorld(example_id, objects, overlap, tuple(referents))


class OracleProvider(GroundingProvider):
    """Grounding provider that reads the answer off the gold world.

    find scores a proposal by its IOU with the best matching object of the queried category, gated at the
    alignment threshold. filter, with-relation and project score crisp membership of the proposal's
    referent. With noise ε every score becomes (1 - ε)·score + ε·u, u a seeded uniform draw.

    Args:
        worlds (GoldWorld | Iterable[GoldWorld]): gold worlds keyed by their example id.
        noise (float, optional): ε in [0, 1]. Defaults to 0.0.
        seed (int | Sequence[int], optional): seed of the noise draws. Defaults to 0.
    """

    def __init__(
        self, worlds: GoldWorld | Iterable[GoldWorld], noise: float = 0.0, seed: int | Sequence[int] = 0
    ) -> None:
        if not 0 <= noise <= 1:
            raise ValueError(f'noise must lie in [0, 1], got {noise}')
        worlds = [worlds] if isinstance(worlds, GoldWorld) else list(worlds)
        self.worlds = {world.example_id: world for world in worlds}
        self.noise = noise
        self.seed = _seed_parts(seed)

    def _world(self, scene: Scene, node: int) -> GoldWorld:
        world = self.worlds.get(scene.example_id)
        if world is None:
            raise GroundingError(scene.example_id, node, 'no gold world')
        return world

    @staticmethod
    def _gated(world: GoldWorld, members: NDArray[np.bool_]) -> NDArray[np.float64]:
        if not members.any():
            return np.zeros(len(world.referents))
        best = world.proposal_iou[:, members].max(axis=1)
        return np.where(best > ALIGN_IOU, best, 0.0)

    @staticmethod
    def _membership(world: GoldWorld, members: NDArray[np.bool_]) -> NDArray[np.float64]:
        return np.asarray([ref is not None and bool(members[ref]) for ref in world.referents], dtype=np.float64)

    @staticmethod
    def _targets(world: GoldWorld, attention: BoxAttention) -> set[int]:
        pairs = zip(world.referents, attention.probs, strict=True)
        return {ref for ref, p in pairs if ref is not None and p > SELECTED_PROB}

    def clean_scores(self, world: GoldWorld, request: GroundingRequest) -> NDArray[np.float64]:
        """Noise-free scores."""
        term = request.utterance.text if request.utterance is not None else ''
        labelled = np.asarray([term in o.labels for o in world.objects], dtype=np.bool_)
        match request.kind:
            case LearnedKind.FIND:
                return self._gated(world, labelled)
            case LearnedKind.PROJECT_QUERY:
                return self._gated(world, np.ones(len(world.objects), dtype=np.bool_))
            case LearnedKind.FILTER:
                return self._membership(world, labelled)
            case LearnedKind.WITH_RELATION | LearnedKind.PROJECT:
                targets = self._targets(world, request.inputs[-1])
                related = np.asarray(
                    [any(world.relates(term, o.index, t) for t in targets) for o in world.objects], dtype=np.bool_
                )
                return self._membership(world, related)

    def scores(self, scene: Scene, request: GroundingRequest) -> NDArray[np.float64]:
        world = self._world(scene, request.node)
        clean = self.clean_scores(world, request)
        if self.noise == 0:
            return clean
        rng = np.random.default_rng(
            [
                *self.seed,
                zlib.crc32(scene.example_id.encode()),
                request.node,
                _KIND_INDEX[request.kind],
                _SIDE_INDEX[request.image],
            ]
        )
        return (1 - self.noise) * clean + self.noise * rng.random(len(scene))

    def count(self, scene: Scene, attention: BoxAttention, node: int, image: ImageSide | None = None) -> NumberValue:
        """Number of distinct objects behind the proposals attention selects."""
        return NumberValue.point(len(self._targets(self._world(scene, node), attention)))


class RecordingProvider(GroundingProvider):
    """Wraps a provider and keeps every answer so a run can be replayed from a groundings file.

    Scores of per-image macro runs are merged into one vector: each image's proposals keep the scores of
    the run restricted to that image.
    """

    def __init__(self, inner: GroundingProvider) -> None:
        self.inner = inner
        self._scores: dict[tuple[str, int, LearnedKind], NDArray[np.float64]] = {}
        self._numbers: dict[tuple[str, int], dict[ImageSide | None, NumberValue]] = {}
        self._lock = threading.Lock()

    def scores(self, scene: Scene, request: GroundingRequest) -> NDArray[np.float64]:
        out = np.asarray(self.inner.scores(scene, request), dtype=np.float64)
        key = (scene.example_id, request.node, request.kind)
        with self._lock:
            if request.image is None:
                stored = out.copy()
            else:
                previous = self._scores.get(key, np.zeros_like(out))
                stored = np.where(scene.image_mask(request.image) > 0, out, previous)
            self._scores[key] = stored
        return out

    def count(self, scene: Scene, attention: BoxAttention, node: int, image: ImageSide | None = None) -> NumberValue:
        number = self.inner.count(scene, attention, node, image)
        with self._lock:
            self._numbers.setdefault((scene.example_id, node), {})[image] = number
        return number

    def records(self, example_id: str | None = None) -> list[dict[str, Any]]:
        """Groundings file records, sorted by example id and node."""
        grouped: dict[tuple[str, int], dict[str, Any]] = {}
        for (eid, node, kind), scores in self._scores.items():
            record = grouped.setdefault((eid, node), {'id': eid, 'node': node})
            field_name = 'find_scores' if kind is LearnedKind.PROJECT_QUERY else 'scores'
            record[field_name] = [float(s) for s in scores]
        for (eid, node), numbers in self._numbers.items():
            record = grouped.setdefault((eid, node), {'id': eid, 'node': node})
            if None in numbers:
                number = numbers[None]
                record['number'] = {'mean': number.mean, 'var': number.var}
            else:
                record['numbers'] = {
                    side.value: {'mean': number.mean, 'var': number.var}
                    for side, number in sorted(numbers.items(), key=lambda item: _SIDE_INDEX[item[0]])
                    if side is not None
                }
        return [record for key, record in sorted(grouped.items()) if example_id is None or key[0] == example_id]


GoldValue = frozenset[int] | bool | int


@dataclass(frozen=True)
class GoldTrace:
    """Set-semantics value of every node, keyed by (node, image restriction)."""

    values: Mapping[tuple[int, ImageSide | None], GoldValue]
    denotation: bool | int


def evaluate_gold(program: TypedProgram, world: GoldWorld, max_count: int = DEFAULT_MAX_COUNT) -> GoldTrace:
    """Brute-force denotation of program over the gold world.

    Attention-valued nodes denote object sets, counts are exact cardinalities and comparisons clamp both
    numbers into {0..max_count}.

    Raises:
        ValueError: program uses division, which has no exact set semantics.
    """
    values: dict[tuple[int, ImageSide | None], GoldValue] = {}

    def clamp(n: int) -> int:
        return min(max(n, 0), max_count)

    def sets(*args: GoldValue) -> list[frozenset[int]]:
        assert all(isinstance(a, frozenset) for a in args)
        return [a for a in args if isinstance(a, frozenset)]

    def ev(node: int, side: ImageSide | None) -> GoldValue:
        module = program.module(node)
        call = program.program[node]
        term = call.utterance.text if call.utterance is not None else ''
        universe = world.on(side)
        value: GoldValue
        if module in MACROS:
            runs = [(ev(child, ImageSide.LEFT), ev(child, ImageSide.RIGHT)) for child in call.children]
            match module:
                case 'in-at-least-one-image':
                    value = bool(runs[0][0]) or bool(runs[0][1])
                case 'in-each-image':
                    value = bool(runs[0][0]) and bool(runs[0][1])
                case _:
                    (first_left, first_right), (second_left, second_right) = runs
                    value = (bool(first_left) and bool(second_right)) or (bool(first_right) and bool(second_left))
            values[node, side] = value
            return value

        args = [ev(child, side) for child in call.children]
        match module:
            case 'find':
                value = frozenset(o for o in universe if term in world.objects[o].labels)
            case 'filter':
                (s,) = sets(*args)
                value = frozenset(o for o in s if term in world.objects[o].labels)
            case 'with-relation':
                s1, s2 = sets(*args)
                value = frozenset(o for o in s1 if any(world.relates(term, o, t) for t in s2))
            case 'project':
                (s,) = sets(*args)
                value = frozenset(o for o in universe if any(world.relates(term, o, t) for t in s))
            case 'intersect':
                s1, s2 = sets(*args)
                value = s1 & s2
            case 'discard':
                s1, s2 = sets(*args)
                value = s1 - s2
            case 'in-left-image' | 'in-right-image':
                (s,) = sets(*args)
                keep = world.on(ImageSide.LEFT if module == 'in-left-image' else ImageSide.RIGHT)
                value = s & keep
            case 'count':
                value = len(sets(*args)[0])
            case 'exist':
                value = len(sets(*args)[0]) >= 1
            case 'and':
                value = bool(args[0]) and bool(args[1])
            case 'or':
                value = bool(args[0]) or bool(args[1])
            case 'sum' | 'difference':
                a, b = (int(x) for x in args)
                value = a + b if module == 'sum' else a - b
            case 'equal' | 'less' | 'greater' | 'less-equal' | 'greater-equal':
                a, b = (clamp(int(x)) for x in args)
                value = {
                    'equal': a == b,
                    'less': a < b,
                    'greater': a > b,
                    'less-equal': a <= b,
                    'greater-equal': a >= b,
                }[module]
            case _:
                raise ValueError(f'{module} has no set semantics')
        values[node, side] = value
        return value

    denotation = ev(program.program.root, None)
    assert not isinstance(denotation, frozenset)
    return GoldTrace(values, denotation)


class _Production(NamedTuple):
    name: str
    term: str | None
    args: tuple[ValueType, ...]


_B, _N, _P, _PROG = ValueType.BOOLEAN, ValueType.NUMBER, ValueType.BOX_ATTENTION, ValueType.PROGRAM
_PRODUCTIONS: dict[ValueType, tuple[_Production, ...]] = {
    _P: (
        _Production('find', 'category', ()),
        _Production('filter', 'attribute', (_P,)),
        _Production('with-relation', 'relation', (_P, _P)),
        _Production('project', 'relation', (_P,)),
        _Production('intersect', None, (_P, _P)),
        _Production('discard', None, (_P, _P)),
        _Production('in-left-image', None, (_P,)),
        _Production('in-right-image', None, (_P,)),
    ),
    _N: (
        _Production('count', None, (_P,)),
        _Production('sum', None, (_N, _N)),
        _Production('difference', None, (_N, _N)),
    ),
    _B: (
        _Production('exist', None, (_P,)),
        *(_Production(name, None, (_N, _N)) for name in ('equal', 'less', 'greater', 'less-equal', 'greater-equal')),
        _Production('and', None, (_B, _B)),
        _Production('or', None, (_B, _B)),
        _Production('in-at-least-one-image', None, (_PROG,)),
        _Production('in-each-image', None, (_PROG,)),
        _Production('in-one-other-image', None, (_PROG, _PROG)),
    ),
}
_MIN_SIZE = {_P: 1, _N: 2, _B: 2, _PROG: 2}


def _min_size(production: _Production) -> int:
    return 1 + sum(_MIN_SIZE[t] for t in production.args)


class _ProgramSampler:
    def __init__(self, rng: np.random.Generator, spec: SceneSpec) -> None:
        self.rng = rng
        self.terms = {
            'category': spec.categories,
            'attribute': spec.attributes or spec.categories,
            'relation': spec.relations,
        }

    def pick(self, options: Sequence[Any]) -> Any:
        return options[self.rng.integers(len(options))]

    def sample(self, vtype: ValueType, budget: int, in_macro: bool) -> tuple[str, int]:
        if vtype is _PROG:
            return self.sample(_B, budget, in_macro=True)
        options = [
            p
            for p in _PRODUCTIONS[vtype]
            if _min_size(p) <= budget
            and not (in_macro and _PROG in p.args)
            and (p.term is None or self.terms[p.term])
        ]
        production: _Production = self.pick(options)
        text = production.name
        if production.term is not None:
            text += f'[{self.pick(self.terms[production.term])}]'
        used = 1
        children: list[str] = []
        for position, arg in enumerate(production.args):
            reserve = sum(_MIN_SIZE[t] for t in production.args[position + 1 :])
            cap = budget - used - reserve
            child_budget = int(self.rng.integers(_MIN_SIZE[arg], cap + 1))
            child, size = self.sample(arg, child_budget, in_macro)
            children.append(child)
            used += size
        if children:
            text += '(' + ', '.join(children) + ')'
        return text, used


def generate_program(
    rng: np.random.Generator, spec: SceneSpec | None = None, max_modules: int = 13, root_type: ValueType | None = None
) -> Program:
    """Random well-typed visual program over the spec's vocabulary with at most max_modules nodes.

    Division is never drawn.
    """
    spec = spec or SceneSpec()
    if root_type is None:
        root_type = _B if rng.random() < 0.75 else _N
    if max_modules < _MIN_SIZE[root_type]:
        raise ValueError(f'max_modules={max_modules} is too small for a {root_type.value} program')
    text, _ = _ProgramSampler(rng, spec).sample(root_type, max_modules, in_macro=False)
    return parse(text)


def check_vocabulary(program: TypedProgram, spec: SceneSpec) -> None:
    """Reject programs the spec's worlds cannot answer.

    Raises:
        ValidationError: names the node and either the unknown term or a module without gold semantics.
    """
    for node in range(len(program)):
        module = program.module(node)
        if module in _NO_SET_SEMANTICS:
            raise ValidationError(f'node {node}: {module} has no gold set semantics')
        utterance = program.program[node].utterance
        if module not in LEARNED_MODULES or utterance is None:
            continue
        allowed = spec.relations if module in ('with-relation', 'project') else spec.labels
        if utterance.text not in allowed:
            raise ValidationError(f'node {node}: {module} term {utterance.text!r} is not in the scene vocabulary')


class SyntheticExample(NamedTuple):
    scene: Scene
    world: GoldWorld
    groundings: list[dict[str, Any]]
    annotations: list[dict[str, Any]]
    expected: bool | int


def _annotation_records(program: TypedProgram, world: GoldWorld, gold: GoldTrace) -> list[dict[str, Any]]:
    records: list[dict[str, Any]] = []
    for node in range(len(program)):
        module = program.module(node)
        if module not in LEARNED_MODULES:
            continue
        for side in ImageSide:
            value = gold.values.get((node, None), gold.values.get((node, side)))
            if value is None:
                continue
            assert isinstance(value, frozenset)
            boxes = [list(world.objects[o].box.coords) for o in sorted(value) if world.objects[o].box.image is side]
            records.append(
                {'id': world.example_id, 'node': node, 'module': module, 'image': side.value, 'boxes': boxes}
            )
    return records


def generate_example(
    program: TypedProgram,
    spec: SceneSpec | None = None,
    seed: int | Sequence[int] = 0,
    example_id: str | None = None,
    noise: float = 0.0,
    config: ExecutorConfig | None = None,
) -> SyntheticExample:
    """Everything the harness needs for one synthetic example.

    The scene comes from generate_scene, groundings from an oracle run recorded on that scene, annotations
    from the gold set of every learned node (one record per image), and the expected denotation from
    evaluate_gold.

    Raises:
        ValidationError: the program uses a term outside the spec vocabulary or a module without gold semantics.
    """
    spec = spec or SceneSpec()
    config = config or ExecutorConfig()
    check_vocabulary(program, spec)
    scene, world = generate_scene(spec, seed, example_id)
    gold = evaluate_gold(program, world, config.max_count)
    recorder = RecordingProvider(OracleProvider(world, noise, seed))
    Executor(recorder, config).execute(program, scene)
    return SyntheticExample(
        scene, world, recorder.records(), _annotation_records(program, world, gold), gold.denotation
    )
