from __future__ import annotations

from typing import TYPE_CHECKING, Any

import numpy as np
import pytest

from nmn_faith.executor import Executor, ExecutorConfig, GroundingProvider
from nmn_faith.faithfulness import VisualAnnotation
from nmn_faith.program import parse, typecheck
from nmn_faith.scene import BoundingBox, ImageSide, Scene
from nmn_faith.synth import OracleProvider, SceneSpec, generate_example

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping, Sequence

    from nmn_faith.algebra import NumberValue
    from nmn_faith.executor import ExecutionTrace, GroundingRequest
    from nmn_faith.program import TypedProgram
    from nmn_faith.scene import BoxAttention

SAME_COUNT = 'equal(count(find[dog]), count(filter[black](find[dog])))'


class StaticProvider(GroundingProvider):
    """Serves fixed scores per node, ignoring the scene."""

    def __init__(
        self, scores: Mapping[int, Sequence[float]], numbers: Mapping[int, NumberValue] | None = None
    ) -> None:
        self._scores = {node: np.asarray(values, dtype=np.float64) for node, values in scores.items()}
        self._numbers = dict(numbers or {})
        self.requests: list[GroundingRequest] = []

    def scores(self, scene: Scene, request: GroundingRequest) -> Any:
        self.requests.append(request)
        return self._scores[request.node]

    def count(self, scene: Scene, attention: BoxAttention, node: int, image: ImageSide | None = None) -> NumberValue:
        return self._numbers[node]


def left(*coords: float) -> BoundingBox:
    return BoundingBox(*coords, ImageSide.LEFT)


def right(*coords: float) -> BoundingBox:
    return BoundingBox(*coords, ImageSide.RIGHT)


def program(text: str) -> TypedProgram:
    return typecheck(parse(text))


def annotations_from_records(records: Iterable[Mapping[str, Any]]) -> list[VisualAnnotation]:
    return [
        VisualAnnotation(
            r['id'],
            r['node'],
            r['module'],
            tuple(BoundingBox.from_coords(c, r['image']) for c in r['boxes']),
            ImageSide(r['image']),
        )
        for r in records
    ]


class SyntheticRun:
    """Executed synthetic dataset: scenes, traces and annotations, keyed by example id."""

    def __init__(
        self,
        text: str,
        examples: int,
        spec: SceneSpec | None = None,
        noise: float = 0.0,
        config: ExecutorConfig | None = None,
    ) -> None:
        typed = program(text)
        self.scenes: dict[str, Scene] = {}
        self.traces: dict[str, ExecutionTrace] = {}
        self.annotations: list[VisualAnnotation] = []
        for index in range(examples):
            example = generate_example(typed, spec, seed=(7, index), example_id=f'ex-{index:03d}', config=config)
            provider = OracleProvider(example.world, noise, seed=(7, index))
            _, trace = Executor(provider, config).execute(typed, example.scene)
            self.scenes[example.scene.example_id] = example.scene
            self.traces[example.scene.example_id] = trace
            self.annotations.extend(annotations_from_records(example.annotations))

    def attentions(self) -> dict[tuple[str, int], BoxAttention]:
        out: dict[tuple[str, int], BoxAttention] = {}
        for example_id, trace in self.traces.items():
            for node in trace:
                if (attention := trace.box_attention(node)) is not None:
                    out[example_id, node] = attention
        return out


@pytest.fixture
def two_dog_scene() -> Scene:
    # two dogs on the left, one cat on the right
    return Scene('dogs', (left(0, 0, 10, 10), left(20, 0, 30, 10), right(0, 0, 10, 10)))


@pytest.fixture
def static_provider() -> Callable[..., StaticProvider]:
    return StaticProvider


@pytest.fixture
def synthetic_run() -> Callable[..., SyntheticRun]:
    return SyntheticRun
