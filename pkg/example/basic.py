from __future__ import annotations

import numpy as np

from nmn_faith import (
    BoundingBox,
    BoxAttention,
    GroundingProvider,
    ImageSide,
    NumberValue,
    Scene,
    VisualAnnotation,
    aggregate,
    execute,
    parse,
    score_instances,
    typecheck,
)
from nmn_faith.executor import GroundingRequest

# two dogs on the left, one of them black; a cat on the right
SCENE = Scene(
    'dogs',
    (
        BoundingBox(10, 20, 110, 120, ImageSide.LEFT),
        BoundingBox(200, 40, 300, 140, ImageSide.LEFT),
        BoundingBox(50, 50, 150, 150, ImageSide.RIGHT),
    ),
)
KEYWORD_SCORES = {
    'dog': (0.95, 0.9, 0.05),
    'black': (0.1, 0.85, 0.3),
    'cat': (0.02, 0.05, 0.9),
}


class KeywordProvider(GroundingProvider):
    """Scores proposals from a keyword table instead of a trained model."""

    def scores(self, scene: Scene, request: GroundingRequest) -> np.ndarray:
        assert request.utterance is not None
        return np.asarray(KEYWORD_SCORES[request.utterance.text])

    def count(self, scene: Scene, attention: BoxAttention, node: int, image: ImageSide | None = None) -> NumberValue:
        raise NotImplementedError


def main() -> None:
    program = typecheck(parse('equal(count(find[dog]), count(filter[black](find[dog])))'))
    denotation, trace = execute(program, SCENE, KeywordProvider())
    print(f'P(true) = {denotation.value:.3f}')
    for node in trace:
        print(f'  node {node} {program.module(node):<8} {trace[node]}')

    annotations = [
        VisualAnnotation('dogs', 2, 'find', SCENE.proposals[:2], ImageSide.LEFT),
        VisualAnnotation('dogs', 4, 'filter', SCENE.proposals[1:2], ImageSide.LEFT),
    ]
    attentions = {('dogs', node): attention for node in trace if (attention := trace.box_attention(node)) is not None}
    report = aggregate(score_instances(annotations, attentions, {'dogs': SCENE}))
    print(report.to_table())


if __name__ == '__main__':
    main()
