from __future__ import annotations

from nmn_faith import (
    AggregationScheme,
    BoundingBox,
    ImageSide,
    SceneSpec,
    VisualAnnotation,
    aggregate,
    execute,
    generate_example,
    paired_scores,
    parse,
    permutation_test,
    score_instances,
    typecheck,
    upper_bound,
)
from nmn_faith.faithfulness import render_table
from nmn_faith.synth import OracleProvider

PROGRAM = 'in-at-least-one-image(exist(with-relation[left-of](find[dog], filter[black](find[cat]))))'
EXAMPLES = 100
NOISE_LEVELS = (0.0, 0.3)


def main() -> None:
    program = typecheck(parse(PROGRAM))
    spec = SceneSpec(jitter_iou=(0.8, 1.0))
    examples = [generate_example(program, spec, seed=(1, i), example_id=f'ex-{i:03d}') for i in range(EXAMPLES)]
    scenes = {e.scene.example_id: e.scene for e in examples}
    annotations = [
        VisualAnnotation(
            r['id'],
            r['node'],
            r['module'],
            tuple(BoundingBox.from_coords(c, r['image']) for c in r['boxes']),
            ImageSide(r['image']),
        )
        for e in examples
        for r in e.annotations
    ]

    reports = []
    for noise in NOISE_LEVELS:
        provider = OracleProvider([e.world for e in examples], noise, seed=1)
        attentions = {}
        for example in examples:
            _, trace = execute(program, example.scene, provider)
            for node in trace:
                if (attention := trace.box_attention(node)) is not None:
                    attentions[example.scene.example_id, node] = attention
        reports.append((f'noise {noise}', aggregate(score_instances(annotations, attentions, scenes))))
    reports.append(('upper bound', upper_bound(scenes, annotations, scheme=AggregationScheme.EXAMPLEWISE)))
    print(render_table(reports))

    _, clean, noisy = paired_scores(reports[0][1], reports[1][1])
    result = permutation_test(clean, noisy, n_trials=20_000, seed=0)
    print(f'clean vs noisy: observed {result.observed:+.3f}, p = {result.p_value:.4f}')


if __name__ == '__main__':
    main()
