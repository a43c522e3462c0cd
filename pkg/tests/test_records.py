from __future__ import annotations

import json

import numpy as np
import pytest
from conftest import SAME_COUNT, program

from nmn_faith.errors import ValidationError
from nmn_faith.executor import execute
from nmn_faith.records import (
    dumps_ndjson,
    load_attentions,
    load_groundings,
    load_programs,
    load_scenes,
    load_text_annotations,
    load_visual_annotations,
    scene_record,
    trace_record,
    write_atomic,
)
from nmn_faith.scene import ImageSide


def write_lines(path, *records) -> str:
    path.write_text(''.join((r if isinstance(r, str) else json.dumps(r)) + '\n' for r in records))
    return str(path)


class TestLoadPrograms:
    def test_valid(self, tmp_path):
        path = write_lines(
            tmp_path / 'programs.ndjson',
            {'id': 'b', 'utterance': 'same number of dogs', 'program': SAME_COUNT},
            '',
            {'id': 'a', 'program': 'exist(find[cat])'},
        )
        programs = load_programs(path)
        assert sorted(programs) == ['a', 'b']
        assert programs['a'].utterance is None
        assert len(programs['b'].program) == 6

    def test_utterance_weights(self, tmp_path):
        path = write_lines(
            tmp_path / 'programs.ndjson',
            {'id': 'a', 'program': 'exist(find[black dog])', 'utterance_weights': {'1': [0.25, 0.75]}},
        )
        attention = load_programs(path)['a'].program.program.nodes[1].utterance
        assert attention.weights == (0.25, 0.75)

    @pytest.mark.parametrize(
        ('line', 'message'),
        [
            ('{"id": "a", "program": "exist(find[cat]"}', 'example'),
            ('{"id": "a", "program": "exist(count(find[cat]))"}', 'node 0'),
            ('{"id": 3, "program": "exist(find[cat])"}', "'id'"),
            ('{"id": "a"', 'invalid JSON'),
            ('[1, 2]', 'JSON object'),
            ('{"id": "a", "program": "exist(find[cat])", "utterance_weights": {"5": [1]}}', 'unknown node'),
        ],
    )
    def test_invalid_reports_location(self, tmp_path, line, message):
        path = write_lines(tmp_path / 'programs.ndjson', {'id': 'ok', 'program': 'exist(find[cat])'}, line)
        with pytest.raises(ValidationError, match=message) as info:
            load_programs(path)
        assert info.value.source == path
        assert info.value.line == 2
        assert str(info.value).startswith(f'{path}:2: ')

    def test_duplicate_id(self, tmp_path):
        record = {'id': 'a', 'program': 'exist(find[cat])'}
        with pytest.raises(ValidationError, match='duplicate'):
            load_programs(write_lines(tmp_path / 'programs.ndjson', record, record))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError, match='cannot open'):
            load_programs(tmp_path / 'absent.ndjson')


class TestLoadScenes:
    def test_orders_by_idx(self, tmp_path, two_dog_scene):
        record = scene_record(two_dog_scene)
        record['proposals'].reverse()
        scenes = load_scenes(write_lines(tmp_path / 'scenes.ndjson', record))
        assert scenes['dogs'] == two_dog_scene

    @pytest.mark.parametrize(
        'proposals',
        [
            [{'idx': 1, 'image': 'left', 'box': [0, 0, 1, 1]}],
            [{'idx': 0, 'image': 'top', 'box': [0, 0, 1, 1]}],
            [{'idx': 0, 'image': 'left', 'box': [5, 0, 1, 1]}],
            [{'idx': 0, 'image': 'left', 'box': [0, 0, 1]}],
            [{'idx': 0, 'image': 'left', 'box': [0, 0, 1, 1]}, {'idx': 0, 'image': 'left', 'box': [0, 0, 2, 2]}],
        ],
    )
    def test_invalid(self, tmp_path, proposals):
        with pytest.raises(ValidationError):
            load_scenes(write_lines(tmp_path / 'scenes.ndjson', {'id': 'x', 'proposals': proposals}))


class TestLoadGroundings:
    def test_scores_and_numbers(self, tmp_path):
        provider = load_groundings(
            write_lines(
                tmp_path / 'groundings.ndjson',
                {'id': 'x', 'node': 2, 'scores': [0.1, 0.9]},
                {'id': 'x', 'node': 1, 'number': {'mean': 2, 'var': 0.5}},
                {'id': 'x', 'node': 4, 'numbers': {'left': {'mean': 1, 'var': 0}, 'right': {'mean': 3, 'var': 0}}},
            )
        )
        np.testing.assert_array_equal(provider.entries['x', 2].scores, [0.1, 0.9])
        assert provider.entries['x', 1].numbers[None].mean == 2.0
        assert provider.entries['x', 4].numbers[ImageSide.RIGHT].mean == 3.0

    @pytest.mark.parametrize(
        'record',
        [
            {'id': 'x', 'node': 2, 'scores': [0.1, 1.2]},
            {'id': 'x', 'node': 2, 'scores': [0.1, True]},
            {'id': 'x', 'node': -1, 'scores': [0.1]},
            {'id': 'x', 'node': 2},
            {'id': 'x', 'node': 2, 'numbers': {'top': {'mean': 1, 'var': 0}}},
        ],
    )
    def test_invalid(self, tmp_path, record):
        with pytest.raises(ValidationError):
            load_groundings(write_lines(tmp_path / 'groundings.ndjson', record))


class TestLoadAnnotations:
    def test_visual(self, tmp_path):
        annotations = load_visual_annotations(
            write_lines(
                tmp_path / 'annotations.ndjson',
                {'id': 'x', 'node': 2, 'module': 'find', 'image': 'left', 'boxes': [[0, 0, 10, 10]]},
                {'id': 'x', 'node': 2, 'module': 'find', 'image': 'right', 'boxes': []},
            )
        )
        assert [a.image for a in annotations] == [ImageSide.LEFT, ImageSide.RIGHT]
        assert annotations[0].boxes[0].image is ImageSide.LEFT

    def test_visual_boxes_need_an_image(self, tmp_path):
        record = {'id': 'x', 'node': 2, 'module': 'find', 'boxes': [[0, 0, 10, 10]]}
        with pytest.raises(ValidationError, match='image'):
            load_visual_annotations(write_lines(tmp_path / 'annotations.ndjson', record))

    def test_empty_file(self, tmp_path):
        with pytest.raises(ValidationError, match='no annotations'):
            load_visual_annotations(write_lines(tmp_path / 'annotations.ndjson', ''))

    def test_text(self, tmp_path):
        annotations = load_text_annotations(
            write_lines(
                tmp_path / 'text.ndjson',
                {'id': 'q', 'node': 0, 'module': 'find', 'spans': [[1, 2]], 'token_dist': [0, 0.5, 0.5]},
            )
        )
        assert annotations[0].spans == ((1, 2),)

    @pytest.mark.parametrize(
        'record',
        [
            {'id': 'q', 'node': 0, 'module': 'find', 'spans': []},
            {'id': 'q', 'node': 0, 'module': 'find', 'spans': [[2, 1]]},
            {'id': 'q', 'node': 0, 'module': 'find', 'spans': [[1, 3]], 'token_dist': [0, 0.5, 0.5]},
            {'id': 'q', 'node': 0, 'module': 'find', 'spans': [[0, 0]], 'token_dist': [-0.5, 1.5]},
        ],
    )
    def test_text_invalid(self, tmp_path, record):
        with pytest.raises(ValidationError):
            load_text_annotations(write_lines(tmp_path / 'text.ndjson', record))


class TestTraces:
    def test_attentions_from_trace(self, tmp_path, two_dog_scene, static_provider):
        typed = program(SAME_COUNT)
        provider = static_provider({2: [0.9, 0.8, 0.1], 4: [0.9, 0.8, 0.1], 5: [0.2, 0.7, 0.0]})
        _, trace = execute(typed, two_dog_scene, provider)
        path = tmp_path / 'traces.ndjson'
        path.write_text(dumps_ndjson([trace_record('dogs', trace)]))
        attentions = load_attentions(path)
        assert sorted(node for _, node in attentions) == [2, 4, 5]
        np.testing.assert_allclose(attentions['dogs', 5].probs, trace.box_attention(5).probs)

    def test_attentions_from_module_outputs(self, tmp_path):
        path = write_lines(tmp_path / 'outputs.ndjson', {'id': 'x', 'node': 3, 'probs': [0.5, 0.25]})
        np.testing.assert_array_equal(load_attentions(path)['x', 3].probs, [0.5, 0.25])

    @pytest.mark.parametrize(
        'record',
        [
            {'id': 'x', 'node': 2, 'scores': [0.1, 0.9]},
            {'id': 'x', 'node': 1, 'number': {'mean': 2, 'var': 0.5}},
            {'id': 'x', 'node': 2, 'probs': [0.1, 0.9], 'scores': [0.1, 0.9]},
        ],
    )
    def test_groundings_are_not_module_outputs(self, tmp_path, record):
        path = write_lines(tmp_path / 'groundings.ndjson', record)
        with pytest.raises(ValidationError, match='groundings record') as info:
            load_attentions(path)
        assert info.value.line == 1

    def test_module_output_needs_probs(self, tmp_path):
        with pytest.raises(ValidationError, match='probs'):
            load_attentions(write_lines(tmp_path / 'outputs.ndjson', {'id': 'x', 'node': 3}))


class TestWriteAtomic:
    def test_creates_parents_and_leaves_no_temporaries(self, tmp_path):
        target = tmp_path / 'nested' / 'out.json'
        write_atomic(target, 'first\n')
        write_atomic(target, 'second\n')
        assert target.read_text() == 'second\n'
        assert [p.name for p in target.parent.iterdir()] == ['out.json']
