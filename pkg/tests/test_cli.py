from __future__ import annotations

import json

import pytest
from conftest import SAME_COUNT

from nmn_faith import __version__
from nmn_faith.cli import CommandResult, RunConfig, build_parser, main
from nmn_faith.errors import ValidationError

PROGRAMS = [
    {'id': 'ex-a', 'utterance': 'there are as many dogs as black dogs', 'program': SAME_COUNT},
    {'id': 'ex-b', 'program': 'in-at-least-one-image(exist(with-relation[left-of](find[dog], find[cat])))'},
    {'id': 'ex-c', 'program': 'greater(count(find[cat]), count(find[dog]))'},
]


def write_ndjson(path, records) -> str:
    path.write_text(''.join(json.dumps(r) + '\n' for r in records))
    return str(path)


def read_ndjson(path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.fixture
def bundle(tmp_path):
    """Synthetic bundle for PROGRAMS under tmp_path/bundle."""
    programs = write_ndjson(tmp_path / 'programs.ndjson', PROGRAMS)
    out_dir = tmp_path / 'bundle'
    assert main(['synth', '--programs', programs, '--out-dir', str(out_dir), '--seed', '3']) == 0
    return programs, out_dir


class TestRunConfig:
    def test_defaults_round_trip_through_parser(self):
        args = build_parser().parse_args(['perm-test', '--a', 'a.json', '--b', 'b.json'])
        assert RunConfig.from_args(args) == RunConfig()

    def test_metadata_is_plain(self):
        metadata = RunConfig().metadata()
        assert metadata['aggregation'] == 'examplewise'
        assert metadata['count_strategy'] == 'sum'
        json.dumps(metadata)

    @pytest.mark.parametrize(
        'kwargs',
        [{'iou_threshold': 1.5}, {'neg_iou_threshold': 0.7}, {'trials': 0}, {'sigma_sq': -1.0}, {'workers': 0}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            RunConfig(**kwargs)


class TestCommandResult:
    def test_exit_codes(self):
        assert CommandResult.success().exit_code == 0
        assert CommandResult.invalid('bad').exit_code == 2
        assert CommandResult.internal('boom').exit_code == 3

    def test_failure_writes_nothing(self, tmp_path, capsys):
        CommandResult.invalid('bad input').commit()
        assert 'error: bad input' in capsys.readouterr().err
        assert list(tmp_path.iterdir()) == []


class TestPipeline:
    def test_synth_writes_bundle(self, bundle):
        _, out_dir = bundle
        assert sorted(p.name for p in out_dir.iterdir()) == [
            'annotations.ndjson',
            'expected.ndjson',
            'groundings.ndjson',
            'scenes.ndjson',
        ]
        assert [r['id'] for r in read_ndjson(out_dir / 'scenes.ndjson')] == ['ex-a', 'ex-b', 'ex-c']

    def test_exec_then_eval_reaches_upper_bound(self, tmp_path, bundle):
        programs, out_dir = bundle
        traces = tmp_path / 'traces.ndjson'
        argv = ['exec', '--programs', programs, '--scenes', str(out_dir / 'scenes.ndjson')]
        argv += ['--groundings', str(out_dir / 'groundings.ndjson'), '--out', str(traces)]
        assert main(argv) == 0

        records = read_ndjson(traces)
        assert [r['id'] for r in records] == ['ex-a', 'ex-b', 'ex-c']
        assert all('truth' in r['denotation'] for r in records)

        report_path = tmp_path / 'report.json'
        table_path = tmp_path / 'table.txt'
        argv = ['eval-visual', '--outputs', str(traces), '--annotations', str(out_dir / 'annotations.ndjson')]
        argv += ['--scenes', str(out_dir / 'scenes.ndjson'), '--out', str(report_path), '--table', str(table_path)]
        assert main([*argv, '--upper-bound']) == 0

        report = json.loads(report_path.read_text())
        assert report['overall']['f1'] == pytest.approx(report['upper_bound']['overall']['f1'], abs=1e-9)
        assert report['metadata']['iou_threshold'] == 0.5
        assert 'upper bound' in table_path.read_text()

    def test_perm_test_between_reports(self, tmp_path, bundle, capsys):
        programs, out_dir = bundle
        traces = tmp_path / 'traces.ndjson'
        scenes = str(out_dir / 'scenes.ndjson')
        argv = ['exec', '--programs', programs, '--scenes', scenes]
        assert main([*argv, '--groundings', str(out_dir / 'groundings.ndjson'), '--out', str(traces)]) == 0

        reports = []
        for name, threshold in (('strict', '0.9'), ('loose', '0.5')):
            path = tmp_path / f'{name}.json'
            argv = ['eval-visual', '--outputs', str(traces), '--annotations', str(out_dir / 'annotations.ndjson')]
            argv += ['--scenes', scenes, '--out', str(path), '--iou-threshold', threshold]
            assert main(argv) == 0
            reports.append(str(path))
        capsys.readouterr()

        out = tmp_path / 'perm.json'
        argv = ['perm-test', '--a', reports[0], '--b', reports[1], '--trials', '2000', '--out', str(out)]
        assert main(argv) == 0
        result = json.loads(out.read_text())
        assert 0 <= result['p_value'] <= 1
        assert result['examples'] == 3
        assert result['trials'] == 2000
        assert json.loads(capsys.readouterr().out) == result

    def test_eval_visual_executes_groundings(self, tmp_path, bundle):
        programs, out_dir = bundle
        report_path = tmp_path / 'report.json'
        argv = ['eval-visual', '--outputs', str(out_dir / 'groundings.ndjson')]
        argv += ['--annotations', str(out_dir / 'annotations.ndjson'), '--scenes', str(out_dir / 'scenes.ndjson')]
        argv += ['--out', str(report_path), '--upper-bound']
        assert main([*argv, '--programs', programs]) == 0
        report = json.loads(report_path.read_text())
        assert report['overall']['f1'] == pytest.approx(report['upper_bound']['overall']['f1'], abs=1e-9)

    def test_eval_visual_rejects_raw_groundings(self, tmp_path, bundle, capsys):
        _, out_dir = bundle
        report_path = tmp_path / 'report.json'
        argv = ['eval-visual', '--outputs', str(out_dir / 'groundings.ndjson')]
        argv += ['--annotations', str(out_dir / 'annotations.ndjson'), '--scenes', str(out_dir / 'scenes.ndjson')]
        assert main([*argv, '--out', str(report_path)]) == 2
        assert 'groundings record' in capsys.readouterr().err
        assert not report_path.exists()

    def test_synth_and_exec_are_reproducible(self, tmp_path, bundle):
        programs, out_dir = bundle
        again = tmp_path / 'again'
        assert main(['synth', '--programs', programs, '--out-dir', str(again), '--seed', '3']) == 0
        for path in out_dir.iterdir():
            assert (again / path.name).read_bytes() == path.read_bytes()

        argv = ['exec', '--programs', programs, '--scenes', str(out_dir / 'scenes.ndjson')]
        argv += ['--groundings', str(out_dir / 'groundings.ndjson')]
        outputs = []
        for name, workers in (('first', '1'), ('second', '1'), ('pooled', '4')):
            path = tmp_path / f'{name}.ndjson'
            assert main([*argv, '--out', str(path), '--workers', workers]) == 0
            outputs.append(path.read_bytes())
        assert outputs[0] == outputs[1] == outputs[2]


class TestFailures:
    def test_missing_grounding(self, tmp_path, bundle, capsys):
        programs, out_dir = bundle
        groundings = read_ndjson(out_dir / 'groundings.ndjson')
        dropped = next(r for r in groundings if r['id'] == 'ex-c' and 'scores' in r)
        kept = write_ndjson(tmp_path / 'partial.ndjson', [r for r in groundings if r is not dropped])
        traces = tmp_path / 'traces.ndjson'
        argv = ['exec', '--programs', programs, '--scenes', str(out_dir / 'scenes.ndjson')]
        assert main([*argv, '--groundings', kept, '--out', str(traces)]) == 2
        err = capsys.readouterr().err
        assert f"'ex-c', node {dropped['node']}" in err
        assert not traces.exists()

    def test_malformed_programs(self, tmp_path, capsys):
        programs = tmp_path / 'programs.ndjson'
        programs.write_text('{"id": "x", "program": "exist(find[dog]"}\n')
        assert main(['synth', '--programs', str(programs), '--out-dir', str(tmp_path / 'out')]) == 2
        assert f'{programs}:1' in capsys.readouterr().err
        assert not (tmp_path / 'out').exists()

    def test_attention_length_mismatch(self, tmp_path, bundle, capsys):
        _, out_dir = bundle
        sizes = {r['id']: len(r['proposals']) for r in read_ndjson(out_dir / 'scenes.ndjson')}
        nodes = {(r['id'], r['node']) for r in read_ndjson(out_dir / 'annotations.ndjson')}
        outputs = write_ndjson(
            tmp_path / 'outputs.ndjson',
            [{'id': i, 'node': n, 'probs': [0.5] * (sizes[i] + (i == 'ex-b'))} for i, n in sorted(nodes)],
        )
        report_path = tmp_path / 'report.json'
        argv = ['eval-visual', '--outputs', outputs, '--annotations', str(out_dir / 'annotations.ndjson')]
        assert main([*argv, '--scenes', str(out_dir / 'scenes.ndjson'), '--out', str(report_path)]) == 2
        assert f"of example 'ex-b' attends over {sizes['ex-b'] + 1} proposals" in capsys.readouterr().err
        assert not report_path.exists()

    def test_synth_rejects_division(self, tmp_path, capsys):
        programs = write_ndjson(
            tmp_path / 'programs.ndjson',
            [{'id': 'x', 'program': 'greater(division(count(find[dog]), count(find[cat])), count(find[cat]))'}],
        )
        assert main(['synth', '--programs', programs, '--out-dir', str(tmp_path / 'out')]) == 2
        assert 'division has no gold set semantics' in capsys.readouterr().err
        assert not (tmp_path / 'out').exists()

    def test_invalid_config(self, tmp_path, capsys):
        argv = ['perm-test', '--a', 'a.json', '--b', 'b.json', '--iou-threshold', '2']
        assert main(argv) == 2
        assert 'iou_threshold' in capsys.readouterr().err

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args(['--version'])
        assert info.value.code == 0
        assert __version__ in capsys.readouterr().out


class TestEvalText:
    def test_reports_cross_entropy(self, tmp_path, capsys):
        annotations = write_ndjson(
            tmp_path / 'text.ndjson',
            [
                {'id': 'q1', 'node': 1, 'module': 'find', 'spans': [[0, 1]], 'token_dist': [0.25, 0.25, 0.5]},
                {'id': 'q1', 'node': 2, 'module': 'filter', 'spans': [[2, 2]]},
            ],
        )
        outputs = write_ndjson(tmp_path / 'outputs.ndjson', [{'id': 'q1', 'node': 2, 'token_dist': [0.5, 0, 0.5]}])
        out = tmp_path / 'text_report.json'
        assert main(['eval-text', '--annotations', annotations, '--outputs', outputs, '--out', str(out)]) == 0
        report = json.loads(out.read_text())
        assert report['modules']['find']['cross_entropy'] == pytest.approx(0.6931471805599453)
        assert report['modules']['filter']['cross_entropy'] == pytest.approx(0.6931471805599453)
        assert 'filter' in capsys.readouterr().out

    def test_missing_distribution(self, tmp_path):
        annotations = write_ndjson(
            tmp_path / 'text.ndjson', [{'id': 'q1', 'node': 1, 'module': 'find', 'spans': [[0, 1]]}]
        )
        assert main(['eval-text', '--annotations', annotations, '--out', str(tmp_path / 'r.json')]) == 2
