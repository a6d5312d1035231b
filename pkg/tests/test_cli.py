"""Tests for the racestack command line"""

import json

import pytest

from start_racestack import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_parser, main


@pytest.fixture
def oval(tmp_path):
    assert main(['make-track', 'oval', str(tmp_path / 'oval'), '--resolution', '0.1']) == EXIT_OK
    return tmp_path / 'oval'


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_run_then_plot(oval, tmp_path):
    out = tmp_path / 'run'
    code = main(['run', str(oval / 'oval.json'), '--duration', '0.5', '--seed', '3',
                 '--output', str(out)])
    assert code == EXIT_OK
    summary = json.loads((out / 'summary.json').read_text())
    assert summary['seed'] == 3 and summary['steps'] == 50

    svg = tmp_path / 'oval.svg'
    code = main(['plot', str(out / 'episode.csv'), str(oval / 'oval.yaml'), str(svg),
                 '--lap-line', '0', '-1.5', '0', '-3.5'])
    assert code == EXIT_OK
    assert svg.read_text().lstrip().startswith('<?xml')


def test_invalid_scenario_exits_with_config_code(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'duration': -1}))
    assert main(['run', str(path)]) == EXIT_CONFIG
    assert main(['run', str(tmp_path / 'missing.json')]) == EXIT_CONFIG


def test_missing_map_exits_with_config_code(tmp_path):
    assert main(['plot', 'episode.csv', str(tmp_path / 'nope.yaml'),
                 str(tmp_path / 'out.svg')]) == EXIT_CONFIG


def test_missing_log_exits_with_runtime_code(oval, tmp_path):
    assert main(['plot', str(tmp_path / 'episode.csv'), str(oval / 'oval.yaml'),
                 str(tmp_path / 'out.svg')]) == EXIT_RUNTIME


def test_rbf_train_rejects_unknown_keys(tmp_path):
    path = tmp_path / 'rbf.json'
    path.write_text(json.dumps({'lattice': {'grid': 3}}))
    assert main(['rbf-train', str(path)]) == EXIT_CONFIG


def test_unsolvable_lattice_exits_with_runtime_code(tmp_path):
    path = tmp_path / 'rbf.json'
    path.write_text(json.dumps({'lattice': {'x_range': [-3.0, -1.0], 'x_count': 3,
                                            'y_count': 3, 'heading_count': 1}}))
    assert main(['rbf-train', str(path), '--output', str(tmp_path / 'out')]) == EXIT_RUNTIME
