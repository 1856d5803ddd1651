import asyncio
import concurrent.futures
import copy
import csv
import importlib.util
import json
import os

import pytest

from config import parse_config_object
from pipeline import EXIT_ERROR, EXIT_NEGATIVE, EXIT_OK, PipelineRunner


# Translation V(x) = (cos 2 pi x1, sin 2 pi x1) / 2 turns the unit ball with
# x1, so Gamma_1 = -2 pi J is constant and transport is exact up to RK4 error.
TORUS_RANDERS = {
    'chart': {'type': 'torus', 'periods': [1.0, 1.0], 'resolution': [16, 16]},
    'metric': {'family': 'torus_randers',
               'V': ['cos(2*pi*x1)', 'sin(2*pi*x1)']},
    'quadrature': {'directions': 512, 'radial_nodes': 8},
    'solver': {'separation_restarts': 5, 'validation_samples': 100,
               'scheme': 'spectral'},
    'transport': {'random_curves': 4, 'vectors_per_curve': 5, 'interpolation': 'cubic',
                  'holonomy_loops': [{'points': [[0, 0], [1, 0]]}]},
}


def _config(tmp_path, task, changes=None, base=TORUS_RANDERS):
    obj = copy.deepcopy(base)
    obj.update(changes or {})
    obj['task'] = task
    obj['output'] = {'directory': str(tmp_path)}
    return parse_config_object(obj)


def _run(config, executor=None):
    return asyncio.run(PipelineRunner(config, executor).run())


def _report(tmp_path, task):
    with open(os.path.join(str(tmp_path), f'{task}.json'), encoding='utf-8') as report:
        return json.load(report)


def test_validate_task(tmp_path):
    assert _run(_config(tmp_path, 'validate')) == EXIT_OK
    report = _report(tmp_path, 'validate')
    assert report['status'] == 'ok'
    assert report['results']['valid']
    assert report['results']['field']['node_count'] == 256
    assert report['results']['params']['directions'] == 512
    assert os.path.exists(os.path.join(str(tmp_path), 'validate.meta.json'))


def test_invalid_field_is_a_negative_result(tmp_path):
    config = _config(tmp_path, 'validate',
                     {'metric': {'family': 'randers', 'b': [1.2, 0.0]}})
    assert _run(config) == EXIT_NEGATIVE
    results = _report(tmp_path, 'validate')['results']
    assert not results['valid']
    assert results['failure']['type'] == 'FieldValidationError'
    assert len(results['failure']['x']) == 2


def test_bl_task_writes_frames(tmp_path):
    assert _run(_config(tmp_path, 'bl')) == EXIT_OK
    with open(os.path.join(str(tmp_path), 'frames.csv'), newline='',
              encoding='utf-8') as frames:
        rows = list(csv.reader(frames))
    assert rows[0] == ['x1', 'x2', 'row', 'col', 'value']
    assert len(rows) == 1 + 256 * 4


def test_iso_dim_task(tmp_path):
    config = _config(tmp_path, 'iso-dim',
                     {'metric': {'family': 'randers', 'b': [0.5, 0.0]}})
    assert _run(config) == EXIT_OK
    results = _report(tmp_path, 'iso-dim')['results']
    assert results['isotropy']['isotropy_dim'] == 0
    assert results['isotropy']['m'] == 1
    assert len(results['anchors_chart']) == 1


def test_monochromacy_task(tmp_path):
    changes = {'chart': {'type': 'torus', 'periods': [1.0, 1.0], 'resolution': 4}}
    assert _run(_config(tmp_path / 'mono', 'monochromacy', changes)) == EXIT_OK
    assert _report(tmp_path / 'mono', 'monochromacy')['results']['verdict'] == \
        'monochromatic'

    changes['metric'] = {'family': 'randers',
                         'b': ['0.3 + 0.2*sin(2*pi*x1)', 0.0]}
    assert _run(_config(tmp_path / 'varying', 'monochromacy', changes)) == EXIT_NEGATIVE
    report = _report(tmp_path / 'varying', 'monochromacy')
    assert report['status'] == 'negative'
    assert report['results']['verdict'] == 'not monochromatic'


def test_synthesize_task(tmp_path):
    assert _run(_config(tmp_path, 'synthesize')) == EXIT_OK
    summary = _report(tmp_path, 'synthesize')['results']['isomorphism_field']
    assert summary['anchor_residual'] <= 1e-9
    assert summary['max_abs_gamma'] == pytest.approx(2 * 3.141592653589793, rel=1e-6)

    with open(os.path.join(str(tmp_path), 'christoffels.csv'), newline='',
              encoding='utf-8') as table:
        rows = list(csv.reader(table))
    assert rows[0] == ['x1', 'x2', 'i', 'j', 's', 'gamma']
    assert len(rows) == 1 + 256 * 8
    with open(os.path.join(str(tmp_path), 'christoffels.json'), encoding='utf-8') as meta:
        assert json.load(meta)['scheme'] == 'spectral'


def test_synthesis_does_not_depend_on_threads(tmp_path):
    assert _run(_config(tmp_path / 'serial', 'synthesize')) == EXIT_OK
    with concurrent.futures.ThreadPoolExecutor(max_workers=3) as executor:
        assert _run(_config(tmp_path / 'threaded', 'synthesize'), executor) == EXIT_OK

    for name in ('synthesize.json', 'christoffels.csv'):
        with open(os.path.join(str(tmp_path / 'serial'), name), 'rb') as a, \
                open(os.path.join(str(tmp_path / 'threaded'), name), 'rb') as b:
            assert a.read() == b.read(), name


def test_verify_task(tmp_path):
    assert _run(_config(tmp_path, 'verify')) == EXIT_OK
    results = _report(tmp_path, 'verify')['results']
    assert results['verification']['passed']
    assert results['verification']['max_error'] <= 1e-5
    assert len(results['verification']['per_curve']) == 4
    assert results['holonomy']['passed']


def test_verify_detects_an_injected_fault(tmp_path):
    transport = dict(TORUS_RANDERS['transport'],
                     fault={'i': 1, 'j': 1, 's': 1, 'delta': 0.5})
    assert _run(_config(tmp_path, 'verify', {'transport': transport})) == EXIT_NEGATIVE
    report = _report(tmp_path, 'verify')
    assert report['status'] == 'negative'
    assert report['results']['verification']['max_error'] > 1e-3


def test_transport_task(tmp_path):
    transport = {'curves': [{'points': [[0.0, 0.5], [0.25, 0.5]]}],
                 'vectors_per_curve': 3}
    assert _run(_config(tmp_path, 'transport', {'transport': transport})) == EXIT_OK
    [curve] = _report(tmp_path, 'transport')['results']['curves']
    assert curve['transport'] == pytest.approx([[0.0, -1.0], [1.0, 0.0]], abs=1e-6)
    assert curve['norm_after'] == pytest.approx(curve['norm_before'], rel=1e-6)


def test_curvature_task(tmp_path):
    assert _run(_config(tmp_path, 'curvature')) == EXIT_OK
    results = _report(tmp_path, 'curvature')['results']
    assert results['max_norm'] <= 1e-8
    assert os.path.exists(os.path.join(str(tmp_path), 'curvature.csv'))


def test_uncertifiable_field_reports_an_error(tmp_path):
    changes = {'chart': {'type': 'torus', 'periods': [1.0, 1.0], 'resolution': [8, 4]},
               'metric': {'family': 'randers', 'b': ['0.3 + 0.1*sin(2*pi*x1)', 0.0]}}
    assert _run(_config(tmp_path, 'synthesize', changes)) == EXIT_ERROR
    report = _report(tmp_path, 'synthesize')
    assert report['status'] == 'error'
    assert report['error']['type'] == 'CertificationError'
    assert report['error']['stage'] == 'synthesize'
    assert 'params' in report['results']


@pytest.mark.slow
def test_torus_randers_at_full_resolution(tmp_path):
    base = copy.deepcopy(TORUS_RANDERS)
    base['chart']['resolution'] = [64, 64]
    base['quadrature'] = {'directions': 1024, 'radial_nodes': 8}
    base['transport'].update(random_curves=100, vectors_per_curve=10)

    with concurrent.futures.ThreadPoolExecutor(max_workers=4) as executor:
        config = _config(tmp_path / 'mono', 'monochromacy', base=base)
        assert _run(config, executor) == EXIT_OK
        report = _report(tmp_path / 'mono', 'monochromacy')['results']
        assert report['verdict'] == 'monochromatic'
        assert report['worst_defect'] <= report['threshold']

        assert _run(_config(tmp_path / 'verify', 'verify', base=base), executor) == EXIT_OK
    results = _report(tmp_path / 'verify', 'verify')['results']
    assert results['isomorphism_field']['max_defect'] <= 1e-6
    assert len(results['verification']['per_curve']) == 100
    assert results['verification']['max_error'] <= 1e-5
    assert results['holonomy']['passed']


THREE_TORUS_RANDERS = {
    'chart': {'type': 'torus', 'periods': [1.0, 1.0, 1.0], 'resolution': [16, 4, 4]},
    'metric': {'family': 'torus_randers',
               'V': ['cos(2*pi*x1)', 'sin(2*pi*x1)', 0.0]},
    'quadrature': {'directions': 2048, 'radial_nodes': 8},
    'solver': {'separation_restarts': 5, 'validation_samples': 100,
               'scheme': 'spectral'},
    'transport': {'random_curves': 10, 'vectors_per_curve': 5, 'interpolation': 'cubic',
                  'holonomy_loops': [{'points': [[0, 0, 0], [1, 0, 0]]},
                                     {'points': [[0, 0, 0], [0.5, 0.5, 0],
                                                 [0, 0.5, 0.5], [0, 0, 0]]}]},
}


@pytest.mark.slow
def test_three_torus_pipeline(tmp_path):
    config = _config(tmp_path, 'verify', base=THREE_TORUS_RANDERS)
    assert _run(config) == EXIT_OK
    results = _report(tmp_path, 'verify')['results']
    summary = results['isomorphism_field']
    assert summary['m'] == 2
    assert summary['decks'] == [None, None, None]
    assert summary['anchor_residual'] <= 1e-9
    assert summary['max_abs_gamma'] == pytest.approx(2 * 3.141592653589793, rel=1e-6)
    assert results['verification']['max_error'] <= 1e-5
    assert results['holonomy']['passed']


def _load_main():
    path = os.path.join(os.path.dirname(__file__), os.pardir, 'finsler_berwald',
                        '__main__.py')
    spec = importlib.util.spec_from_file_location('finsler_berwald_main', path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def _write_config(tmp_path, obj):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(obj), encoding='utf-8')
    return str(path)


def test_command_line_run(tmp_path):
    main = _load_main().main
    path = _write_config(tmp_path, TORUS_RANDERS)
    out = str(tmp_path / 'out')
    assert main(['validate', '--config', path, '--out', out, '--threads', '2',
                 '--seed', '3']) == EXIT_OK
    report = _report(out, 'validate')
    assert report['task'] == 'validate'
    assert report['results']['params']['seed'] == 3


def test_command_line_config_error(tmp_path):
    main = _load_main().main
    obj = copy.deepcopy(TORUS_RANDERS)
    obj['chart']['resolution'] = [2, 16]
    path = _write_config(tmp_path, obj)
    out = str(tmp_path / 'out')
    assert main(['verify', '--config', path, '--out', out]) == EXIT_ERROR
    error = _report(out, 'verify')['error']
    assert error['pointer'] == '/chart/resolution/0'
    assert error['stage'] == 'config'
    assert 'minimum of 4' in error['message']


def test_command_line_missing_config(tmp_path):
    main = _load_main().main
    out = str(tmp_path / 'out')
    assert main(['bl', '--config', str(tmp_path / 'nope.json'), '--out', out]) == EXIT_ERROR
    assert _report(out, 'bl')['status'] == 'error'
