import csv
import json
import os

import pytest

from backend.app.cli import COMMAND_DEFAULTS, build_parser, main, resolve_config
from backend.app.core.weights_store import load_weights


def _rows(path):
    with open(path, encoding='utf-8', newline='') as f:
        return list(csv.reader(f))


def _manifest(out):
    with open(os.path.join(out, 'manifest.json'), encoding='utf-8') as f:
        return json.load(f)


@pytest.fixture(scope='module')
def tabular_run(tmp_path_factory):
    """Toy-Tabelle plus kurz trainiertes MLP."""
    base = tmp_path_factory.mktemp('tabular')
    assert main(['make-toy', '--kind', 'tabular', '--n', '300', '--out', str(base / 'data')]) == 0
    data = str(base / 'data' / 'diabetes_toy.csv')
    out = str(base / 'train')
    assert main(['train', '--data', data, '--epochs', '3', '--lr', '0.05', '--out', out]) == 0
    return data, os.path.join(out, 'weights.slns')


@pytest.fixture(scope='module')
def image_run(tmp_path_factory):
    """Gepackte Toy-Bilder (8x8) plus vgg-tiny nach einer Epoche."""
    base = tmp_path_factory.mktemp('images')
    assert main(['make-toy', '--kind', 'images', '--n', '3', '--size', '8', '--format', 'pack',
                 '--out', str(base / 'data')]) == 0
    data = str(base / 'data' / 'toy_images.slim')
    out = str(base / 'train')
    assert main(['train', '--data', data, '--arch', 'vgg-tiny', '--epochs', '1', '--batch-size', '4',
                 '--out', out]) == 0
    return data, os.path.join(out, 'weights.slns')


def test_help_and_missing_command(capsys):
    assert main(['--help']) == 0
    assert main([]) == 2
    assert main(['nonsense']) == 2


def test_train_writes_weights_and_metrics(tabular_run, capsys, tmp_path):
    data, weights = tabular_run
    net = load_weights(weights)
    assert net.name == 'mlp-8-10-1'
    assert net.metadata['kind'] == 'tabular'
    assert len(net.metadata['normalization']) == 8
    epochs = _rows(os.path.join(os.path.dirname(weights), 'epochs.csv'))
    assert epochs[0] == ['epoch', 'loss', 'accuracy', 'test_accuracy']
    assert len(epochs) == 4
    assert main(['train', '--data', data, '--epochs', '0', '--train-n', '200', '--test-n', '100',
                 '--out', str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    assert 'train_accuracy=' in printed and 'test_accuracy=' in printed
    assert _manifest(str(tmp_path))['config']['train_n'] == 200


def test_missing_data_file_exit_code(tmp_path, capsys):
    missing = str(tmp_path / 'nowhere.csv')
    assert main(['train', '--data', missing, '--out', str(tmp_path / 'o')]) == 2
    assert missing in capsys.readouterr().err
    assert main(['train', '--out', str(tmp_path / 'o')]) == 2


def test_eval_writes_predictions(tabular_run, tmp_path, capsys):
    data, weights = tabular_run
    assert main(['eval', '--weights', weights, '--data', data, '--out', str(tmp_path)]) == 0
    rows = _rows(str(tmp_path / 'predictions.csv'))
    assert rows[0] == ['index', 'label', 'predicted']
    assert len(rows) == 301
    assert 'accuracy=' in capsys.readouterr().out


def test_sobol_test_function(tmp_path, capsys):
    out = str(tmp_path)
    assert main(['sobol', '--function', 'ishigami', '--n', '1024', '--bootstrap', '10', '--out', out]) == 0
    rows = _rows(os.path.join(out, 'indices.csv'))
    assert rows[0] == ['factor', 's1', 's1_lo', 's1_hi', 'st', 'st_lo', 'st_hi']
    assert [r[0] for r in rows[1:]] == ['x1', 'x2', 'x3']
    exact = _rows(os.path.join(out, 'exact.csv'))
    assert float(exact[2][1]) == pytest.approx(0.4424, abs=1e-4)
    manifest = _manifest(out)
    assert manifest['command'] == 'sobol'
    assert sorted(manifest['artifacts']) == ['exact.csv', 'indices.csv']
    assert manifest['results']['ranking_s1'][0] == 'x2'


def test_sobol_second_order_files(tmp_path):
    assert main(['sobol', '--function', 'linear', '--params', '1,2,3', '--n', '64', '--order',
                 'first-second-total', '--bootstrap', '0', '--out', str(tmp_path)]) == 0
    s2 = _rows(str(tmp_path / 's2.csv'))
    assert s2[0] == ['factor', 'x1', 'x2', 'x3']


def test_sobol_plan_errors(tmp_path):
    assert main(['sobol', '--function', 'ishigami', '--n', '100', '--out', str(tmp_path)]) == 2
    assert main(['sobol', '--out', str(tmp_path)]) == 2
    assert main(['sobol', '--function', 'ishigami', '--weights', 'w.slns', '--out', str(tmp_path)]) == 2


def test_sobol_is_deterministic(tmp_path):
    args = ['sobol', '--function', 'sobol-g', '--n', '256', '--bootstrap', '20', '--seed', '7', '--threads', '2']
    assert main(args + ['--out', str(tmp_path / 'a')]) == 0
    assert main(args + ['--out', str(tmp_path / 'b'), '--threads', '1']) == 0
    with open(tmp_path / 'a' / 'indices.csv', 'rb') as a, open(tmp_path / 'b' / 'indices.csv', 'rb') as b:
        assert a.read() == b.read()


def test_manifest_reproduces_run(tmp_path):
    first = str(tmp_path / 'first')
    assert main(['sobol', '--function', 'linear', '--params', '1,2', '--n', '64', '--bootstrap', '5',
                 '--seed', '3', '--out', first]) == 0
    second = str(tmp_path / 'second')
    assert main(['sobol', '--config', os.path.join(first, 'manifest.json'), '--out', second]) == 0
    assert _manifest(second)['config']['params'] == '1,2'
    with open(os.path.join(first, 'indices.csv'), 'rb') as a, open(os.path.join(second, 'indices.csv'), 'rb') as b:
        assert a.read() == b.read()


def test_config_precedence(tmp_path):
    config = tmp_path / 'run.json'
    config.write_text(json.dumps({'n': 64, 'bootstrap': 3, 'unknown_key': 1}), encoding='utf-8')
    args = build_parser().parse_args(['sobol', '--config', str(config), '--n', '128', '--function', 'linear'])
    cfg = resolve_config(args)
    assert cfg['n'] == 128
    assert cfg['bootstrap'] == 3
    assert cfg['level'] == COMMAND_DEFAULTS['sobol']['level']
    assert 'unknown_key' not in cfg
    assert cfg['out'].endswith('sobol')
    assert main(['sobol', '--config', str(tmp_path / 'absent.json')]) == 2


def test_sobol_on_trained_network(tabular_run, tmp_path):
    _, weights = tabular_run
    assert main(['sobol', '--weights', weights, '--n', '64', '--bootstrap', '0', '--out', str(tmp_path)]) == 0
    rows = _rows(str(tmp_path / 'indices.csv'))
    assert [r[0] for r in rows[1:]][:2] == ['Pregnancies', 'Glucose']
    assert len(rows) == 9


def test_sobol_hidden_units(tabular_run, tmp_path):
    _, weights = tabular_run
    out = tmp_path / 'hidden'
    assert main(['sobol', '--weights', weights, '--target', 'hidden', '--n', '64', '--bootstrap', '0',
                 '--out', str(out)]) == 0
    files = sorted(f for f in os.listdir(out) if f.startswith('indices_'))
    assert files == sorted(f"indices_layer0_unit{j}.csv" for j in range(10))
    assert main(['sobol', '--function', 'ishigami', '--target', 'hidden', '--n', '64', '--out', str(out)]) == 2


def test_convergence_rows(tmp_path):
    assert main(['convergence', '--function', 'ishigami', '--n-min', '64', '--n-max', '1024', '--bootstrap', '20',
                 '--out', str(tmp_path)]) == 0
    rows = _rows(str(tmp_path / 'convergence.csv'))
    assert rows[0][:3] == ['n', 'factor', 's1']
    assert [r[0] for r in rows[1:]] == ['64'] * 3 + ['256'] * 3 + ['1024'] * 3
    assert _manifest(str(tmp_path))['results']['n_values'] == [64, 256, 1024]
    assert main(['convergence', '--function', 'ishigami', '--n-min', '1024', '--n-max', '64',
                 '--out', str(tmp_path)]) == 2
    assert main(['convergence', '--function', 'ishigami', '--n-min', '100', '--out', str(tmp_path)]) == 2


def test_pca_command(tabular_run, tmp_path, capsys):
    data, _ = tabular_run
    assert main(['pca', '--data', data, '--out', str(tmp_path)]) == 0
    ratios = _rows(str(tmp_path / 'pca_ratios.csv'))
    assert len(ratios) == 9
    assert float(ratios[-1][3]) == pytest.approx(1.0, abs=1e-10)
    assert len(_rows(str(tmp_path / 'pca_ranking.csv'))) == 9
    assert 'Kumulierter Anteil' in capsys.readouterr().out


def test_ablation_command(tabular_run, tmp_path):
    data, _ = tabular_run
    assert main(['ablation', '--data', data, '--epochs', '2', '--out', str(tmp_path)]) == 0
    rows = _rows(str(tmp_path / 'ablation.csv'))
    assert [r[0] for r in rows[1:]] == ['full', 'top', 'weak']
    assert [r[1] for r in rows[1:]] == ['8', '4', '4']
    assert load_weights(str(tmp_path / 'weights_top.slns')).input_shape == (4,)
    assert main(['ablation', '--data', data, '--top', 'Glucose,Cholesterol', '--out', str(tmp_path)]) == 1


def test_tabular_am(tabular_run, tmp_path):
    _, weights = tabular_run
    assert main(['am', '--weights', weights, '--steps', '5', '--eps1', '0.1', '--out', str(tmp_path)]) == 0
    assert len(_rows(str(tmp_path / 'am_trace.csv'))) == 7
    assert len(_rows(str(tmp_path / 'am_input.csv'))) == 9


def test_image_train_and_eval(image_run, tmp_path):
    data, weights = image_run
    net = load_weights(weights)
    assert net.name == 'vgg-tiny'
    assert net.input_shape == (3, 8, 8)
    assert net.metadata['kind'] == 'image'
    assert main(['eval', '--weights', weights, '--data', data, '--out', str(tmp_path)]) == 0
    assert len(_rows(str(tmp_path / 'predictions.csv'))) == 13


def test_local_sens_command(image_run, tmp_path):
    data, weights = image_run
    out = str(tmp_path)
    assert main(['local-sens', '--weights', weights, '--data', data, '--block', '1', '--pixelate', '2',
                 '--eps', '0.1', '--out', out]) == 0
    for channel in range(3):
        matrix = _rows(os.path.join(out, f"sens_block1_ch{channel}.csv"))
        assert len(matrix) == 4 and all(len(r) == 4 for r in matrix)
        assert os.path.isfile(os.path.join(out, f"sens_block1_ch{channel}.pgm"))
        assert os.path.isfile(os.path.join(out, f"sens_block1_ch{channel}_color.ppm"))
    assert main(['local-sens', '--weights', weights, '--data', data, '--block', '2', '--class', '1',
                 '--n-images', '2', '--channel', '0', '--out', out]) == 0
    assert len(_rows(os.path.join(out, 'sens_block2_ch0.csv'))) == 8
    assert main(['local-sens', '--weights', weights, '--data', data, '--block', '9', '--out', out]) == 1
    assert main(['local-sens', '--weights', weights, '--data', data, '--class', '1', '--n-images', '4',
                 '--out', out]) == 1


def test_am_command(image_run, tmp_path):
    data, weights = image_run
    out = str(tmp_path)
    assert main(['am', '--weights', weights, '--class', '2', '--steps', '3', '--reg', 'tv', '--out', out]) == 0
    assert _rows(os.path.join(out, 'am_trace.csv'))[0] == ['step', 'activation']
    assert len(_rows(os.path.join(out, 'am_trace.csv'))) == 5
    assert os.path.isfile(os.path.join(out, 'am.ppm'))
    cross = str(tmp_path / 'cross')
    assert main(['am', '--weights', weights, '--data', data, '--class', '0', '--image', '1', '--steps', '2',
                 '--out', cross]) == 0
    assert 'source_class' in _manifest(cross)['results']
    assert main(['am', '--weights', weights, '--class', '9', '--steps', '1', '--out', out]) == 1


def test_grad_cam_command(image_run, tmp_path):
    data, weights = image_run
    out = str(tmp_path)
    assert main(['grad-cam', '--weights', weights, '--data', data, '--image', '2', '--out', out]) == 0
    upsampled = _rows(os.path.join(out, 'gradcam.csv'))
    assert len(upsampled) == 8
    assert all(float(v) >= 0.0 for row in upsampled for v in row)
    for name in ('gradcam_map.csv', 'gradcam.pgm', 'gradcam_overlay.ppm'):
        assert os.path.isfile(os.path.join(out, name))
    assert main(['grad-cam', '--weights', weights, '--data', data, '--image', '99', '--out', out]) == 1


def test_image_net_rejected_by_sobol(image_run, tmp_path):
    _, weights = image_run
    assert main(['sobol', '--weights', weights, '--n', '64', '--out', str(tmp_path)]) == 1


def test_make_toy_folder(tmp_path):
    assert main(['make-toy', '--kind', 'images', '--n', '1', '--size', '6', '--out', str(tmp_path)]) == 0
    manifest = _rows(str(tmp_path / 'toy_images' / 'manifest.csv'))
    assert manifest[0] == ['path', 'label', 'class']
    assert len(manifest) == 5


def test_depth_profile_command(image_run, tmp_path):
    data, _ = image_run
    assert main(['depth-profile', '--data', data, '--epochs', '1', '--batch-size', '4', '--n-images', '1',
                 '--out', str(tmp_path)]) == 0
    rows = _rows(str(tmp_path / 'depth_profile.csv'))
    assert rows[0] == ['arch', 'block', 'mean_abs', 'ratio_to_first']
    assert [(r[0], r[1]) for r in rows[1:]] == [(a, str(q)) for a in ('vgg-tiny', 'resnet-tiny') for q in (1, 2, 3)]
    assert set(_manifest(str(tmp_path))['results']['ratio_last_first']) == {'vgg-tiny', 'resnet-tiny'}


def test_depth_profile_warns_without_decay(image_run, tmp_path, monkeypatch, caplog):
    data, _ = image_run
    monkeypatch.setattr('backend.app.cli.sensitivity_profile', lambda net, images, **kw: {1: 1.0, 2: 1.5, 3: 2.0})
    with caplog.at_level('WARNING', logger='backend'):
        assert main(['depth-profile', '--data', data, '--archs', 'vgg-tiny', '--epochs', '1', '--batch-size', '4',
                     '--n-images', '1', '--out', str(tmp_path)]) == 0
    assert any('nimmt mit der Tiefe nicht ab' in r.getMessage() for r in caplog.records)
