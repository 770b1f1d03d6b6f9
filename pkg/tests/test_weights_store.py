import json
import os

import numpy as np
import pytest

from backend.app.core.architectures import build_network, mlp
from backend.app.core.exceptions import ConfigError, WeightsFormatError
from backend.app.core.layers import BatchNorm, Conv2D, Dense, ReLU, Residual, Sigmoid
from backend.app.core.network import forward, predict
from backend.app.core.weights_store import MAGIC, from_bytes, load_weights, save_weights, sidecar_path, to_bytes


def test_mlp_layout():
    net = build_network('mlp-8-10-1', seed=1)
    assert net.name == 'mlp-8-10-1'
    assert net.input_shape == (8,)
    assert net.output_shape == (1,)
    assert [type(layer) for layer in net.layers] == [Dense, BatchNorm, ReLU, Dense, BatchNorm, Sigmoid]
    assert mlp([4, 6, 3]).output_shape == (3,)


@pytest.mark.parametrize('arch', ['vgg-tiny', 'resnet-tiny'])
def test_image_architectures(arch):
    net = build_network(arch, seed=2, input_shape=(3, 16, 16), n_classes=4)
    assert net.output_shape == (4,)
    assert net.block_ids()[-1] == 4
    assert {1, 2, 3} <= set(net.block_ids())
    assert net.layer_shapes[net.block_end(3)] == (64, 2, 2)
    out = predict(net, np.zeros((2, 3, 16, 16)))
    assert out.shape == (2, 4)


def test_vgg_is_plain_conv_relu():
    net = build_network('vgg-tiny', seed=1)
    assert not any(isinstance(layer, BatchNorm) for layer in net.layers)
    convs = [layer for layer in net.layers if isinstance(layer, Conv2D)]
    assert len(convs) == 6 and all(c.fan == 'out' for c in convs)


def test_resnet_has_residual_stages():
    net = build_network('resnet-tiny', seed=1)
    assert sum(isinstance(layer, Residual) for layer in net.layers) == 3
    assert net.block_ids()[0] == 0


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        build_network('transformer-xl')


def test_same_seed_same_weights():
    a, b = build_network('mlp-8-10-1', seed=5), build_network('mlp-8-10-1', seed=5)
    for name, value in a.state().items():
        np.testing.assert_array_equal(value, b.state()[name])


def test_save_load_round_trip(tmp_path):
    net = build_network('resnet-tiny', seed=3, input_shape=(3, 8, 8), n_classes=2)
    net.layers[1].running_mean.data[...] = 0.25
    net.metadata = {'kind': 'image', 'mean': [0.5, 0.5, 0.5]}
    path = str(tmp_path / 'weights.slns')
    sidecar = save_weights(net, path)
    assert sidecar == str(tmp_path / 'weights.json')
    loaded = load_weights(path)
    assert loaded.name == 'resnet-tiny'
    assert loaded.metadata == net.metadata
    for name, value in net.state().items():
        np.testing.assert_array_equal(loaded.state()[name], value)
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    np.testing.assert_array_equal(forward(loaded, x).output, forward(net, x).output)


def test_binary_without_sidecar(tmp_path):
    net = build_network('mlp-3-4-1', seed=1)
    path = str(tmp_path / 'w.slns')
    save_weights(net, path)
    os.remove(sidecar_path(path))
    loaded = load_weights(path)
    assert loaded.to_spec()['layers'] == net.to_spec()['layers']


def test_corrupt_payloads():
    payload = to_bytes(build_network('mlp-3-4-1', seed=1))
    assert payload[:4] == MAGIC
    with pytest.raises(WeightsFormatError):
        from_bytes(b'XXXX' + payload[4:])
    with pytest.raises(WeightsFormatError):
        from_bytes(payload[:-3])
    with pytest.raises(WeightsFormatError):
        from_bytes(payload + b'\x00')


def test_sidecar_must_match_binary(tmp_path):
    path = str(tmp_path / 'w.slns')
    sidecar = save_weights(build_network('mlp-3-4-1', seed=1), path)
    with open(sidecar, 'r', encoding='utf-8') as f:
        spec = json.load(f)
    spec['layers'][0]['out'] = 5
    with open(sidecar, 'w', encoding='utf-8') as f:
        json.dump(spec, f)
    with pytest.raises(WeightsFormatError):
        load_weights(path)


def test_json_architecture(tmp_path):
    spec = build_network('mlp-2-3-1').to_spec()
    path = tmp_path / 'arch.json'
    path.write_text(json.dumps(spec), encoding='utf-8')
    net = build_network(str(path), seed=4)
    assert net.input_shape == (2,)
    assert net.to_spec()['layers'] == spec['layers']
