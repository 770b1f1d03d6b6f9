import numpy as np
import pytest

from backend.app.core.architectures import build_network
from backend.app.core.data_manager import make_toy_images
from backend.app.core.exceptions import ConfigError, InsufficientImages, ModeError, ShapeMismatch, UnknownBlock
from backend.app.core.layers import Conv2D, Dense, Flatten, Sigmoid
from backend.app.core.local_sensitivity import (
    aggregate_maps, as_network_input, block_norm, channel_maps, class_mean_map, pixel_sensitivity, pixelate,
    sensitivity_profile,
)
from backend.app.core.network import Network, train
from backend.app.models.configs import TrainConfig
from backend.app.models.results import SensitivityMap


def _image(seed=0, shape=(6, 6, 3)):
    return np.random.default_rng(seed).normal(size=shape)


def _blind_channel_net():
    """Block 1 ignoriert Kanal 2 vollständig."""
    layers = [Conv2D(3, 2, 1, block_id=1), Sigmoid(1), Flatten(2), Dense(2 * 4 * 4, 2, 2)]
    net = Network(layers, (3, 4, 4)).init_parameters(5)
    net.layers[0].weight.data[:, 2] = 0.0
    return net


def _toy_net():
    layers = [Conv2D(3, 2, 3, padding=1, block_id=1), Sigmoid(1), Flatten(2), Dense(2 * 8 * 8, 4, 2)]
    return Network(layers, (3, 8, 8)).init_parameters(1)


def test_ignored_channel_gives_exact_zero_map():
    net = _blind_channel_net()
    image = _image(1, (4, 4, 3))
    blind = pixel_sensitivity(net, image, 1, 2, epsilon=0.5)
    assert blind.values.shape == (4, 4)
    assert np.max(np.abs(blind.values)) <= 1e-12
    seen = pixel_sensitivity(net, image, 1, 0, epsilon=0.5)
    assert np.any(seen.values != 0.0)


def test_map_matches_direct_norm_difference(sigmoid_image_net):
    image = _image(2)
    sens = pixel_sensitivity(sigmoid_image_net, image, 2, 1, epsilon=0.1)
    perturbed = image.copy()
    perturbed[3, 4, 1] += 0.1
    expected = block_norm(sigmoid_image_net, perturbed, 2) - block_norm(sigmoid_image_net, image, 2)
    assert sens.values[3, 4] == pytest.approx(expected, abs=1e-12)
    assert sens.baseline_norm == pytest.approx(block_norm(sigmoid_image_net, image, 2), abs=1e-12)


def test_small_epsilon_scales_linearly(sigmoid_image_net):
    image = _image(3)
    small = pixel_sensitivity(sigmoid_image_net, image, 2, 0, epsilon=1e-4).values
    double = pixel_sensitivity(sigmoid_image_net, image, 2, 0, epsilon=2e-4).values
    assert np.linalg.norm(double - 2.0 * small) < 0.05 * np.linalg.norm(2.0 * small)


def test_threads_do_not_change_map(sigmoid_image_net):
    image = _image(4)
    serial = pixel_sensitivity(sigmoid_image_net, image, 1, 0, threads=1, chunk_size=8)
    parallel = pixel_sensitivity(sigmoid_image_net, image, 1, 0, threads=3, chunk_size=8)
    np.testing.assert_array_equal(serial.values, parallel.values)


def test_channel_maps_cover_every_channel(sigmoid_image_net):
    maps = channel_maps(sigmoid_image_net, _image(5), 1)
    assert [m.channel for m in maps] == [0, 1, 2]
    assert all(m.block_id == 1 for m in maps)


def test_invalid_requests(sigmoid_image_net):
    image = _image()
    with pytest.raises(UnknownBlock):
        pixel_sensitivity(sigmoid_image_net, image, 9, 0)
    with pytest.raises(ShapeMismatch):
        pixel_sensitivity(sigmoid_image_net, image, 1, 3)
    with pytest.raises(ShapeMismatch):
        pixel_sensitivity(sigmoid_image_net, _image(shape=(5, 6, 3)), 1, 0)
    with pytest.raises(ConfigError):
        pixel_sensitivity(sigmoid_image_net, image, 1, 0, epsilon=0.0)
    sigmoid_image_net.train()
    with pytest.raises(ModeError):
        pixel_sensitivity(sigmoid_image_net, image, 1, 0)


def test_grayscale_input_layout():
    net = Network([Conv2D(1, 1, 1, block_id=1)], (1, 3, 3)).init_parameters(0)
    x = as_network_input(net, np.arange(9.0).reshape(3, 3))
    assert x.shape == (1, 3, 3)
    assert x[0, 2, 1] == 7.0


def _map(values):
    return SensitivityMap(values=np.asarray(values, dtype=np.float64), block_id=1, channel=0, epsilon=0.1)


def test_pixelate_full_tiles():
    values = np.arange(32 * 32, dtype=np.float64).reshape(32, 32)
    coarse = pixelate(_map(values), 4)
    assert coarse.shape == (8, 8)
    assert coarse.aggregation == 4
    assert coarse.values[0, 0] == pytest.approx(values[:4, :4].mean())
    assert coarse.values[7, 7] == pytest.approx(values[28:, 28:].mean())


def test_pixelate_partial_edge_tiles():
    values = np.arange(49, dtype=np.float64).reshape(7, 7)
    coarse = pixelate(_map(values), 2)
    assert coarse.shape == (4, 4)
    assert coarse.values[3, 3] == 48.0
    assert coarse.values[0, 3] == pytest.approx((6.0 + 13.0) / 2)
    identity = pixelate(_map(values), 1)
    np.testing.assert_array_equal(identity.values, values)
    with pytest.raises(ConfigError):
        pixelate(_map(values), 0)


def test_scale_exponent():
    assert _map([[0.034, -0.01]]).scale_exponent == -1
    assert _map([[2.5]]).scale_exponent == 1
    assert _map([[0.0]]).scale_exponent == 0


def test_aggregate_statistics():
    maps = [_map([[1.0, -2.0]]), _map([[-3.0, 2.0]])]
    np.testing.assert_array_equal(aggregate_maps(maps).values, [[-1.0, 0.0]])
    np.testing.assert_array_equal(aggregate_maps(maps, 'mean_abs').values, [[2.0, 2.0]])
    with pytest.raises(ConfigError):
        aggregate_maps(maps, 'median')


def test_class_mean_map(toy_images):
    net = _toy_net()
    mean, maps = class_mean_map(net, toy_images, 1, 1, 0, epsilon=0.1, n_images=3)
    assert len(maps) == 3
    assert mean.class_label == 1 and all(m.class_label == 1 for m in maps)
    np.testing.assert_allclose(mean.values, np.mean([m.values for m in maps], axis=0))
    first = toy_images.indices_of(1)[0]
    direct = pixel_sensitivity(net, toy_images.normalized(first), 1, 0, epsilon=0.1)
    np.testing.assert_array_equal(maps[0].values, direct.values)


def test_class_mean_map_needs_enough_images(toy_images):
    with pytest.raises(InsufficientImages):
        class_mean_map(_toy_net(), toy_images, 2, 1, 0, n_images=9)


def test_sensitivity_profile(sigmoid_image_net):
    images = [_image(7), _image(8)]
    profile = sensitivity_profile(sigmoid_image_net, images, epsilon=0.1)
    assert sorted(profile) == [1, 2]
    assert all(v > 0 for v in profile.values())
    with pytest.raises(InsufficientImages):
        sensitivity_profile(sigmoid_image_net, [])


def test_sensitivity_decays_with_depth_in_trained_vgg():
    dataset = make_toy_images(n_per_class=16, size=16, seed=2)
    net = build_network('vgg-tiny', seed=1, input_shape=dataset.input_shape, n_classes=dataset.n_classes)
    net, _ = train(net, dataset.network_inputs(), dataset.labels,
                   TrainConfig(learning_rate=0.05, epochs=5, batch_size=16))
    profile = sensitivity_profile(net, [dataset.normalized(i) for i in range(9)])
    assert sorted(profile) == [1, 2, 3]
    assert profile[3] <= profile[1]
