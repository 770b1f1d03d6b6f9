import numpy as np
import pytest

from backend.app.core.attribution import (
    activation_gradient, am_ascend, cross_class_am, default_cam_layer, gaussian_blur, gaussian_kernel, grad_cam,
    predicted_class, tv_loss,
)
from backend.app.core.exceptions import ConfigError, TargetUnresolvable
from backend.app.core.layers import Conv2D, Dense, Flatten
from backend.app.core.network import Network
from backend.app.models.configs import AMConfig, ClassLogit, FromImage, LayerNeuron, UniformRandom


def _linear_net(weights):
    """Ein Ausgang a(x) = sum w * x über ein 1 x 3 x 3 Bild."""
    net = Network([Flatten(), Dense(9, 1)], (1, 3, 3))
    net.layers[1].weight.data[...] = np.asarray(weights, dtype=np.float64).reshape(1, 9)
    return net


def _user_layout(weights):
    return np.asarray(weights, dtype=np.float64).reshape(1, 3, 3).transpose(1, 2, 0)


def test_single_step_on_sum_target():
    net = _linear_net(np.ones(9))
    cfg = AMConfig(ClassLogit(0), eps1=0.1, steps=1, init=FromImage(np.zeros((3, 3, 1))))
    result = am_ascend(net, cfg)
    np.testing.assert_allclose(result.image, np.full((3, 3, 1), 0.1), rtol=0, atol=1e-15)
    assert result.initial_activation == 0.0
    assert result.activation_trace == [pytest.approx(0.9)]


def test_linear_target_is_exactly_solvable():
    w = np.random.default_rng(0).normal(size=9)
    net = _linear_net(w)
    x0 = np.random.default_rng(1).uniform(-0.5, 0.5, size=(3, 3, 1))
    cfg = AMConfig(ClassLogit(0), eps1=0.01, steps=7, init=FromImage(x0), clamp=(-10.0, 10.0))
    result = am_ascend(net, cfg)
    np.testing.assert_allclose(result.image, x0 + 7 * 0.01 * _user_layout(w), rtol=0, atol=1e-12)
    assert len(result.activation_trace) == 7
    assert np.all(np.diff(result.activation_trace) > 0)


def test_tv_with_zero_weight_equals_plain_ascent(sigmoid_image_net):
    base = dict(target=ClassLogit(1), eps1=0.2, steps=5, init=UniformRandom(seed=3))
    plain = am_ascend(sigmoid_image_net, AMConfig(**base))
    tv = am_ascend(sigmoid_image_net, AMConfig(**base, eps2=0.0, regularizer='tv'))
    np.testing.assert_array_equal(plain.image, tv.image)
    assert plain.activation_trace == tv.activation_trace


def test_result_stays_in_clamp_range(sigmoid_image_net):
    cfg = AMConfig(LayerNeuron(1, 5), eps1=5.0, steps=4, regularizer='tv', clamp=(-0.5, 0.5))
    result = am_ascend(sigmoid_image_net, cfg)
    assert result.image.shape == (6, 6, 3)
    assert result.image.min() >= -0.5 and result.image.max() <= 0.5
    assert len(result.activation_trace) == 4


def test_blur_operator_shrinks_variance(sigmoid_image_net):
    variances = []
    for steps in (1, 2, 3):
        cfg = AMConfig(ClassLogit(0), eps1=0.0, steps=steps, regularizer='blur', init=UniformRandom(seed=2))
        variances.append(float(np.var(am_ascend(sigmoid_image_net, cfg).image)))
    start = np.random.default_rng(2).uniform(-1.0, 1.0, size=(6, 6, 3))
    assert float(np.var(start)) > variances[0] > variances[1] > variances[2]


def test_attribution_leaves_weights_untouched(sigmoid_image_net):
    before = sigmoid_image_net.state()
    am_ascend(sigmoid_image_net, AMConfig(ClassLogit(2), steps=3, regularizer='blur'))
    grad_cam(sigmoid_image_net, np.zeros((6, 6, 3)), 2)
    for name, value in sigmoid_image_net.state().items():
        np.testing.assert_array_equal(value, before[name])


def test_unresolvable_targets(sigmoid_image_net):
    with pytest.raises(TargetUnresolvable):
        am_ascend(sigmoid_image_net, AMConfig(LayerNeuron(99, 0), steps=1))
    with pytest.raises(TargetUnresolvable):
        am_ascend(sigmoid_image_net, AMConfig(LayerNeuron(0, 4 * 6 * 6), steps=1))
    with pytest.raises(TargetUnresolvable):
        am_ascend(sigmoid_image_net, AMConfig(ClassLogit(3), steps=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        AMConfig(ClassLogit(0), steps=0)
    with pytest.raises(ConfigError):
        AMConfig(ClassLogit(0), clamp=(1.0, 1.0))
    with pytest.raises(ConfigError):
        AMConfig(ClassLogit(0), regularizer='blur', blur_sigma=0.0)
    with pytest.raises(ConfigError):
        AMConfig(ClassLogit(0), init=FromImage(np.zeros((2, 2, 3)))).init_array((6, 6, 3))


def test_cross_class_towards_predicted_class(sigmoid_image_net):
    source = 0.5 * np.random.default_rng(4).normal(size=(6, 6, 3))
    target = predicted_class(sigmoid_image_net, source)
    cfg = AMConfig(ClassLogit(0), eps1=0.01, steps=10, clamp=(-3.0, 3.0))
    result = cross_class_am(sigmoid_image_net, source, target, cfg)
    assert result.source_class == target
    assert result.final_activation >= result.initial_activation


def test_cross_class_noop_returns_clamped_source(sigmoid_image_net):
    source = 2.0 * np.random.default_rng(5).normal(size=(6, 6, 3))
    cfg = AMConfig(ClassLogit(0), eps1=0.0, steps=1)
    result = cross_class_am(sigmoid_image_net, source, 1, cfg)
    np.testing.assert_array_equal(result.image, np.clip(source, -1.0, 1.0))
    assert result.gain == 0.0


def test_tv_known_values(numeric_grad, rel_error):
    assert tv_loss(np.full((4, 4, 3), 0.7))[0] == 0.0
    assert tv_loss(np.array([[0.0, 1.0]]))[0] == 1.0
    loss, grad = tv_loss(np.array([[1.0, 1.0]]))
    assert loss == 0.0 and np.all(grad == 0.0)
    x = np.random.default_rng(6).normal(size=(5, 4, 2))
    _, grad = tv_loss(x)
    assert rel_error(grad, numeric_grad(lambda v: tv_loss(v)[0], x)) < 1e-4


def test_gaussian_kernel_and_impulse():
    kernel = gaussian_kernel(1.0, 2)
    assert kernel.sum() == pytest.approx(1.0)
    assert kernel[2] == pytest.approx(0.4026, abs=1e-4)
    impulse = np.zeros((9, 9))
    impulse[4, 4] = 1.0
    np.testing.assert_allclose(gaussian_blur(impulse, 1.0, 2)[2:7, 2:7], np.outer(kernel, kernel), atol=1e-15)
    constant = np.full((5, 5, 3), 0.3)
    np.testing.assert_allclose(gaussian_blur(constant), constant, atol=1e-15)
    with pytest.raises(ConfigError):
        gaussian_blur(constant, sigma=0.0)


def test_blur_semigroup():
    smooth = gaussian_blur(np.random.default_rng(7).normal(size=(32, 32)), 2.0, 6)
    twice = gaussian_blur(gaussian_blur(smooth, 1.0, 6), 1.0, 6)
    once = gaussian_blur(smooth, np.sqrt(2.0), 6)
    assert np.linalg.norm(twice - once) < 0.02 * np.linalg.norm(once)


@pytest.mark.parametrize('seed', range(5))
def test_blur_does_not_increase_tv(seed):
    x = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(8, 8, 3))
    assert tv_loss(gaussian_blur(x))[0] <= tv_loss(x)[0]


def _one_feature_net(class_weights):
    net = Network([Conv2D(1, 1, 1, block_id=1), Flatten(2), Dense(16, 2, 2)], (1, 4, 4))
    net.layers[0].weight.data[...] = 2.0
    net.layers[0].bias.data[...] = 0.5
    net.layers[2].weight.data[...] = np.asarray(class_weights, dtype=np.float64)
    return net


def test_grad_cam_uniform_for_mean_logit():
    net = _one_feature_net([np.full(16, 1.0 / 16), np.zeros(16)])
    cam = grad_cam(net, np.ones((4, 4)), 0)
    assert cam.layer == 0 == default_cam_layer(net)
    np.testing.assert_allclose(cam.values, np.ones((4, 4)))
    np.testing.assert_allclose(cam.upsampled, np.ones((4, 4)))


def test_grad_cam_zero_for_disconnected_class():
    net = _one_feature_net([np.full(16, 1.0 / 16), np.zeros(16)])
    cam = grad_cam(net, np.ones((4, 4)), 1)
    assert np.all(cam.values == 0.0)
    assert np.all(cam.upsampled == 0.0)


def test_grad_cam_non_negative_and_shift_invariant(sigmoid_image_net):
    image = np.random.default_rng(8).normal(size=(6, 6, 3))
    for cls in range(3):
        cam = grad_cam(sigmoid_image_net, image, cls)
        assert cam.values.shape == (6, 6)
        assert cam.upsampled.shape == (6, 6)
        assert np.all(cam.values >= 0.0) and np.all(cam.upsampled >= 0.0)
    before = grad_cam(sigmoid_image_net, image, 1).values
    sigmoid_image_net.layers[-1].bias.data += 3.0
    after = grad_cam(sigmoid_image_net, image, 1).values
    np.testing.assert_allclose(after, before, atol=1e-10)


def test_grad_cam_invalid_targets(sigmoid_image_net):
    image = np.zeros((6, 6, 3))
    with pytest.raises(TargetUnresolvable):
        grad_cam(sigmoid_image_net, image, 3)
    with pytest.raises(TargetUnresolvable):
        grad_cam(sigmoid_image_net, image, 0, conv_layer=5)
    with pytest.raises(TargetUnresolvable):
        grad_cam(Network([Flatten(), Dense(9, 2)], (1, 3, 3)), np.zeros((3, 3)), 0)


def test_ascent_beats_random_images(sigmoid_image_net):
    wins = 0
    for trial in range(100):
        target = ClassLogit(trial % 3)
        cfg = AMConfig(target, eps1=1.0, steps=40, init=UniformRandom(seed=trial))
        final = am_ascend(sigmoid_image_net, cfg).activation_trace[-1]
        evaluate = activation_gradient(sigmoid_image_net, target)
        rng = np.random.default_rng(1000 + trial)
        baseline = max(evaluate(rng.uniform(-1.0, 1.0, size=(6, 6, 3)))[0] for _ in range(10))
        wins += final > baseline
    assert wins >= 95


def test_blur_step_blurs_before_adding_gradient():
    w = np.random.default_rng(4).normal(size=9)
    x0 = np.random.default_rng(5).uniform(-0.5, 0.5, size=(3, 3, 1))
    cfg = AMConfig(ClassLogit(0), eps1=0.05, steps=1, init=FromImage(x0), regularizer='blur', clamp=(-10.0, 10.0))
    result = am_ascend(_linear_net(w), cfg)
    expected = gaussian_blur(x0, cfg.blur_sigma, cfg.blur_radius) + 0.05 * _user_layout(w)
    np.testing.assert_allclose(result.image, expected, rtol=0, atol=1e-12)
