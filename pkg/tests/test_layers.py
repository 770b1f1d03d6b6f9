import numpy as np
import pytest

from backend.app.core.exceptions import ClassOutOfRange, NonFiniteValue, ShapeMismatch, WeightsFormatError
from backend.app.core.layers import (
    BatchNorm, Conv2D, Dense, Flatten, MaxPool2D, ReLU, Residual, Sigmoid, layer_from_spec,
)
from backend.app.core.losses import bce_loss, cross_entropy_loss
from backend.app.core.tensor import Tensor, ensure_finite

SEEDS = range(100)
FD_RTOL, FD_ATOL = 1e-4, 1e-7


def _init(layer, seed):
    layer.init_parameters(np.random.default_rng(seed))
    return layer


def _check(layer, x, train, numeric_grad, seed):
    """Vergleicht Eingabe- und Parametergradienten mit zentralen Differenzen."""
    y, cache = layer.forward(x, train)
    w = np.random.default_rng(seed + 100).normal(size=y.shape)
    dx, grads = layer.backward(cache, w)

    def loss_x(xv):
        return float(np.sum(w * layer.forward(xv, train)[0]))

    np.testing.assert_allclose(dx, numeric_grad(loss_x, x), rtol=FD_RTOL, atol=FD_ATOL)
    for name, tensor in layer.parameters().items():
        def loss_p(pv, tensor=tensor):
            saved = tensor.data.copy()
            tensor.data[...] = pv
            try:
                return float(np.sum(w * layer.forward(x, train)[0]))
            finally:
                tensor.data[...] = saved

        np.testing.assert_allclose(grads[name], numeric_grad(loss_p, tensor.data.copy()),
                                   rtol=FD_RTOL, atol=FD_ATOL, err_msg=name)


@pytest.mark.parametrize('seed', SEEDS)
def test_dense_gradient(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    layer = _init(Dense(3, 4), seed)
    layer.bias.data[...] = rng.normal(size=4)
    _check(layer, rng.normal(size=(5, 3)), True, numeric_grad, seed)


@pytest.mark.parametrize('seed', SEEDS)
def test_conv_gradient(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    stride, padding = (1, 1) if seed % 2 else (2, 1)
    layer = _init(Conv2D(2, 3, 3, stride=stride, padding=padding), seed)
    layer.bias.data[...] = rng.normal(size=3)
    _check(layer, rng.normal(size=(2, 2, 5, 5)), True, numeric_grad, seed)


@pytest.mark.parametrize('seed', SEEDS)
def test_batchnorm_train_gradient(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    layer = BatchNorm(3)
    layer.gamma.data[...] = rng.uniform(0.5, 1.5, size=3)
    layer.beta.data[...] = rng.normal(size=3)
    x = rng.normal(size=(6, 3)) if seed % 2 else rng.normal(size=(3, 3, 3, 3))
    _check(layer, x, True, numeric_grad, seed)


@pytest.mark.parametrize('seed', SEEDS)
def test_batchnorm_eval_gradient(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    layer = BatchNorm(2)
    layer.running_mean.data[...] = rng.normal(size=2)
    layer.running_var.data[...] = rng.uniform(0.5, 2.0, size=2)
    layer.gamma.data[...] = rng.uniform(0.5, 1.5, size=2)
    _check(layer, rng.normal(size=(4, 2, 3, 3)), False, numeric_grad, seed)


@pytest.mark.parametrize('seed', SEEDS)
def test_relu_gradient_away_from_kink(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6))
    x = np.sign(x) * (0.1 + np.abs(x))
    _check(ReLU(), x, True, numeric_grad, seed)


@pytest.mark.parametrize('seed', SEEDS)
def test_sigmoid_gradient(seed, numeric_grad):
    _check(Sigmoid(), np.random.default_rng(seed).normal(size=(3, 5)), True, numeric_grad, seed)


@pytest.mark.parametrize('seed', SEEDS)
def test_maxpool_gradient_without_ties(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    x = rng.permutation(64).reshape(2, 2, 4, 4) / 64.0
    _check(MaxPool2D(2), x, True, numeric_grad, seed)


@pytest.mark.parametrize('seed', SEEDS)
def test_flatten_gradient(seed, numeric_grad):
    _check(Flatten(), np.random.default_rng(seed).normal(size=(2, 2, 3, 3)), True, numeric_grad, seed)


@pytest.mark.parametrize('seed', SEEDS)
def test_residual_gradient(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    inner = [Conv2D(2, 2, 3, padding=1), BatchNorm(2), Sigmoid(), Conv2D(2, 2, 1)]
    layer = _init(Residual(inner), seed)
    _check(layer, rng.normal(size=(3, 2, 4, 4)), seed % 2 == 0, numeric_grad, seed)


@pytest.mark.parametrize('seed', SEEDS)
def test_bce_gradient(seed, numeric_grad, rel_error):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size=(6, 1))
    y = rng.integers(0, 2, size=(6, 1)).astype(float)
    _, grad = bce_loss(p, y)
    assert rel_error(grad, numeric_grad(lambda v: bce_loss(v, y)[0], p)) < 1e-4


@pytest.mark.parametrize('seed', SEEDS)
def test_cross_entropy_gradient(seed, numeric_grad, rel_error):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)
    _, grad = cross_entropy_loss(z, y)
    assert rel_error(grad, numeric_grad(lambda v: cross_entropy_loss(v, y)[0], z)) < 1e-4


def test_bce_known_value():
    loss, _ = bce_loss(np.array([[0.5]]), np.array([[1.0]]))
    assert loss == pytest.approx(np.log(2.0))


def test_bce_clamps_certain_predictions():
    loss, grad = bce_loss(np.array([[0.0], [1.0]]), np.array([[0.0], [1.0]]))
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss < 1e-10


def test_cross_entropy_single_vector_and_range():
    loss, grad = cross_entropy_loss(np.zeros(4), 2)
    assert loss == pytest.approx(np.log(4.0))
    assert grad.shape == (4,)
    assert grad[2] == pytest.approx(-0.75)
    with pytest.raises(ClassOutOfRange):
        cross_entropy_loss(np.zeros((2, 3)), [0, 3])


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        bce_loss(np.full((3, 1), 0.5), np.zeros(3))


def test_dense_rejects_wrong_width():
    with pytest.raises(ShapeMismatch):
        Dense(3, 2).forward(np.zeros((4, 5)), False)


def test_residual_must_preserve_shape():
    with pytest.raises(ShapeMismatch):
        Residual([Conv2D(2, 3, 1)]).output_shape((2, 4, 4))


def test_batchnorm_running_statistics_use_biased_variance():
    layer = BatchNorm(1, momentum=0.5)
    x = np.array([[1.0], [3.0]])
    layer.forward(x, True)
    assert layer.running_mean.data[0] == pytest.approx(0.5 * 0.0 + 0.5 * 2.0)
    assert layer.running_var.data[0] == pytest.approx(0.5 * 1.0 + 0.5 * 1.0)


def test_maxpool_tie_routes_gradient_to_first_position():
    x = np.ones((1, 1, 2, 2))
    layer = MaxPool2D(2)
    y, cache = layer.forward(x, False)
    dx, _ = layer.backward(cache, np.ones_like(y))
    assert dx[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_layer_spec_round_trip():
    layer = Residual([Conv2D(2, 2, 3, padding=1), BatchNorm(2), ReLU()], block_id=2)
    rebuilt = layer_from_spec(layer.to_spec())
    assert rebuilt.to_spec() == layer.to_spec()
    with pytest.raises(WeightsFormatError):
        layer_from_spec({'kind': 'Softmax'})


def test_tensor_grad_shape_and_finiteness():
    with pytest.raises(ShapeMismatch):
        Tensor(np.zeros(3), grad=np.zeros(2))
    with pytest.raises(NonFiniteValue):
        ensure_finite(np.array([1.0, np.nan]), 'Test')
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float64 and t.shape == (3,)


def test_conv_fan_out_initialisation():
    layer = Conv2D(2, 8, 3, fan='out')
    layer.init_parameters(np.random.default_rng(0))
    assert np.abs(layer.weight.data).max() <= np.sqrt(6.0 / (8 * 3 * 3))
    assert np.abs(layer.weight.data).max() > np.sqrt(6.0 / (8 * 3 * 3)) / 2
    assert layer_from_spec(layer.to_spec()).fan == 'out'
    with pytest.raises(WeightsFormatError):
        Conv2D(2, 2, fan='beide')
