"""
Schichten der Netz-Engine mit Vorwärts- und Rückwärtsrechnung.

Jede Schicht liefert im Vorwärtsschritt neben der Ausgabe einen Cache, den der
Rückwärtsschritt wieder entgegennimmt. Schichten halten selbst keinen Zustand
eines einzelnen Aufrufs; im Eval-Modus ist der Vorwärtsschritt damit eine reine
Funktion von Gewichten und Eingabe.
"""

import logging
from collections import OrderedDict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from backend.app.core.exceptions import ShapeMismatch, WeightsFormatError
from backend.app.core.tensor import Tensor

logger = logging.getLogger(__name__)

Grads = Dict[str, np.ndarray]


class Layer:
    """
    Basisklasse aller Schichten.

    Attributes:
        kind: Schichttyp (Dense, Conv2D, BatchNorm, ReLU, Sigmoid, MaxPool2D, Residual, Flatten)
        block_id: Optionale Nummer des umschließenden Blocks
    """

    kind = 'Layer'

    def __init__(self, block_id: Optional[int] = None):
        self.block_id = block_id

    def parameters(self) -> 'OrderedDict[str, Tensor]':
        """Trainierbare Parameter in fester Reihenfolge."""
        return OrderedDict()

    def buffers(self) -> 'OrderedDict[str, Tensor]':
        """Nicht trainierbare Zustände (laufende Statistiken)."""
        return OrderedDict()

    def init_parameters(self, rng: np.random.Generator) -> None:
        """Initialisiert die Parameter; Standard: nichts zu tun."""

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return tuple(input_shape)

    def forward(self, x: np.ndarray, train: bool) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, cache: Any, dy: np.ndarray) -> Tuple[np.ndarray, Grads]:
        raise NotImplementedError

    def attributes(self) -> Dict[str, Any]:
        """Typspezifische Hyperparameter für Sidecar und Binärformat."""
        return {}

    def to_spec(self) -> Dict[str, Any]:
        spec = {'kind': self.kind}
        spec.update(self.attributes())
        if self.block_id is not None:
            spec['block'] = self.block_id
        return spec

    def __repr__(self) -> str:
        attrs = ', '.join(f"{k}={v}" for k, v in self.attributes().items())
        return f"{self.kind}({attrs})"


def _kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan)
    return rng.uniform(-bound, bound, size=shape)


class Dense(Layer):
    """Vollständig verbundene Schicht y = x W^T + b."""

    kind = 'Dense'

    def __init__(self, in_dim: int, out_dim: int, block_id: Optional[int] = None):
        super().__init__(block_id)
        if in_dim < 1 or out_dim < 1:
            raise ShapeMismatch(f"Dense braucht positive Dimensionen, erhalten {in_dim}->{out_dim}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.weight = Tensor(np.zeros((self.out_dim, self.in_dim)))
        self.bias = Tensor(np.zeros(self.out_dim))

    def parameters(self):
        return OrderedDict([('weight', self.weight), ('bias', self.bias)])

    def init_parameters(self, rng):
        self.weight.data[...] = _kaiming_uniform(rng, self.weight.shape, self.in_dim)
        self.bias.data[...] = 0.0

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_dim,):
            raise ShapeMismatch(f"Dense erwartet ({self.in_dim},), erhalten {tuple(input_shape)}")
        return (self.out_dim,)

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"Dense erwartet (N, {self.in_dim}), erhalten {x.shape}")
        return x @ self.weight.data.T + self.bias.data, x

    def backward(self, cache, dy):
        x = cache
        grads = {'weight': dy.T @ x, 'bias': dy.sum(axis=0)}
        return dy @ self.weight.data, grads

    def attributes(self):
        return {'in': self.in_dim, 'out': self.out_dim}


class Conv2D(Layer):
    """Zweidimensionale Faltung auf N x C x H x W mit Null-Padding."""

    kind = 'Conv2D'

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, padding: int = 0, block_id: Optional[int] = None, fan: str = 'in'):
        super().__init__(block_id)
        if min(in_channels, out_channels, kernel, stride) < 1 or padding < 0:
            raise ShapeMismatch("Conv2D braucht positive Kanäle, Kern und Schrittweite")
        if fan not in ('in', 'out'):
            raise WeightsFormatError(f"Conv2D: fan muss 'in' oder 'out' sein, erhalten {fan!r}")
        self.fan = fan
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.weight = Tensor(np.zeros((self.out_channels, self.in_channels, self.kernel, self.kernel)))
        self.bias = Tensor(np.zeros(self.out_channels))

    def parameters(self):
        return OrderedDict([('weight', self.weight), ('bias', self.bias)])

    def init_parameters(self, rng):
        # Varianz 2 / (Kanäle * k * k), Kanäle je nach fan am Ein- oder Ausgang
        channels = self.in_channels if self.fan == 'in' else self.out_channels
        self.weight.data[...] = _kaiming_uniform(rng, self.weight.shape, channels * self.kernel * self.kernel)
        self.bias.data[...] = 0.0

    def _out_hw(self, h: int, w: int) -> Tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return ho, wo

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeMismatch(
                f"Conv2D erwartet ({self.in_channels}, H, W), erhalten {tuple(input_shape)}"
            )
        ho, wo = self._out_hw(input_shape[1], input_shape[2])
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"Conv2D-Kern {self.kernel} größer als Eingabe {tuple(input_shape)}")
        return (self.out_channels, ho, wo)

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"Conv2D erwartet (N, {self.in_channels}, H, W), erhalten {x.shape}")
        self.output_shape(x.shape[1:])
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        windows = windows[:, :, ::self.stride, ::self.stride]
        # (N, C, Ho, Wo, k, k) x (O, C, k, k) -> (N, Ho, Wo, O)
        y = np.tensordot(windows, self.weight.data, axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + self.bias.data[None, :, None, None]
        return np.ascontiguousarray(y), (x.shape, xp.shape, windows)

    def backward(self, cache, dy):
        x_shape, xp_shape, windows = cache
        s, k, p = self.stride, self.kernel, self.padding
        ho, wo = dy.shape[2], dy.shape[3]
        grads = {
            'weight': np.tensordot(dy, windows, axes=([0, 2, 3], [0, 2, 3])),
            'bias': dy.sum(axis=(0, 2, 3)),
        }
        dxp = np.zeros(xp_shape)
        for a in range(k):
            for b in range(k):
                contrib = np.tensordot(dy, self.weight.data[:, :, a, b], axes=([1], [0]))
                dxp[:, :, a:a + s * ho:s, b:b + s * wo:s] += contrib.transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + x_shape[2], p:p + x_shape[3]] if p else dxp
        return dx, grads

    def attributes(self):
        return {'in': self.in_channels, 'out': self.out_channels, 'kernel': self.kernel,
                'stride': self.stride, 'padding': self.padding, 'fan': self.fan}


class BatchNorm(Layer):
    """
    Batch-Normalisierung über die Batch-Achse (2D) bzw. Batch und Raum (4D).

    Train-Modus: Batch-Mittelwert und -Varianz (1/N), Normierung mit eps,
    Skalierung gamma und Verschiebung beta. Die laufenden Statistiken werden
    exponentiell mit momentum nachgeführt. Eval-Modus nutzt die laufenden Werte.
    """

    kind = 'BatchNorm'

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1,
                 block_id: Optional[int] = None):
        super().__init__(block_id)
        self.num_features = int(num_features)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(self.num_features))
        self.beta = Tensor(np.zeros(self.num_features))
        self.running_mean = Tensor(np.zeros(self.num_features))
        self.running_var = Tensor(np.ones(self.num_features))

    def parameters(self):
        return OrderedDict([('gamma', self.gamma), ('beta', self.beta)])

    def buffers(self):
        return OrderedDict([('running_mean', self.running_mean), ('running_var', self.running_var)])

    def init_parameters(self, rng):
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean.data[...] = 0.0
        self.running_var.data[...] = 1.0

    def output_shape(self, input_shape):
        if len(input_shape) not in (1, 3) or input_shape[0] != self.num_features:
            raise ShapeMismatch(
                f"BatchNorm erwartet {self.num_features} Merkmale/Kanäle, erhalten {tuple(input_shape)}"
            )
        return tuple(input_shape)

    def _layout(self, x: np.ndarray) -> Tuple[Tuple[int, ...], Tuple[Any, ...]]:
        if x.ndim == 2 and x.shape[1] == self.num_features:
            return (0,), (None, slice(None))
        if x.ndim == 4 and x.shape[1] == self.num_features:
            return (0, 2, 3), (None, slice(None), None, None)
        raise ShapeMismatch(f"BatchNorm mit {self.num_features} Merkmalen erhält {x.shape}")

    def forward(self, x, train):
        axes, bc = self._layout(x)
        gamma, beta = self.gamma.data[bc], self.beta.data[bc]
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean[bc]) * inv_std[bc]
            m = self.momentum
            self.running_mean.data[...] = (1.0 - m) * self.running_mean.data + m * mean
            self.running_var.data[...] = (1.0 - m) * self.running_var.data + m * var
        else:
            inv_std = 1.0 / np.sqrt(self.running_var.data + self.eps)
            x_hat = (x - self.running_mean.data[bc]) * inv_std[bc]
        return gamma * x_hat + beta, (train, axes, bc, x_hat, inv_std)

    def backward(self, cache, dy):
        train, axes, bc, x_hat, inv_std = cache
        grads = {'gamma': (dy * x_hat).sum(axis=axes), 'beta': dy.sum(axis=axes)}
        dx_hat = dy * self.gamma.data[bc]
        if not train:
            return dx_hat * inv_std[bc], grads
        m = dy.size // self.num_features
        sum_dx_hat = dx_hat.sum(axis=axes)
        sum_dx_hat_x = (dx_hat * x_hat).sum(axis=axes)
        dx = (inv_std[bc] / m) * (m * dx_hat - sum_dx_hat[bc] - x_hat * sum_dx_hat_x[bc])
        return dx, grads

    def attributes(self):
        return {'features': self.num_features, 'eps': self.eps, 'momentum': self.momentum}


class ReLU(Layer):
    kind = 'ReLU'

    def forward(self, x, train):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, cache, dy):
        return dy * cache, {}


class Sigmoid(Layer):
    kind = 'Sigmoid'

    def forward(self, x, train):
        y = expit(x)
        return y, y

    def backward(self, cache, dy):
        y = cache
        return dy * y * (1.0 - y), {}


class Flatten(Layer):
    kind = 'Flatten'

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), {}


class MaxPool2D(Layer):
    """Max-Pooling mit quadratischem Fenster, Schrittweite gleich Fenstergröße."""

    kind = 'MaxPool2D'

    def __init__(self, size: int = 2, block_id: Optional[int] = None):
        super().__init__(block_id)
        if size < 1:
            raise ShapeMismatch(f"Ungültige Poolgröße {size}")
        self.size = int(size)

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeMismatch(f"MaxPool2D erwartet (C, H, W), erhalten {tuple(input_shape)}")
        c, h, w = input_shape
        if h < self.size or w < self.size:
            raise ShapeMismatch(f"MaxPool2D-Fenster {self.size} größer als Eingabe {tuple(input_shape)}")
        return (c, h // self.size, w // self.size)

    def forward(self, x, train):
        if x.ndim != 4:
            raise ShapeMismatch(f"MaxPool2D erwartet (N, C, H, W), erhalten {x.shape}")
        n, c, _, _ = x.shape
        _, ho, wo = self.output_shape(x.shape[1:])
        k = self.size
        tiles = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
        tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        # argmax liefert bei Gleichstand den ersten Index (zeilenweise im Fenster)
        idx = tiles.argmax(axis=-1)
        y = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, dy):
        x_shape, idx = cache
        n, c, h, w = x_shape
        ho, wo = idx.shape[2], idx.shape[3]
        k = self.size
        tiles = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(tiles, idx[..., None], dy[..., None], axis=-1)
        tiles = tiles.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape)
        dx[:, :, :ho * k, :wo * k] = tiles.reshape(n, c, ho * k, wo * k)
        return dx, {}

    def attributes(self):
        return {'size': self.size}


class Residual(Layer):
    """Residualblock Res(x) = x + F(x), F ist der innere Schichtstapel."""

    kind = 'Residual'

    def __init__(self, inner: List[Layer], block_id: Optional[int] = None):
        super().__init__(block_id)
        if not inner:
            raise ShapeMismatch("Residualblock braucht mindestens eine innere Schicht")
        self.inner = list(inner)

    def _collect(self, attr: str) -> 'OrderedDict[str, Tensor]':
        collected = OrderedDict()
        for i, layer in enumerate(self.inner):
            for name, tensor in getattr(layer, attr)().items():
                collected[f"inner.{i}.{name}"] = tensor
        return collected

    def parameters(self):
        return self._collect('parameters')

    def buffers(self):
        return self._collect('buffers')

    def init_parameters(self, rng):
        for layer in self.inner:
            layer.init_parameters(rng)

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.inner:
            shape = layer.output_shape(shape)
        if shape != tuple(input_shape):
            raise ShapeMismatch(
                f"Residualblock verändert die Form {tuple(input_shape)} -> {shape}"
            )
        return shape

    def forward(self, x, train):
        h = x
        caches = []
        for layer in self.inner:
            h, cache = layer.forward(h, train)
            caches.append(cache)
        if h.shape != x.shape:
            raise ShapeMismatch(f"Residualblock verändert die Form {x.shape} -> {h.shape}")
        return x + h, caches

    def backward(self, cache, dy):
        grads = {}
        dh = dy
        for i in reversed(range(len(self.inner))):
            dh, layer_grads = self.inner[i].backward(cache[i], dh)
            for name, g in layer_grads.items():
                grads[f"inner.{i}.{name}"] = g
        return dy + dh, grads

    def to_spec(self):
        spec = super().to_spec()
        spec['inner'] = [layer.to_spec() for layer in self.inner]
        return spec

    def __repr__(self):
        return f"Residual({', '.join(repr(layer) for layer in self.inner)})"


LAYER_KINDS = {
    cls.kind: cls for cls in (Dense, Conv2D, BatchNorm, ReLU, Sigmoid, MaxPool2D, Residual, Flatten)
}


def layer_from_spec(spec: Dict[str, Any]) -> Layer:
    """
    Erstellt eine Schicht aus ihrer Sidecar-Beschreibung.

    Args:
        spec: Dictionary mit 'kind', typspezifischen Feldern und optional 'block'

    Returns:
        Layer: Die (noch nicht initialisierte) Schicht

    Raises:
        WeightsFormatError: Bei unbekanntem Typ oder fehlenden Feldern
    """
    kind = spec.get('kind')
    block = spec.get('block')
    try:
        if kind == 'Dense':
            return Dense(spec['in'], spec['out'], block_id=block)
        if kind == 'Conv2D':
            return Conv2D(spec['in'], spec['out'], spec.get('kernel', 3), spec.get('stride', 1),
                          spec.get('padding', 0), block_id=block, fan=spec.get('fan', 'in'))
        if kind == 'BatchNorm':
            return BatchNorm(spec['features'], spec.get('eps', 1e-5), spec.get('momentum', 0.1),
                             block_id=block)
        if kind == 'MaxPool2D':
            return MaxPool2D(spec.get('size', 2), block_id=block)
        if kind == 'Residual':
            return Residual([layer_from_spec(s) for s in spec['inner']], block_id=block)
        if kind in ('ReLU', 'Sigmoid', 'Flatten'):
            return LAYER_KINDS[kind](block_id=block)
    except KeyError as e:
        raise WeightsFormatError(f"Feld {e} fehlt in der Schichtbeschreibung {spec}")
    raise WeightsFormatError(f"Unbekannter Schichttyp: {kind}")
