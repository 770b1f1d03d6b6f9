"""
Gemeinsame Fixtures der Tests.
"""

import os
import sys

import numpy as np
import pytest

# Projektverzeichnis in den Python-Pfad, wie in backend/run.py
sys.path.insert(0, os.path.abspath(os.path.dirname(os.path.dirname(__file__))))

from backend.app.core.data_manager import make_toy_images, make_toy_tabular  # noqa: E402
from backend.app.core.layers import Conv2D, Dense, Flatten, Sigmoid  # noqa: E402
from backend.app.core.network import Network  # noqa: E402

FD_STEP = 1e-5


def _numeric_grad(f, x, h=FD_STEP):
    """Zentrale Differenzen von f nach jedem Element von x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        plus, minus = x.copy(), x.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        grad.flat[i] = (f(plus) - f(minus)) / (2.0 * h)
    return grad


def _rel_error(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-8))


@pytest.fixture
def numeric_grad():
    return _numeric_grad


@pytest.fixture
def rel_error():
    return _rel_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sigmoid_image_net():
    """Glattes Bildnetz 3x6x6: Conv-Sigmoid (Block 1), Conv-Sigmoid (Block 2), Kopf (Block 3)."""
    layers = [
        Conv2D(3, 4, 3, padding=1, block_id=1), Sigmoid(1),
        Conv2D(4, 4, 3, padding=1, block_id=2), Sigmoid(2),
        Flatten(3), Dense(4 * 6 * 6, 3, 3),
    ]
    return Network(layers, (3, 6, 6), name='sigmoid-tiny').init_parameters(7)


@pytest.fixture(scope='session')
def toy_tabular():
    return make_toy_tabular(768, seed=1)


@pytest.fixture(scope='session')
def toy_images():
    return make_toy_images(n_per_class=8, size=8, seed=3)


@pytest.fixture
def tabular_csv(tmp_path, toy_tabular):
    from backend.app.core.data_manager import write_tabular_csv
    return write_tabular_csv(toy_tabular, str(tmp_path / 'diabetes.csv'))
