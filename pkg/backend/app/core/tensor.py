"""
Tensor-Typ der Netz-Engine.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from backend.app.core.exceptions import NonFiniteValue, ShapeMismatch

ArrayLike = Union['Tensor', np.ndarray, list, tuple, float]


@dataclass
class Tensor:
    """
    n-dimensionales Array (float64, Zeilenordnung) mit optionalem Gradientenpuffer.

    Attributes:
        data: Werte des Tensors
        grad: Gradient gleicher Form oder None
    """
    data: np.ndarray
    grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.grad is not None:
            self.grad = np.ascontiguousarray(self.grad, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                raise ShapeMismatch(
                    f"Gradient hat Form {self.grad.shape}, Tensor aber {self.data.shape}"
                )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @classmethod
    def zeros(cls, shape: Tuple[int, ...]) -> 'Tensor':
        return cls(np.zeros(shape))

    @classmethod
    def ones(cls, shape: Tuple[int, ...]) -> 'Tensor':
        return cls(np.ones(shape))

    def copy(self) -> 'Tensor':
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data


def as_array(value: ArrayLike) -> np.ndarray:
    """Wandelt Tensor oder Array-ähnliche Werte in ein float64-Array um."""
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def ensure_finite(array: np.ndarray, where: str) -> np.ndarray:
    """
    Prüft ein Array auf NaN/Inf.

    Args:
        array: Zu prüfende Werte
        where: Beschreibung der Stelle für die Fehlermeldung

    Returns:
        np.ndarray: Das unveränderte Array

    Raises:
        NonFiniteValue: Wenn ein Wert nicht endlich ist
    """
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NonFiniteValue(f"{bad} nicht-endliche Werte in {where}")
    return array
