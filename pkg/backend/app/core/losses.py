"""
Verlustfunktionen mit Gradienten bezüglich der Netzausgabe.
"""

from typing import Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from backend.app.core.exceptions import ClassOutOfRange, ShapeMismatch
from backend.app.core.tensor import ArrayLike, as_array, ensure_finite

BCE_CLAMP = 1e-12


def bce_loss(pred: ArrayLike, target: ArrayLike) -> Tuple[float, np.ndarray]:
    """
    Binäre Kreuzentropie L = -1/N sum(y log p + (1 - y) log(1 - p)).

    Vorhersagen werden auf [1e-12, 1 - 1e-12] begrenzt, damit log(0) nicht auftritt.

    Args:
        pred: Vorhersagen im Intervall (0, 1)
        target: Zielwerte 0/1, gleiche Form wie pred

    Returns:
        Tuple[float, np.ndarray]: Verlust und Gradient bezüglich pred

    Raises:
        ShapeMismatch: Wenn die Formen nicht übereinstimmen
    """
    p = as_array(pred)
    y = as_array(target)
    if p.shape != y.shape:
        raise ShapeMismatch(f"BCE: Vorhersage {p.shape} und Ziel {y.shape} unterschiedlich")
    ensure_finite(p, "BCE-Vorhersage")
    p = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)) / n
    grad = (p - y) / (p * (1.0 - p)) / n
    return float(loss), grad


def cross_entropy_loss(logits: ArrayLike, target: Union[int, ArrayLike]) -> Tuple[float, np.ndarray]:
    """
    Softmax-Kreuzentropie, gemittelt über den Batch.

    Ein einzelner Klassenvektor (K,) wird mit einem Klassenindex kombiniert,
    ein Batch (N, K) mit N Klassenindizes.

    Args:
        logits: Klassenwerte (K,) oder (N, K)
        target: Klassenindex bzw. Indizes

    Returns:
        Tuple[float, np.ndarray]: Verlust und Gradient softmax(logits) - one_hot

    Raises:
        ClassOutOfRange: Wenn ein Index nicht in [0, K) liegt
        ShapeMismatch: Wenn Logits und Ziele nicht zusammenpassen
    """
    z = as_array(logits)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.ndim != 2:
        raise ShapeMismatch(f"Logits müssen (K,) oder (N, K) sein, erhalten {z.shape}")
    ensure_finite(z, "Logits")
    classes = np.atleast_1d(np.asarray(target))
    if classes.shape != (z.shape[0],):
        raise ShapeMismatch(f"{z.shape[0]} Logit-Zeilen, aber Ziele der Form {classes.shape}")
    if not np.issubdtype(classes.dtype, np.integer):
        if not np.all(np.equal(np.mod(classes, 1), 0)):
            raise ClassOutOfRange(f"Klassenindizes müssen ganzzahlig sein: {classes}")
        classes = classes.astype(np.int64)
    k = z.shape[1]
    if np.any(classes < 0) or np.any(classes >= k):
        raise ClassOutOfRange(f"Klassenindex außerhalb von [0, {k}): {classes}")
    n = z.shape[0]
    rows = np.arange(n)
    loss = -np.sum(log_softmax(z, axis=1)[rows, classes]) / n
    grad = softmax(z, axis=1)
    grad[rows, classes] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)
