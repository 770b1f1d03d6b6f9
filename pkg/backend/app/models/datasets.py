"""
Datensatztypen für Tabellen- und Bilddaten.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from backend.app.core.exceptions import ClassOutOfRange, InconsistentDims

DIABETES_FEATURES = [
    'Pregnancies', 'Glucose', 'BloodPressure', 'SkinThickness',
    'Insulin', 'BMI', 'DiabetesPedigreeFunction', 'Age',
]
DIABETES_LABEL = 'Outcome'


@dataclass
class TabularDataset:
    """
    Tabellendaten mit binärem Ziel.

    Attributes:
        feature_names: Spaltennamen der Merkmale
        X: n x k Merkmalsmatrix
        y: n Zielwerte 0/1
        normalization: Je Merkmal (Mittelwert, Standardabweichung) aus dem Trainingsteil, sonst None
        constant_features: Merkmale mit Standardabweichung 0 im Trainingsteil
    """
    feature_names: List[str]
    X: np.ndarray
    y: np.ndarray
    normalization: Optional[List[Tuple[float, float]]] = None
    constant_features: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.y), len(self.feature_names))
        self.y = np.asarray(self.y, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def k(self) -> int:
        return len(self.feature_names)

    def bounds(self) -> List[Tuple[float, float]]:
        """Empirische [min, max] je Merkmal; konstante Merkmale erhalten eine Breite von 1."""
        lo, hi = self.X.min(axis=0), self.X.max(axis=0)
        return [(float(a), float(b)) if b > a else (float(a) - 0.5, float(a) + 0.5) for a, b in zip(lo, hi)]

    def with_rows(self, rows: np.ndarray) -> 'TabularDataset':
        return replace(self, X=self.X[rows], y=self.y[rows])


@dataclass
class ImageDataset:
    """
    Bilddaten mit Klassenlabels.

    Pixel werden als 8-Bit-Werte gehalten; normalized() liefert
    (x / 255 - mean_c) / std_c je Kanal.

    Attributes:
        images: n x H x W x C Pixel (uint8)
        labels: n Klassenindizes
        class_names: Klassennamen
        mean: Mittelwert je Kanal (Standard 0.5)
        std: Standardabweichung je Kanal (Standard 0.5)
    """
    images: np.ndarray
    labels: np.ndarray
    class_names: List[str]
    mean: Tuple[float, ...] = (0.5,)
    std: Tuple[float, ...] = (0.5,)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InconsistentDims(f"Bilder müssen n x H x W x C sein, erhalten {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise InconsistentDims(f"{len(self.images)} Bilder, aber {len(self.labels)} Labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ClassOutOfRange(f"Labels außerhalb von [0, {len(self.class_names)})")
        c = self.images.shape[3]
        self.mean = tuple(self.mean) * c if len(self.mean) == 1 else tuple(self.mean)
        self.std = tuple(self.std) * c if len(self.std) == 1 else tuple(self.std)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        """(H, W, C) eines Bildes."""
        return tuple(self.images.shape[1:])

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        """Eingabeform des Netzes (C, H, W)."""
        h, w, c = self.shape
        return (c, h, w)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def normalized(self, index: Optional[int] = None) -> np.ndarray:
        """Normierte Bilder H x W x C (ein Bild) bzw. n x H x W x C."""
        pixels = self.images if index is None else self.images[index]
        return (pixels / 255.0 - np.asarray(self.mean)) / np.asarray(self.std)

    def denormalize(self, image: np.ndarray) -> np.ndarray:
        """Umkehrung von normalized(), gerundet auf uint8."""
        pixels = (np.asarray(image) * np.asarray(self.std) + np.asarray(self.mean)) * 255.0
        return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)

    def network_inputs(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """Normierte Bilder in Netzreihenfolge n x C x H x W."""
        pixels = self.images if indices is None else self.images[indices]
        data = (pixels / 255.0 - np.asarray(self.mean)) / np.asarray(self.std)
        return np.ascontiguousarray(data.transpose(0, 3, 1, 2))

    def indices_of(self, cls: int) -> np.ndarray:
        return np.nonzero(self.labels == cls)[0]

    def subset(self, indices: np.ndarray) -> 'ImageDataset':
        return replace(self, images=self.images[indices], labels=self.labels[indices])

    def metadata(self) -> Dict[str, object]:
        return {'class_names': list(self.class_names), 'mean': list(self.mean), 'std': list(self.std),
                'image_shape': list(self.shape)}
