"""
Ergebnistypen der Analysen.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

CI = Tuple[float, float]


@dataclass
class SensitivityIndices:
    """
    Sobol-Indizes eines skalaren Ausgangs.

    Attributes:
        names: Faktornamen
        s1: Indizes erster Ordnung
        s1_ci: Konfidenzintervalle zu s1
        st: Totalindizes
        st_ci: Konfidenzintervalle zu st
        s2: k x k Matrix zweiter Ordnung (obere Dreiecksmatrix, Diagonale 0) oder None
        s2_ci: Intervallgrenzen zu s2 als (lo, hi)-Matrizen oder None
        total_variance: Varianz V der Modellausgabe
        n_evaluations: Anzahl Modellauswertungen
        output: Bezeichnung des ausgewerteten Ausgangs
    """
    names: List[str]
    s1: np.ndarray
    s1_ci: List[CI]
    st: np.ndarray
    st_ci: List[CI]
    total_variance: float
    n_evaluations: int
    s2: Optional[np.ndarray] = None
    s2_ci: Optional[Tuple[np.ndarray, np.ndarray]] = None
    output: str = 'output'

    @property
    def k(self) -> int:
        return len(self.names)

    def ci_width(self, which: str = 's1') -> np.ndarray:
        bounds = self.s1_ci if which == 's1' else self.st_ci
        return np.array([hi - lo for lo, hi in bounds])

    def ranking(self, which: str = 's1') -> List[str]:
        """Faktornamen absteigend nach Index sortiert."""
        values = self.s1 if which == 's1' else self.st
        order = sorted(range(self.k), key=lambda i: (-values[i], i))
        return [self.names[i] for i in order]

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {'factor': name, 's1': float(self.s1[i]), 's1_lo': self.s1_ci[i][0], 's1_hi': self.s1_ci[i][1],
             'st': float(self.st[i]), 'st_lo': self.st_ci[i][0], 'st_hi': self.st_ci[i][1]}
            for i, name in enumerate(self.names)
        ]

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'output': self.output,
            'total_variance': self.total_variance,
            'n_evaluations': self.n_evaluations,
            'indices': self.rows(),
        }
        if self.s2 is not None:
            data['s2'] = self.s2.tolist()
        return data

    @classmethod
    def undefined(cls, names: List[str], n_evaluations: int, output: str) -> 'SensitivityIndices':
        """Platzhalter für Ausgänge ohne Varianz (alle Werte NaN)."""
        nan = np.full(len(names), math.nan)
        ci = [(math.nan, math.nan)] * len(names)
        return cls(list(names), nan, ci, nan.copy(), list(ci), 0.0, n_evaluations, output=output)


@dataclass
class SensitivityMap:
    """
    Lokale Sensitivitätskarte eines Kanals für einen Block.

    Attributes:
        values: H x W Matrix der Differenzen s_ij
        block_id: Ausgewerteter Block q
        channel: Farbkanal C
        epsilon: Störung epsilon
        aggregation: Kachelgröße b (1 = keine Vergröberung)
        class_label: Optionale Klasse bei gemittelten Karten
        baseline_norm: Norm des Blocks für das ungestörte Bild
    """
    values: np.ndarray
    block_id: int
    channel: int
    epsilon: float
    aggregation: int = 1
    class_label: Optional[int] = None
    baseline_norm: float = 0.0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def scale_exponent(self) -> int:
        """Zehnerexponent e mit max|s| / 10^e in [0.1, 1); 0 für Nullkarten."""
        peak = float(np.max(np.abs(self.values))) if self.values.size else 0.0
        if peak == 0.0 or not math.isfinite(peak):
            return 0
        return int(math.floor(math.log10(peak))) + 1

    @property
    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.values)))

    def with_values(self, values: np.ndarray, **changes: Any) -> 'SensitivityMap':
        return replace(self, values=values, **changes)


@dataclass
class AMResult:
    """
    Ergebnis der Aktivierungsmaximierung.

    Attributes:
        image: Optimiertes Bild (H x W x C bzw. Eingabeform)
        activation_trace: Aktivierung nach jedem Schritt (Länge = steps)
        initial_activation: Aktivierung des Startbilds
        source_class: Vorhergesagte Klasse des Quellbilds (nur bei klassenübergreifenden Läufen)
    """
    image: np.ndarray
    activation_trace: List[float]
    initial_activation: float
    source_class: Optional[int] = None

    @property
    def final_activation(self) -> float:
        return self.activation_trace[-1]

    @property
    def gain(self) -> float:
        return self.final_activation - self.initial_activation


@dataclass
class AttributionMap:
    """
    Grad-CAM-Karte.

    Attributes:
        values: h x w Karte auf dem Raster der Faltungsschicht (>= 0)
        upsampled: H x W Karte in Bildgröße, auf [0, 1] normiert
        target_class: Klasse, deren Logit erklärt wird
        layer: Index der Faltungsschicht
    """
    values: np.ndarray
    upsampled: np.ndarray
    target_class: int
    layer: int


@dataclass
class PCAResult:
    """
    Hauptkomponentenanalyse.

    Attributes:
        feature_names: Merkmalsnamen
        components: k x k orthonormale Zeilen, absteigend nach Eigenwert
        explained_variance: Eigenwerte
        explained_variance_ratio: Anteile, Summe 1
        mean: Spaltenmittelwerte der Eingabe
    """
    feature_names: List[str]
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray = field(repr=False)

    @property
    def loadings(self) -> Dict[str, np.ndarray]:
        """Gewicht jedes Merkmals in jeder Komponente."""
        return {name: self.components[:, j] for j, name in enumerate(self.feature_names)}

    def n_components_for(self, threshold: float) -> int:
        """Kleinste Anzahl Komponenten, deren kumulierter Anteil threshold erreicht."""
        cumulative = np.cumsum(self.explained_variance_ratio)
        return int(min(np.searchsorted(cumulative, threshold - 1e-12) + 1, len(cumulative)))

    def cumulative_ratio(self, m: int) -> float:
        return float(np.sum(self.explained_variance_ratio[:m]))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.components + self.mean
