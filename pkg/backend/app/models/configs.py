"""
Konfigurationstypen für Training, Sobol-Analyse, lokale Sensitivität und Aktivierungsmaximierung.
"""

from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from backend.app.core.exceptions import ConfigError, PlanError


@dataclass
class TrainConfig:
    """
    Parameter des SGD-Trainings mit L2-Regularisierung.

    Attributes:
        learning_rate: Lernrate eta (> 0)
        l2_lambda: Regularisierungskoeffizient lambda (>= 0)
        epochs: Anzahl Epochen (0 lässt das Netz unverändert)
        batch_size: Größe der Mini-Batches
        seed: Startwert für die Reihenfolge der Mini-Batches
    """
    learning_rate: float = 0.01
    l2_lambda: float = 0.001
    epochs: int = 300
    batch_size: int = 32
    seed: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"Lernrate muss positiv sein: {self.learning_rate}")
        if self.l2_lambda < 0:
            raise ConfigError(f"L2-Koeffizient darf nicht negativ sein: {self.l2_lambda}")
        if self.epochs < 0:
            raise ConfigError(f"Epochenzahl darf nicht negativ sein: {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"Batch-Größe muss positiv sein: {self.batch_size}")


class SobolOrder(str, Enum):
    FIRST_TOTAL = 'first-total'
    FIRST_SECOND_TOTAL = 'first-second-total'


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class SobolPlan:
    """
    Stichprobenplan der Saltelli-Konstruktion.

    Attributes:
        bounds: k Paare (untere, obere Grenze)
        n_base: Basis-Stichprobenumfang N (Zweierpotenz >= 8)
        order: Ob zusätzlich Indizes zweiter Ordnung geschätzt werden
        bootstrap_resamples: Anzahl Bootstrap-Wiederholungen (0 = keine Intervalle)
        confidence_level: Niveau der Konfidenzintervalle
        seed: Startwert (nur Bootstrap)
        skip: Anzahl verworfener Anfangspunkte der Folge
        names: Optionale Faktornamen
    """
    bounds: List[Tuple[float, float]]
    n_base: int = 8192
    order: SobolOrder = SobolOrder.FIRST_TOTAL
    bootstrap_resamples: int = 200
    confidence_level: float = 0.95
    seed: int = 1
    skip: int = 1
    names: Optional[List[str]] = None

    def __post_init__(self):
        self.bounds = [(float(lo), float(hi)) for lo, hi in self.bounds]
        self.order = SobolOrder(self.order)
        if len(self.bounds) < 1:
            raise PlanError("Mindestens ein Faktor erforderlich")
        for i, (lo, hi) in enumerate(self.bounds):
            if not lo < hi:
                raise PlanError(f"Faktor {i}: untere Grenze {lo} nicht kleiner als obere {hi}")
        if not is_power_of_two(self.n_base) or self.n_base < 8:
            raise PlanError(f"N muss eine Zweierpotenz >= 8 sein, erhalten {self.n_base}")
        if self.bootstrap_resamples < 0:
            raise PlanError("Anzahl Bootstrap-Wiederholungen darf nicht negativ sein")
        if not 0.0 < self.confidence_level < 1.0:
            raise PlanError(f"Konfidenzniveau muss in (0, 1) liegen: {self.confidence_level}")
        if self.skip < 0:
            raise PlanError("skip darf nicht negativ sein")
        if self.names is None:
            self.names = [f"x{i + 1}" for i in range(len(self.bounds))]
        elif len(self.names) != len(self.bounds):
            raise PlanError(f"{len(self.names)} Namen für {len(self.bounds)} Faktoren")

    @property
    def k(self) -> int:
        return len(self.bounds)

    @property
    def second_order(self) -> bool:
        return self.order == SobolOrder.FIRST_SECOND_TOTAL

    @property
    def n_rows(self) -> int:
        """Zeilen des Stichprobenblocks: N(k+2) bzw. N(2k+2)."""
        per_sample = 2 * self.k + 2 if self.second_order else self.k + 2
        return self.n_base * per_sample

    def with_n(self, n_base: int) -> 'SobolPlan':
        data = asdict(self)
        data['n_base'] = n_base
        return SobolPlan(**data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['order'] = self.order.value
        data['bounds'] = [list(b) for b in self.bounds]
        return data


@dataclass(frozen=True)
class OutputSelector:
    """
    Auswahl der analysierten Netzausgänge.

    Attributes:
        layer: None für die Netzausgabe, sonst Index der verborgenen Schicht
    """
    layer: Optional[int] = None

    @property
    def is_output(self) -> bool:
        return self.layer is None


# Aktivierungsmaximierung

@dataclass(frozen=True)
class LayerNeuron:
    """Ziel: Neuron mit Index index in der Ausgabe der Schicht layer."""
    layer: int
    index: int


@dataclass(frozen=True)
class ClassLogit:
    """Ziel: Logit (bzw. Ausgabe) der Klasse cls."""
    cls: int


@dataclass(frozen=True)
class UniformRandom:
    """Start: gleichverteilt im Bereich value_range, reproduzierbar über seed."""
    seed: int = 1
    value_range: Optional[Tuple[float, float]] = None


@dataclass(frozen=True)
class FromImage:
    """Start: gegebenes Bild (H x W x C bzw. Eingabeform des Netzes)."""
    image: Any


class Regularizer(str, Enum):
    NONE = 'none'
    TOTAL_VARIATION = 'tv'
    OPERATOR = 'blur'


@dataclass
class AMConfig:
    """
    Konfiguration der Aktivierungsmaximierung.

    Attributes:
        target: LayerNeuron oder ClassLogit
        eps1: Schrittweite des Aktivierungsgradienten (> 0, 0 nur für Prüfläufe)
        eps2: Gewicht des TV-Gradienten (>= 0)
        steps: Anzahl Iterationen (>= 1)
        init: UniformRandom oder FromImage
        regularizer: none, tv oder blur
        blur_sigma: Sigma des Gauß-Operators
        blur_radius: Radius des Gauß-Kerns
        clamp: Wertebereich nach jedem Schritt
    """
    target: Union[LayerNeuron, ClassLogit]
    eps1: float = 0.1
    eps2: float = 0.1
    steps: int = 200
    init: Union[UniformRandom, FromImage] = field(default_factory=UniformRandom)
    regularizer: Regularizer = Regularizer.NONE
    blur_sigma: float = 1.0
    blur_radius: int = 2
    clamp: Tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        self.regularizer = Regularizer(self.regularizer)
        if self.steps < 1:
            raise ConfigError(f"steps muss >= 1 sein, erhalten {self.steps}")
        if self.eps1 < 0 or self.eps2 < 0:
            raise ConfigError("eps1 und eps2 dürfen nicht negativ sein")
        lo, hi = self.clamp
        if not lo < hi:
            raise ConfigError(f"Ungültiger Clamp-Bereich {self.clamp}")
        if self.regularizer == Regularizer.OPERATOR:
            if not self.blur_sigma > 0:
                raise ConfigError(f"Blur-Sigma muss positiv sein: {self.blur_sigma}")
            if self.blur_radius < 1:
                raise ConfigError(f"Blur-Radius muss >= 1 sein: {self.blur_radius}")

    def init_array(self, shape: Tuple[int, ...]) -> np.ndarray:
        """Erzeugt das Startbild x0 in der gewünschten Form."""
        if isinstance(self.init, FromImage):
            image = np.asarray(self.init.image, dtype=np.float64)
            if image.shape != tuple(shape):
                raise ConfigError(f"Startbild hat Form {image.shape}, erwartet {tuple(shape)}")
            return image.copy()
        lo, hi = self.init.value_range or self.clamp
        return np.random.default_rng(self.init.seed).uniform(lo, hi, size=shape)
