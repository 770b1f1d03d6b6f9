"""
Varianzbasierte globale Sensitivitätsanalyse nach Sobol.

Ablauf:
    1. Quasi-Zufallsfolge (Joe-Kuo-Richtungszahlen) in 2k Dimensionen
    2. Saltelli-Block aus A, AB_i, (BA_i), B, je Basisprobe zusammenhängend
    3. Auswertung des Modells in Teilblöcken, optional parallel
    4. Schätzer: S1 nach Saltelli, ST nach Jansen, S2 aus BA_j/AB_k
    5. Bootstrap-Konfidenzintervalle über die N Basisproben
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.stats import qmc

from backend.app.core.exceptions import (
    DimensionUnsupported, PlanError, ShapeMismatch, ZeroVariance,
)
from backend.app.core.network import Mode, Network, forward, map_chunks, require_eval
from backend.app.core.tensor import ensure_finite
from backend.app.models.configs import OutputSelector, SobolPlan
from backend.app.models.results import CI, SensitivityIndices

logger = logging.getLogger(__name__)

MAX_DIM = qmc.Sobol.MAXDIM
BOOTSTRAP_CHUNK_ELEMENTS = 4_000_000

ModelFn = Callable[[np.ndarray], np.ndarray]


def sobol_sequence(dim: int, n: int, skip: int = 1) -> np.ndarray:
    """
    Unverwürfelte Sobol-Folge.

    Args:
        dim: Dimension (1 bis 21201)
        n: Anzahl Punkte
        skip: Anzahl übersprungener Anfangspunkte

    Returns:
        np.ndarray: n x dim Punkte in [0, 1)

    Raises:
        DimensionUnsupported: Wenn dim die Tabelle der Richtungszahlen übersteigt
    """
    if dim < 1 or dim > MAX_DIM:
        raise DimensionUnsupported(f"Dimension {dim} nicht in [1, {MAX_DIM}]")
    if n < 1 or skip < 0:
        raise PlanError(f"Ungültige Punktzahl n={n} oder skip={skip}")
    engine = qmc.Sobol(d=dim, scramble=False)
    if skip:
        engine.fast_forward(skip)
    with warnings.catch_warnings():
        # Balance-Warnung bei n bzw. skip ungleich Zweierpotenz
        warnings.simplefilter('ignore', UserWarning)
        return engine.random(n)


def _per_sample(plan: SobolPlan) -> int:
    return 2 * plan.k + 2 if plan.second_order else plan.k + 2


def saltelli_matrices(plan: SobolPlan) -> np.ndarray:
    """
    Saltelli-Stichprobenblock, auf die Faktorgrenzen skaliert.

    Je Basisprobe j folgen die Zeilen A_j, AB_1..AB_k, (BA_1..BA_k), B_j.

    Returns:
        np.ndarray: n_rows x k Eingabematrix
    """
    k, n = plan.k, plan.n_base
    base = sobol_sequence(2 * k, n, plan.skip)
    A, B = base[:, :k], base[:, k:]
    block = np.empty((n, _per_sample(plan), k))
    block[:, 0] = A
    for i in range(k):
        block[:, 1 + i] = A
        block[:, 1 + i, i] = B[:, i]
        if plan.second_order:
            block[:, 1 + k + i] = B
            block[:, 1 + k + i, i] = A[:, i]
    block[:, -1] = B
    lo = np.array([b[0] for b in plan.bounds])
    hi = np.array([b[1] for b in plan.bounds])
    return (lo + block * (hi - lo)).reshape(plan.n_rows, k)


@dataclass
class _Parts:
    fA: np.ndarray
    fB: np.ndarray
    fAB: np.ndarray
    fBA: Optional[np.ndarray]


def _split(outputs: np.ndarray, plan: SobolPlan) -> Tuple[_Parts, float]:
    y = np.asarray(outputs, dtype=np.float64).reshape(-1)
    if y.shape[0] != plan.n_rows:
        raise ShapeMismatch(f"{y.shape[0]} Modellwerte, Stichprobenblock hat {plan.n_rows} Zeilen")
    ensure_finite(y, "Modellausgabe")
    rows = y.reshape(plan.n_base, _per_sample(plan))
    k = plan.k
    pooled = np.concatenate([rows[:, 0], rows[:, -1]])
    variance, mean = float(np.var(pooled)), float(np.mean(pooled))
    if variance < 1e-12 * mean ** 2 + 1e-30:
        raise ZeroVariance(f"Modellausgabe ist konstant (V={variance:.3g}), Indizes nicht definiert")
    # Standardisierung über den gesamten Block: Indizes invariant unter f -> a f + b
    z = (rows - np.mean(rows)) / np.std(rows)
    parts = _Parts(fA=z[:, 0], fB=z[:, -1], fAB=z[:, 1:k + 1],
                   fBA=z[:, k + 1:2 * k + 1] if plan.second_order else None)
    return parts, variance


def _estimate(fA: np.ndarray, fB: np.ndarray, fAB: np.ndarray,
              fBA: Optional[np.ndarray]) -> Dict[str, np.ndarray]:
    """
    Schätzer auf (..., N) bzw. (..., N, k) Arrays; führende Achsen sind Bootstrap-Wiederholungen.
    """
    v = np.var(np.concatenate([fA, fB], axis=-1), axis=-1)[..., None]
    a, b = fA[..., None], fB[..., None]
    s1 = np.mean(b * (fAB - a), axis=-2) / v
    st = 0.5 * np.mean((a - fAB) ** 2, axis=-2) / v
    result = {'s1': s1, 'st': st}
    if fBA is not None:
        n = fA.shape[-1]
        cross = np.einsum('...nj,...nk->...jk', fBA, fAB) / n
        cross -= np.mean(fA * fB, axis=-1)[..., None, None]
        s2 = cross / v[..., None] - s1[..., :, None] - s1[..., None, :]
        k = s1.shape[-1]
        result['s2'] = s2 * np.triu(np.ones((k, k)), 1)
    return result


def _widen(lo: np.ndarray, hi: np.ndarray, point: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lo = np.where(np.isfinite(lo), np.minimum(lo, point), point)
    hi = np.where(np.isfinite(hi), np.maximum(hi, point), point)
    return lo, hi


def _bootstrap(parts: _Parts, point: Dict[str, np.ndarray], plan: SobolPlan) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    if plan.bootstrap_resamples == 0:
        return {key: (value.copy(), value.copy()) for key, value in point.items()}
    keys = list(point)
    sizes = [point[key].size for key in keys]

    def statistic(idx: np.ndarray, axis: int = -1) -> np.ndarray:
        # idx: (n,) für den Punktschätzer, (batch, n) für die Wiederholungen
        idx = np.asarray(idx, dtype=np.intp)
        est = _estimate(parts.fA[idx], parts.fB[idx], parts.fAB[idx],
                        None if parts.fBA is None else parts.fBA[idx])
        lead = idx.shape[:-1]
        flat = np.concatenate([est[key].reshape(lead + (-1,)) for key in keys], axis=-1)
        return np.moveaxis(flat, -1, 0)

    batch = max(1, BOOTSTRAP_CHUNK_ELEMENTS // (plan.n_base * _per_sample(plan)))
    with warnings.catch_warnings(), np.errstate(divide='ignore', invalid='ignore'):
        warnings.simplefilter('ignore', RuntimeWarning)
        res = stats.bootstrap((np.arange(plan.n_base),), statistic, vectorized=True, paired=False,
                              n_resamples=plan.bootstrap_resamples, batch=batch,
                              confidence_level=plan.confidence_level, method='percentile',
                              random_state=np.random.default_rng(plan.seed))
    low = np.asarray(res.confidence_interval.low, dtype=np.float64)
    high = np.asarray(res.confidence_interval.high, dtype=np.float64)
    intervals = {}
    offset = 0
    for key, size in zip(keys, sizes):
        shape = point[key].shape
        lo = low[offset:offset + size].reshape(shape)
        hi = high[offset:offset + size].reshape(shape)
        intervals[key] = _widen(lo, hi, point[key])
        offset += size
    return intervals


def bootstrap_ci(outputs: np.ndarray, plan: SobolPlan) -> Dict[str, object]:
    """
    Perzentil-Konfidenzintervalle durch Ziehen der N Basisproben mit Zurücklegen.

    A, B und AB_i einer Basisprobe werden gemeinsam gezogen. Intervalle werden
    bei Bedarf so erweitert, dass sie den Punktschätzer enthalten.

    Returns:
        Dict[str, object]: 's1', 'st' als Listen von (lo, hi); 's2' als (lo, hi)-Matrizen oder None
    """
    parts, _ = _split(outputs, plan)
    point = _estimate(parts.fA, parts.fB, parts.fAB, parts.fBA)
    intervals = _bootstrap(parts, point, plan)
    return {
        's1': _pairs(*intervals['s1']),
        'st': _pairs(*intervals['st']),
        's2': intervals.get('s2'),
    }


def _pairs(lo: np.ndarray, hi: np.ndarray) -> List[CI]:
    return [(float(a), float(b)) for a, b in zip(lo, hi)]


def estimate_indices(outputs: np.ndarray, plan: SobolPlan, output: str = 'output') -> SensitivityIndices:
    """
    Sobol-Indizes eines skalaren Ausgangs aus den Modellwerten des Saltelli-Blocks.

    Args:
        outputs: n_rows Modellwerte in der Reihenfolge von saltelli_matrices
        plan: Stichprobenplan
        output: Bezeichnung des Ausgangs

    Returns:
        SensitivityIndices: Punktschätzer mit Bootstrap-Intervallen

    Raises:
        ZeroVariance: Wenn die Ausgabe konstant ist
        ShapeMismatch: Wenn die Anzahl der Werte nicht zum Plan passt
    """
    parts, variance = _split(outputs, plan)
    point = _estimate(parts.fA, parts.fB, parts.fAB, parts.fBA)
    intervals = _bootstrap(parts, point, plan)
    return SensitivityIndices(
        names=list(plan.names),
        s1=point['s1'],
        s1_ci=_pairs(*intervals['s1']),
        st=point['st'],
        st_ci=_pairs(*intervals['st']),
        total_variance=variance,
        n_evaluations=plan.n_rows,
        s2=point.get('s2'),
        s2_ci=intervals.get('s2'),
        output=output,
    )


def analyze_function(fn: ModelFn, plan: SobolPlan, threads: int = 1,
                     output_names: Optional[Sequence[str]] = None,
                     on_zero_variance: str = 'raise') -> List[SensitivityIndices]:
    """
    Sobol-Analyse einer beliebigen Modellfunktion.

    Args:
        fn: Abbildung (n, k) -> (n,) oder (n, m)
        plan: Stichprobenplan
        threads: Anzahl paralleler Auswertungen
        output_names: Namen der m Ausgänge
        on_zero_variance: 'raise' oder 'nan' (konstante Ausgänge erhalten NaN-Indizes)

    Returns:
        List[SensitivityIndices]: Ein Ergebnis je Ausgang
    """
    X = saltelli_matrices(plan)
    logger.info(f"Sobol-Analyse: {plan.n_rows} Modellauswertungen (N={plan.n_base}, k={plan.k})")
    Y = map_chunks(fn, X, threads)
    Y = Y.reshape(len(X), -1)
    names = list(output_names) if output_names else (
        ['output'] if Y.shape[1] == 1 else [f"output_{j}" for j in range(Y.shape[1])]
    )
    if len(names) != Y.shape[1]:
        raise ShapeMismatch(f"{len(names)} Ausgangsnamen für {Y.shape[1]} Ausgänge")
    results = []
    for j, name in enumerate(names):
        try:
            results.append(estimate_indices(Y[:, j], plan, output=name))
        except ZeroVariance as e:
            if on_zero_variance == 'raise':
                raise ZeroVariance(f"{name}: {e}")
            logger.warning(f"Ausgang {name} ohne Varianz, Indizes als NaN")
            results.append(SensitivityIndices.undefined(plan.names, plan.n_rows, name))
    return results


def model_function(net: Network, selector: OutputSelector = OutputSelector()) -> Tuple[ModelFn, List[str]]:
    """Modellfunktion und Ausgangsnamen für Netzausgabe oder verborgene Schicht."""
    until = selector.layer
    if until is not None and not 0 <= until < len(net.layers):
        raise ShapeMismatch(f"Schichtindex {until} außerhalb von [0, {len(net.layers)})")
    width = int(np.prod(net.output_shape if until is None else net.layer_shapes[until]))
    if until is None:
        names = ['output'] if width == 1 else [f"output_{j}" for j in range(width)]
    else:
        names = [f"layer{until}_unit{j}" for j in range(width)]

    def fn(X: np.ndarray) -> np.ndarray:
        out = forward(net, X, until=until, mode=Mode.EVAL).output
        return out.reshape(len(X), -1)

    return fn, names


def analyze_model(net: Network, plan: SobolPlan, selector: OutputSelector = OutputSelector(),
                  threads: int = 1, on_zero_variance: str = 'raise') -> List[SensitivityIndices]:
    """
    Sobol-Analyse eines Netzes mit Vektoreingabe.

    Args:
        net: Netz im Eval-Modus mit Eingabeform (k,)
        plan: Stichprobenplan mit plan.k Faktoren
        selector: Netzausgabe oder verborgene Schicht (ein Ergebnis je Einheit)
        threads: Anzahl paralleler Auswertungen
        on_zero_variance: 'raise' oder 'nan'

    Raises:
        ModeError: Wenn das Netz im Train-Modus ist
        ShapeMismatch: Wenn plan.k nicht zur Eingabe passt
        ZeroVariance: Bei konstantem Ausgang (on_zero_variance='raise')
    """
    require_eval(net)
    if net.input_shape != (plan.k,):
        raise ShapeMismatch(f"Plan hat {plan.k} Faktoren, Netz erwartet Eingabe {net.input_shape}")
    fn, names = model_function(net, selector)
    return analyze_function(fn, plan, threads, names, on_zero_variance)


def convergence_study(fn: ModelFn, plan: SobolPlan, n_values: Sequence[int],
                      threads: int = 1) -> List[Tuple[int, SensitivityIndices]]:
    """
    Wiederholt die Analyse für mehrere Basisumfänge N (erster Ausgang).

    Returns:
        List[Tuple[int, SensitivityIndices]]: Ein Eintrag je N in der gegebenen Reihenfolge
    """
    study = []
    for n in n_values:
        result = analyze_function(fn, plan.with_n(int(n)), threads)[0]
        width = float(np.mean(result.ci_width('s1')))
        logger.info(f"Konvergenz N={n}: mittlere S1-Intervallbreite {width:.4g}")
        study.append((int(n), result))
    return study


def default_n_values(low: int = 128, high: int = 65536) -> List[int]:
    """Zweierpotenzen von low bis high im Abstand Faktor 4, high immer enthalten."""
    values = []
    n = low
    while n < high:
        values.append(n)
        n *= 4
    values.append(high)
    return values