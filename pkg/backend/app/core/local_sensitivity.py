"""
Lokale Sensitivität einzelner Pixel.

Für ein Bild x, einen Block q und einen Kanal C ist

    s_ijC = ||B_q(x + eps e_ijC)||_2 - ||B_q(x)||_2

wobei B_q die Abbildung von der Netzeingabe bis zum Ende von Block q ist.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.app.core.exceptions import ConfigError, InsufficientImages, ShapeMismatch
from backend.app.core.network import Mode, Network, forward, map_chunks, require_eval
from backend.app.models.datasets import ImageDataset
from backend.app.models.results import SensitivityMap

logger = logging.getLogger(__name__)

PERTURB_CHUNK = 256
STATISTICS = ('mean', 'mean_abs')


def as_network_input(net: Network, x: np.ndarray) -> np.ndarray:
    """
    Bringt eine Eingabe in die Form des Netzes.

    Bildnetze (Eingabe C x H x W) erhalten Bilder als H x W x C bzw. H x W bei
    einem Kanal. Alle anderen Netze erhalten ihre Eingabe unverändert.

    Raises:
        ShapeMismatch: Wenn die Eingabe nicht passt
    """
    x = np.asarray(x, dtype=np.float64)
    if len(net.input_shape) == 3:
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim == 3:
            x = x.transpose(2, 0, 1)
    if x.shape != net.input_shape:
        raise ShapeMismatch(f"Eingabe {x.shape} passt nicht zum Netz {net.input_shape}")
    return np.ascontiguousarray(x)


def block_norm(net: Network, x: np.ndarray, q: int) -> float:
    """
    L2-Norm aller Aktivierungen am Ende von Block q.

    Raises:
        UnknownBlock: Wenn keine Schicht die ID q trägt
        ModeError: Wenn das Netz nicht im Eval-Modus ist
    """
    require_eval(net)
    end = net.block_end(q)
    trace = forward(net, as_network_input(net, x), until=end, mode=Mode.EVAL)
    return float(np.linalg.norm(trace.output))


def pixel_sensitivity(net: Network, image: np.ndarray, q: int, channel: int, epsilon: float = 0.1,
                      threads: int = 1, chunk_size: int = PERTURB_CHUNK) -> SensitivityMap:
    """
    Sensitivitätskarte eines Kanals für Block q.

    Wertet genau H*W + 1 Bilder aus: das ungestörte Bild und je Pixel eine
    Störung um +epsilon im gewählten Kanal.

    Args:
        net: Bildnetz im Eval-Modus
        image: Bild H x W x C
        q: Block-ID
        channel: Farbkanal C
        epsilon: Störung (> 0)
        threads: Anzahl paralleler Auswertungen
        chunk_size: Bilder je Auswertung

    Returns:
        SensitivityMap: H x W vorzeichenbehaftete Normdifferenzen

    Raises:
        ShapeMismatch: Wenn Bild oder Kanal nicht zum Netz passen
        UnknownBlock: Wenn Block q nicht existiert
    """
    require_eval(net)
    if not epsilon > 0:
        raise ConfigError(f"epsilon muss positiv sein: {epsilon}")
    x = as_network_input(net, image)
    if x.ndim != 3:
        raise ShapeMismatch(f"Pixelsensitivität braucht ein Bildnetz, Eingabe {net.input_shape}")
    c, h, w = x.shape
    if not 0 <= channel < c:
        raise ShapeMismatch(f"Kanal {channel} außerhalb von [0, {c})")
    end = net.block_end(q)

    def norms(positions: np.ndarray) -> np.ndarray:
        batch = np.repeat(x[None], len(positions), axis=0)
        rows = np.nonzero(positions >= 0)[0]
        pos = positions[rows]
        batch[rows, channel, pos // w, pos % w] += epsilon
        out = forward(net, batch, until=end, mode=Mode.EVAL).output
        return np.linalg.norm(out.reshape(len(positions), -1), axis=1)

    # Position -1 ist das ungestörte Bild
    result = map_chunks(norms, np.arange(-1, h * w), threads, chunk_size)
    baseline = float(result[0])
    values = (result[1:] - baseline).reshape(h, w)
    logger.debug(f"Pixelsensitivität Block {q}, Kanal {channel}: {h * w + 1} Auswertungen")
    return SensitivityMap(values=values, block_id=q, channel=channel, epsilon=float(epsilon),
                          baseline_norm=baseline)


def channel_maps(net: Network, image: np.ndarray, q: int, epsilon: float = 0.1,
                 threads: int = 1) -> List[SensitivityMap]:
    """Eine Karte je Farbkanal für Block q."""
    c = net.input_shape[0]
    return [pixel_sensitivity(net, image, q, ch, epsilon, threads) for ch in range(c)]


def pixelate(sens_map: SensitivityMap, b: int) -> SensitivityMap:
    """
    Vergröbert eine Karte auf Kacheln der Größe b x b (Mittelwert, Randkacheln unvollständig).

    Returns:
        SensitivityMap: ceil(H/b) x ceil(W/b) Karte
    """
    if b < 1:
        raise ConfigError(f"Kachelgröße muss >= 1 sein: {b}")
    if b == 1:
        return sens_map.with_values(sens_map.values.copy())
    h, w = sens_map.values.shape
    hb, wb = -(-h // b), -(-w // b)
    padded = np.full((hb * b, wb * b), np.nan)
    padded[:h, :w] = sens_map.values
    values = np.nanmean(padded.reshape(hb, b, wb, b), axis=(1, 3))
    return sens_map.with_values(values, aggregation=sens_map.aggregation * b)


def aggregate_maps(maps: Sequence[SensitivityMap], statistic: str = 'mean',
                   class_label: Optional[int] = None) -> SensitivityMap:
    """Elementweiser Mittelwert (vorzeichenbehaftet oder der Beträge) mehrerer Karten."""
    if statistic not in STATISTICS:
        raise ConfigError(f"Unbekannte Statistik {statistic}, erlaubt: {STATISTICS}")
    stack = np.stack([m.values for m in maps])
    if statistic == 'mean_abs':
        stack = np.abs(stack)
    first = maps[0]
    return first.with_values(stack.mean(axis=0), class_label=class_label,
                             baseline_norm=float(np.mean([m.baseline_norm for m in maps])))


def class_mean_map(net: Network, dataset: ImageDataset, cls: int, q: int, channel: int,
                   epsilon: float = 0.1, n_images: int = 1, statistic: str = 'mean',
                   threads: int = 1) -> Tuple[SensitivityMap, List[SensitivityMap]]:
    """
    Mittlere Karte über die ersten n_images Bilder einer Klasse (Datensatzreihenfolge).

    Returns:
        Tuple[SensitivityMap, List[SensitivityMap]]: Mittelwertkarte und Einzelkarten

    Raises:
        InsufficientImages: Wenn die Klasse weniger als n_images Bilder hat
    """
    indices = dataset.indices_of(cls)
    if n_images < 1 or len(indices) < n_images:
        raise InsufficientImages(
            f"Klasse {cls} hat {len(indices)} Bilder, angefordert {n_images}"
        )
    maps = [pixel_sensitivity(net, dataset.normalized(i), q, channel, epsilon, threads)
            for i in indices[:n_images]]
    for m in maps:
        m.class_label = cls
    return aggregate_maps(maps, statistic, class_label=cls), maps


def sensitivity_profile(net: Network, images: Sequence[np.ndarray], blocks: Optional[Sequence[int]] = None,
                        epsilon: float = 0.1, channels: Optional[Sequence[int]] = None,
                        threads: int = 1) -> Dict[int, float]:
    """
    Mittlere absolute Sensitivität je Block, gemittelt über Bilder und Kanäle.

    Args:
        net: Bildnetz im Eval-Modus
        images: Bilder H x W x C
        blocks: Block-IDs (Standard: alle außer Stamm 0 und Kopf)
        epsilon: Störung
        channels: Kanäle (Standard: alle)

    Returns:
        Dict[int, float]: Block-ID -> mittleres |s|
    """
    if not images:
        raise InsufficientImages("Keine Bilder für das Sensitivitätsprofil")
    if blocks is None:
        ids = net.block_ids()
        blocks = [b for b in ids[:-1] if b != 0] or ids
    channels = list(range(net.input_shape[0])) if channels is None else list(channels)
    profile = {}
    for q in blocks:
        values = [pixel_sensitivity(net, img, q, ch, epsilon, threads).mean_abs
                  for img in images for ch in channels]
        profile[q] = float(np.mean(values))
        logger.info(f"{net.name}: Block {q} mittlere |s| = {profile[q]:.4g}")
    return profile
