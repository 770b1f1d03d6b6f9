"""
Lesen und Schreiben von Bildern (PGM/PPM und alle weiteren Pillow-Formate) sowie Farbdarstellung von Karten.
"""

import io
import json
import logging
import os
from functools import lru_cache

import numpy as np
from PIL import Image, UnidentifiedImageError

from backend.app.core.exceptions import FormatError

logger = logging.getLogger(__name__)

PALETTE_FILE = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'data', 'palette.json')
OVERLAY_ALPHA = 0.5

_CHANNELS = {'L': 1, 'RGB': 3}


def _to_array(image: Image.Image, source: str) -> np.ndarray:
    if image.mode in ('1', 'P', 'LA', 'RGBA'):
        image = image.convert('RGB' if image.mode in ('P', 'RGBA') else 'L')
    channels = _CHANNELS.get(image.mode)
    if channels is None:
        raise FormatError(f"{source}: Bildmodus {image.mode} nicht unterstützt (nur 8 Bit grau oder RGB)")
    return np.asarray(image, dtype=np.uint8).reshape(image.height, image.width, channels).copy()


def _open(fp, source: str) -> np.ndarray:
    try:
        with Image.open(fp) as image:
            image.load()
            return _to_array(image, source)
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as e:
        raise FormatError(f"{source}: Bild nicht lesbar ({e})")


def decode_image(payload: bytes, source: str = '<bytes>') -> np.ndarray:
    """
    Dekodiert ein Bild aus Bytes.

    Returns:
        np.ndarray: H x W x C Pixel (uint8), C = 1 oder 3

    Raises:
        FormatError: Bei unbekanntem Format, abgeschnittenen Daten oder mehr als 8 Bit je Kanal
    """
    return _open(io.BytesIO(payload), source)


def read_image(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    return _open(path, path)


def _to_pil(pixels: np.ndarray) -> Image.Image:
    pixels = np.asarray(pixels)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if not (pixels.ndim == 2 or (pixels.ndim == 3 and pixels.shape[2] == 3)):
        raise FormatError(f"Bild muss H x W oder H x W x 3 sein, erhalten {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise FormatError(f"Bilddaten müssen uint8 sein, erhalten {pixels.dtype}")
    return Image.fromarray(np.ascontiguousarray(pixels))


def encode_image(pixels: np.ndarray, fmt: str = 'PPM') -> bytes:
    """Kodiert H x W (x 1) als Graubild bzw. H x W x 3 als Farbbild; PPM schreibt P5 bzw. P6."""
    buffer = io.BytesIO()
    _to_pil(pixels).save(buffer, format=fmt)
    return buffer.getvalue()


def write_image(path: str, pixels: np.ndarray) -> str:
    """Schreibt ein Bild; das Format folgt der Dateiendung (.pgm/.ppm/.png ...)."""
    image = _to_pil(pixels)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    image.save(path)
    return path


@lru_cache(maxsize=1)
def palette() -> np.ndarray:
    """256 x 3 Farbtabelle, linear zwischen den Stützfarben der Paletten-Datei interpoliert."""
    with open(PALETTE_FILE, 'r', encoding='utf-8') as f:
        spec = json.load(f)
    anchors = np.array([[int(h[i:i + 2], 16) for i in (1, 3, 5)] for h in spec['anchors']], dtype=np.float64)
    size = int(spec.get('size', 256))
    positions = np.linspace(0.0, 1.0, len(anchors))
    grid = np.linspace(0.0, 1.0, size)
    table = np.stack([np.interp(grid, positions, anchors[:, c]) for c in range(3)], axis=1)
    return np.rint(table).astype(np.uint8)


def to_gray(values: np.ndarray) -> np.ndarray:
    """Lineare Abbildung [min, max] -> [0, 255]; konstante Karten werden zu 0."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def colorize(values: np.ndarray) -> np.ndarray:
    """Karte H x W -> Farbbild H x W x 3 über die Palette."""
    return palette()[to_gray(values)]


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """
    Überlagert eine Karte mit Werten in [0, 1] über ein 8-Bit-Bild.

    Args:
        image: H x W x C Bild (uint8, C = 1 oder 3)
        heat: H x W Karte in [0, 1]
        alpha: Gewicht der Karte

    Returns:
        np.ndarray: H x W x 3 Bild (uint8)
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    heat = np.asarray(heat, dtype=np.float64)
    if heat.shape != image.shape[:2]:
        raise FormatError(f"Karte {heat.shape} passt nicht zum Bild {image.shape[:2]}")
    colors = palette()[np.rint(np.clip(heat, 0.0, 1.0) * 255.0).astype(np.int64)]
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * colors.astype(np.float64)
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)
