"""
Vordefinierte Architekturen: MLP für Tabellendaten, vgg-tiny und resnet-tiny für Bilder.

Block-IDs markieren die Einheiten, deren Aktivierungen die lokale
Sensitivitätsanalyse auswertet. Bei den Bildnetzen trägt der Stamm die ID 0,
die drei Faltungsstufen die IDs 1 bis 3 und der Klassifikationskopf die ID 4.
"""

import json
import logging
import os
import re
from typing import List, Optional, Sequence, Tuple

from backend.app.core.exceptions import ConfigError, WeightsFormatError
from backend.app.core.layers import (
    BatchNorm, Conv2D, Dense, Flatten, Layer, MaxPool2D, ReLU, Residual, Sigmoid,
)
from backend.app.core.network import Network

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 16, 16)
DEFAULT_WIDTHS = (16, 32, 64)
HEAD_BLOCK = 4

_MLP_PATTERN = re.compile(r'^mlp(-\d+){3,}$')


def mlp(dims: Sequence[int]) -> Network:
    """
    Mehrschichtiges Perzeptron, z.B. dims=(8, 10, 1).

    Jede verborgene Schicht ist ein Block aus Dense, BatchNorm und ReLU. Der
    Ausgabeblock besteht bei einem Ausgang aus Dense, BatchNorm und Sigmoid
    (binäre Klassifikation), sonst aus Dense mit Logits.

    Args:
        dims: Eingabe-, verborgene und Ausgabedimensionen

    Returns:
        Network: Nicht initialisiertes Netz
    """
    dims = [int(d) for d in dims]
    if len(dims) < 3:
        raise ConfigError(f"MLP braucht mindestens eine verborgene Schicht: {dims}")
    layers: List[Layer] = []
    for block, (d_in, d_out) in enumerate(zip(dims[:-2], dims[1:-1]), start=1):
        layers += [Dense(d_in, d_out, block), BatchNorm(d_out, block_id=block), ReLU(block)]
    out_block = len(dims) - 1
    if dims[-1] == 1:
        layers += [Dense(dims[-2], 1, out_block), BatchNorm(1, block_id=out_block), Sigmoid(out_block)]
    else:
        layers.append(Dense(dims[-2], dims[-1], out_block))
    return Network(layers, (dims[0],), name='mlp-' + '-'.join(str(d) for d in dims))


def _conv_bn_relu(c_in: int, c_out: int, block: int, kernel: int = 3) -> List[Layer]:
    return [Conv2D(c_in, c_out, kernel, padding=kernel // 2, block_id=block),
            BatchNorm(c_out, block_id=block), ReLU(block)]


def _head(shape: Tuple[int, ...], n_classes: int) -> List[Layer]:
    c, h, w = shape
    return [Flatten(HEAD_BLOCK), Dense(c * h * w, n_classes, HEAD_BLOCK)]


def vgg_tiny(input_shape: Tuple[int, int, int] = IMAGE_SHAPE, n_classes: int = 4,
             widths: Sequence[int] = DEFAULT_WIDTHS) -> Network:
    """
    Drei VGG-Blöcke (2x Conv-ReLU, MaxPool) mit anschließendem linearen Kopf.

    Wie VGG-16 ohne BatchNorm; die Faltungen werden über die Ausgangskanäle
    initialisiert (fan='out').
    """
    c, h, w = input_shape
    layers: List[Layer] = []
    for block, width in enumerate(widths, start=1):
        for c_in in (c, width):
            layers += [Conv2D(c_in, width, 3, padding=1, block_id=block, fan='out'), ReLU(block)]
        layers.append(MaxPool2D(2, block))
        c, h, w = width, h // 2, w // 2
    layers += _head((c, h, w), n_classes)
    return Network(layers, input_shape, name='vgg-tiny')


def resnet_tiny(input_shape: Tuple[int, int, int] = IMAGE_SHAPE, n_classes: int = 4,
                widths: Sequence[int] = DEFAULT_WIDTHS) -> Network:
    """
    Stamm plus drei Residualstufen mit linearem Kopf.

    Jede Stufe: optionale Übergangsfaltung bei Kanalwechsel, Residualblock
    x + F(x) mit F = Conv-BN-ReLU-Conv-BN, danach ReLU und MaxPool.
    """
    c, h, w = input_shape
    layers: List[Layer] = _conv_bn_relu(c, widths[0], 0)
    c = widths[0]
    for block, width in enumerate(widths, start=1):
        if width != c:
            layers += _conv_bn_relu(c, width, block, kernel=1)
            c = width
        inner = [Conv2D(c, c, 3, padding=1), BatchNorm(c), ReLU(),
                 Conv2D(c, c, 3, padding=1), BatchNorm(c)]
        layers += [Residual(inner, block), ReLU(block), MaxPool2D(2, block)]
        h, w = h // 2, w // 2
    layers += _head((c, h, w), n_classes)
    return Network(layers, input_shape, name='resnet-tiny')


def from_json(path: str) -> Network:
    """Lädt eine Architekturbeschreibung im Format des Sidecars."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            spec = json.load(f)
    except json.JSONDecodeError as e:
        raise WeightsFormatError(f"Architekturdatei {path} ist kein gültiges JSON: {e}")
    if 'layers' not in spec or 'input_shape' not in spec:
        raise WeightsFormatError(f"Architekturdatei {path} braucht 'layers' und 'input_shape'")
    return Network.from_spec(spec)


def build_network(arch: str, seed: int = 1, input_shape: Optional[Tuple[int, ...]] = None,
                  n_classes: Optional[int] = None, widths: Optional[Sequence[int]] = None) -> Network:
    """
    Erstellt und initialisiert ein Netz nach Name.

    Args:
        arch: mlp-<in>-<hidden..>-<out>, vgg-tiny, resnet-tiny oder Pfad zu einer JSON-Beschreibung
        seed: Startwert der Initialisierung
        input_shape: Eingabeform (C, H, W) für Bildnetze
        n_classes: Klassenzahl für Bildnetze
        widths: Kanalbreiten der drei Stufen

    Returns:
        Network: Initialisiertes Netz im Eval-Modus

    Raises:
        ConfigError: Bei unbekanntem Architekturnamen
    """
    if _MLP_PATTERN.match(arch):
        net = mlp([int(d) for d in arch.split('-')[1:]])
    elif arch in ('vgg-tiny', 'resnet-tiny'):
        builder = vgg_tiny if arch == 'vgg-tiny' else resnet_tiny
        net = builder(tuple(input_shape or IMAGE_SHAPE), n_classes or 4, tuple(widths or DEFAULT_WIDTHS))
    elif arch.endswith('.json') and os.path.isfile(arch):
        net = from_json(arch)
    else:
        raise ConfigError(f"Unbekannte Architektur: {arch}")
    net.init_parameters(seed)
    logger.debug(f"Netz {net.name} erstellt: {len(net.parameters())} Parametertensoren")
    return net
