"""
Persistenz von Netzgewichten.

Binärformat (little-endian):
    magic "SLNS" | u32 version | u32 ndim + u32 dims der Eingabe | u32 Schichtzahl
    je Schicht: u8 Typ | i32 Block-ID (-1 = keiner) | u32 Länge + JSON-Attribute
                | u32 Tensorzahl | je Tensor u32 ndim, u32 dims, f64 Werte
    Residual: nach den (leeren) eigenen Tensoren folgt u32 Anzahl innerer Schichten
              und die inneren Schichten im selben Format.

Ein JSON-Sidecar neben der Binärdatei enthält Architektur und Metadaten.
"""

import io
import json
import logging
import os
import struct
from typing import Any, BinaryIO, Dict, List, Optional, Tuple

import numpy as np

from backend.app.core.exceptions import ShapeMismatch, WeightsFormatError
from backend.app.core.layers import Layer, Residual, layer_from_spec
from backend.app.core.network import Network

logger = logging.getLogger(__name__)

MAGIC = b'SLNS'
VERSION = 1
KIND_TAGS = ['Dense', 'Conv2D', 'BatchNorm', 'ReLU', 'Sigmoid', 'MaxPool2D', 'Residual', 'Flatten']


def sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + '.json'


def _own_tensors(layer: Layer) -> List[np.ndarray]:
    if isinstance(layer, Residual):
        return []
    tensors = list(layer.parameters().values()) + list(layer.buffers().values())
    return [t.data for t in tensors]


def _write_layer(out: BinaryIO, layer: Layer) -> None:
    attrs = json.dumps(layer.attributes(), sort_keys=True).encode('utf-8')
    block = -1 if layer.block_id is None else layer.block_id
    out.write(struct.pack('<BiI', KIND_TAGS.index(layer.kind), block, len(attrs)))
    out.write(attrs)
    tensors = _own_tensors(layer)
    out.write(struct.pack('<I', len(tensors)))
    for data in tensors:
        out.write(struct.pack('<I', data.ndim))
        out.write(struct.pack(f'<{data.ndim}I', *data.shape))
        out.write(np.ascontiguousarray(data, dtype='<f8').tobytes())
    if isinstance(layer, Residual):
        out.write(struct.pack('<I', len(layer.inner)))
        for inner in layer.inner:
            _write_layer(out, inner)


def _read(stream: BinaryIO, fmt: str) -> Tuple[Any, ...]:
    size = struct.calcsize(fmt)
    chunk = stream.read(size)
    if len(chunk) != size:
        raise WeightsFormatError("Gewichtsdatei ist unvollständig")
    return struct.unpack(fmt, chunk)


def _read_layer(stream: BinaryIO) -> Layer:
    tag, block, attr_len = _read(stream, '<BiI')
    if tag >= len(KIND_TAGS):
        raise WeightsFormatError(f"Unbekannter Schichttyp {tag}")
    try:
        attrs = json.loads(stream.read(attr_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightsFormatError(f"Schichtattribute nicht lesbar: {e}")
    spec = dict(attrs, kind=KIND_TAGS[tag])
    if block >= 0:
        spec['block'] = block
    tensors = []
    (count,) = _read(stream, '<I')
    for _ in range(count):
        (ndim,) = _read(stream, '<I')
        shape = _read(stream, f'<{ndim}I')
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
        payload = stream.read(n_bytes)
        if len(payload) != n_bytes:
            raise WeightsFormatError("Tensordaten sind unvollständig")
        tensors.append(np.frombuffer(payload, dtype='<f8').reshape(shape))
    if spec['kind'] == 'Residual':
        # Innere Schichten folgen nach den (leeren) eigenen Tensoren
        (n_inner,) = _read(stream, '<I')
        inner = [_read_layer(stream) for _ in range(n_inner)]
        try:
            return Residual(inner, block_id=spec.get('block'))
        except ShapeMismatch as e:
            raise WeightsFormatError(str(e))
    try:
        layer = layer_from_spec(spec)
    except ShapeMismatch as e:
        raise WeightsFormatError(str(e))
    targets = list(layer.parameters().values()) + list(layer.buffers().values())
    if len(targets) != len(tensors):
        raise WeightsFormatError(f"{layer.kind}: {len(tensors)} Tensoren, erwartet {len(targets)}")
    for target, data in zip(targets, tensors):
        if target.shape != data.shape:
            raise WeightsFormatError(f"{layer.kind}: Tensor {data.shape} passt nicht zu {target.shape}")
        target.data[...] = data
    return layer


def to_bytes(net: Network) -> bytes:
    """Serialisiert das Netz in das Binärformat."""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack('<II', VERSION, len(net.input_shape)))
    out.write(struct.pack(f'<{len(net.input_shape)}I', *net.input_shape))
    out.write(struct.pack('<I', len(net.layers)))
    for layer in net.layers:
        _write_layer(out, layer)
    return out.getvalue()


def from_bytes(payload: bytes, name: str = 'custom', metadata: Optional[Dict[str, Any]] = None) -> Network:
    """
    Liest ein Netz aus dem Binärformat.

    Raises:
        WeightsFormatError: Bei falscher Magie, Version oder beschädigtem Inhalt
    """
    stream = io.BytesIO(payload)
    if stream.read(4) != MAGIC:
        raise WeightsFormatError("Keine SLNS-Gewichtsdatei (falsche Kennung)")
    version, ndim = _read(stream, '<II')
    if version != VERSION:
        raise WeightsFormatError(f"Nicht unterstützte Formatversion {version}")
    input_shape = _read(stream, f'<{ndim}I')
    (n_layers,) = _read(stream, '<I')
    layers = [_read_layer(stream) for _ in range(n_layers)]
    if stream.read(1):
        raise WeightsFormatError("Überzählige Bytes am Dateiende")
    try:
        return Network(layers, input_shape, name=name, metadata=metadata)
    except ShapeMismatch as e:
        raise WeightsFormatError(f"Gespeicherte Architektur ist inkonsistent: {e}")


def save_weights(net: Network, path: str) -> str:
    """
    Schreibt Binärdatei und JSON-Sidecar.

    Args:
        net: Zu speicherndes Netz
        path: Zielpfad der Binärdatei

    Returns:
        str: Pfad des Sidecars
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(to_bytes(net))
    sidecar = sidecar_path(path)
    spec = net.to_spec()
    spec['format'] = {'magic': MAGIC.decode('ascii'), 'version': VERSION}
    spec['metadata'] = net.metadata
    with open(sidecar, 'w', encoding='utf-8') as f:
        json.dump(spec, f, indent=2, sort_keys=True)
    logger.info(f"Gewichte gespeichert: {path} (Sidecar {sidecar})")
    return sidecar


def load_weights(path: str) -> Network:
    """
    Lädt ein Netz aus Binärdatei und (optionalem) Sidecar.

    Raises:
        FileNotFoundError: Wenn die Binärdatei fehlt
        WeightsFormatError: Wenn Datei oder Sidecar beschädigt sind oder nicht zusammenpassen
    """
    with open(path, 'rb') as f:
        payload = f.read()
    name, metadata = 'custom', {}
    sidecar = sidecar_path(path)
    spec = None
    if os.path.isfile(sidecar):
        try:
            with open(sidecar, 'r', encoding='utf-8') as f:
                spec = json.load(f)
        except json.JSONDecodeError as e:
            raise WeightsFormatError(f"Sidecar {sidecar} nicht lesbar: {e}")
        name = spec.get('name', name)
        metadata = spec.get('metadata') or {}
    net = from_bytes(payload, name=name, metadata=metadata)
    if spec is not None and spec.get('layers') != net.to_spec()['layers']:
        raise WeightsFormatError(f"Sidecar {sidecar} beschreibt eine andere Architektur")
    logger.debug(f"Gewichte geladen: {path} ({net})")
    return net
