"""
Sequentielles Netz mit Residualblöcken: Vorwärtsspur, Rückwärtsrechnung, SGD und Trainingsschleife.
"""

import copy
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from backend.app.core.exceptions import (
    EmptyDataset, ModeError, ShapeMismatch, TraceMismatch, UnknownBlock,
)
from backend.app.core.layers import Layer, Sigmoid, layer_from_spec
from backend.app.core.losses import bce_loss, cross_entropy_loss
from backend.app.core.tensor import ArrayLike, Tensor, as_array, ensure_finite
from backend.app.models.configs import TrainConfig

logger = logging.getLogger(__name__)

ParamGrads = Dict[str, np.ndarray]

EVAL_CHUNK = 4096


class Mode(str, Enum):
    TRAIN = 'train'
    EVAL = 'eval'


class Network:
    """
    Geordnete Schichtliste mit Parametern, Block-Markierungen und Modus.

    Attributes:
        layers: Schichten in Ausführungsreihenfolge
        input_shape: Eingabeform ohne Batch-Achse, z.B. (8,) oder (3, 16, 16)
        name: Architekturname
        mode: Train oder Eval
        metadata: Freie Zusatzinformationen (Merkmalsnamen, Normierung, Grenzen)
    """

    def __init__(self, layers: List[Layer], input_shape: Tuple[int, ...], name: str = 'custom',
                 metadata: Optional[Dict[str, Any]] = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.name = name
        self.mode = Mode.EVAL
        self.metadata = dict(metadata or {})
        self.layer_shapes = self._validate()

    def _validate(self) -> List[Tuple[int, ...]]:
        """Prüft alle Formübergänge und die Reihenfolge der Block-IDs."""
        if not self.layers:
            raise ShapeMismatch("Netz ohne Schichten")
        shapes = []
        shape = self.input_shape
        last_block = None
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeMismatch as e:
                raise ShapeMismatch(f"Schicht {i} ({layer.kind}): {e}")
            shapes.append(shape)
            if layer.block_id is not None:
                if last_block is not None and layer.block_id < last_block:
                    raise ShapeMismatch(
                        f"Block-IDs müssen monoton steigen: Schicht {i} hat {layer.block_id} nach {last_block}"
                    )
                last_block = layer.block_id
        return shapes

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.layer_shapes[-1]

    def train(self) -> 'Network':
        self.mode = Mode.TRAIN
        return self

    def eval(self) -> 'Network':
        self.mode = Mode.EVAL
        return self

    def parameters(self) -> 'OrderedDict[str, Tensor]':
        params = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.parameters().items():
                params[f"{i}.{name}"] = tensor
        return params

    def buffers(self) -> 'OrderedDict[str, Tensor]':
        buffers = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.buffers().items():
                buffers[f"{i}.{name}"] = tensor
        return buffers

    def init_parameters(self, seed: int) -> 'Network':
        """Kaiming-uniforme Initialisierung aus einem festen Zufallsstrom."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_parameters(rng)
        return self

    def block_ids(self) -> List[int]:
        return sorted({layer.block_id for layer in self.layers if layer.block_id is not None})

    def block_end(self, block_id: int) -> int:
        """
        Index der letzten Schicht des Blocks block_id.

        Raises:
            UnknownBlock: Wenn keine Schicht diese ID trägt
        """
        indices = [i for i, layer in enumerate(self.layers) if layer.block_id == block_id]
        if not indices:
            raise UnknownBlock(f"Kein Block mit ID {block_id}; vorhanden: {self.block_ids()}")
        return indices[-1]

    def state(self) -> Dict[str, np.ndarray]:
        """Kopie aller Parameter und Puffer, z.B. für Vergleiche."""
        state = {name: t.data.copy() for name, t in self.parameters().items()}
        state.update({name: t.data.copy() for name, t in self.buffers().items()})
        return state

    def copy(self) -> 'Network':
        return copy.deepcopy(self)

    def to_spec(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'input_shape': list(self.input_shape),
            'layers': [layer.to_spec() for layer in self.layers],
        }

    @classmethod
    def from_spec(cls, spec: Dict[str, Any], seed: Optional[int] = None) -> 'Network':
        net = cls([layer_from_spec(s) for s in spec['layers']], spec['input_shape'],
                  name=spec.get('name', 'custom'), metadata=spec.get('metadata'))
        if seed is not None:
            net.init_parameters(seed)
        return net

    def __repr__(self) -> str:
        return f"Network({self.name}, input={self.input_shape}, layers={len(self.layers)}, mode={self.mode.value})"


@dataclass
class ActivationTrace:
    """
    Ergebnis eines Vorwärtsschritts: eine Ausgabe je ausgeführter Schicht.

    Attributes:
        input: Netzeingabe (mit Batch-Achse)
        outputs: Ausgabe jeder Schicht 0..len-1
        caches: Zwischenwerte für die Rückwärtsrechnung
        mode: Modus, in dem gerechnet wurde
        network_id: Kennung des Netzes
    """
    input: np.ndarray
    outputs: List[np.ndarray] = field(default_factory=list)
    caches: List[Any] = field(default_factory=list, repr=False)
    mode: Mode = Mode.EVAL
    network_id: int = 0

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]

    def __len__(self) -> int:
        return len(self.outputs)


@dataclass
class BackwardResult:
    """Parametergradienten und Gradient bezüglich der Eingabe der untersten durchlaufenen Schicht."""
    param_grads: ParamGrads
    input_grad: np.ndarray


def _batched_input(net: Network, x: ArrayLike) -> np.ndarray:
    data = as_array(x)
    if data.shape == net.input_shape:
        data = data[None, ...]
    if data.shape[1:] != net.input_shape:
        raise ShapeMismatch(f"Eingabe {data.shape} passt nicht zu Netzeingabe (N, {net.input_shape})")
    return data


def forward(net: Network, x: ArrayLike, until: Optional[int] = None,
            mode: Optional[Mode] = None) -> ActivationTrace:
    """
    Vorwärtsschritt mit Aufzeichnung jeder Schichtausgabe.

    Args:
        net: Netz
        x: Eingabe (N, *input_shape) oder eine einzelne Probe input_shape
        until: Index der letzten auszuführenden Schicht (None = alle)
        mode: Modus für diesen Aufruf, sonst net.mode

    Returns:
        ActivationTrace: Eine Ausgabe je Schicht, letzte ist die Netzausgabe

    Raises:
        ShapeMismatch: Wenn die Eingabe nicht passt
        NonFiniteValue: Bei NaN/Inf in Ein- oder Ausgabe
    """
    data = ensure_finite(_batched_input(net, x), "Netzeingabe")
    mode = Mode(mode or net.mode)
    last = len(net.layers) - 1 if until is None else until
    if not 0 <= last < len(net.layers):
        raise ShapeMismatch(f"Schichtindex {last} außerhalb von [0, {len(net.layers)})")
    trace = ActivationTrace(input=data, mode=mode, network_id=id(net))
    train = mode == Mode.TRAIN
    h = data
    for layer in net.layers[:last + 1]:
        h, cache = layer.forward(h, train)
        trace.outputs.append(h)
        trace.caches.append(cache)
    ensure_finite(h, f"Ausgabe von Schicht {last}")
    return trace


def backward(net: Network, trace: ActivationTrace, output_grad: ArrayLike,
             start: Optional[int] = None, stop: int = 0) -> BackwardResult:
    """
    Rückwärtsrechnung von Schicht start bis einschließlich Schicht stop.

    Args:
        net: Netz, mit dem trace erzeugt wurde
        trace: Vorwärtsspur
        output_grad: Gradient bezüglich der Ausgabe von Schicht start
        start: Oberste Schicht (None = letzte aufgezeichnete)
        stop: Unterste Schicht; input_grad bezieht sich auf deren Eingabe

    Returns:
        BackwardResult: Gradienten aller durchlaufenen Parameter und der Eingabe

    Raises:
        TraceMismatch: Wenn die Spur von einem anderen Netz stammt oder nicht zur Schichtliste passt
        ShapeMismatch: Wenn output_grad nicht die Form der Schichtausgabe hat
    """
    if trace.network_id != id(net):
        raise TraceMismatch("Aktivierungsspur stammt von einem anderen Netz")
    if len(trace.outputs) > len(net.layers) or len(trace.caches) != len(trace.outputs):
        raise TraceMismatch("Aktivierungsspur passt nicht zur Schichtliste")
    start = len(trace.outputs) - 1 if start is None else start
    if not 0 <= stop <= start < len(trace.outputs):
        raise TraceMismatch(f"Ungültiger Bereich start={start}, stop={stop} für Spur der Länge {len(trace)}")
    dy = as_array(output_grad)
    if dy.shape != trace.outputs[start].shape:
        raise ShapeMismatch(f"Ausgabegradient {dy.shape} passt nicht zu {trace.outputs[start].shape}")
    param_grads: ParamGrads = {}
    for i in range(start, stop - 1, -1):
        dy, grads = net.layers[i].backward(trace.caches[i], dy)
        for name, g in grads.items():
            param_grads[f"{i}.{name}"] = g
    ensure_finite(dy, "Eingabegradient")
    return BackwardResult(param_grads=param_grads, input_grad=dy)


def sgd_step(net: Network, grads: ParamGrads, cfg: TrainConfig) -> Network:
    """
    SGD-Schritt mit L2-Regularisierung: w <- w - eta (dL/dw + lambda w).

    Laufende BatchNorm-Statistiken sind keine Parameter und bleiben unberührt.

    Raises:
        ShapeMismatch: Wenn Gradienten fehlen oder nicht passen
    """
    params = net.parameters()
    missing = [name for name in params if name not in grads]
    if missing:
        raise ShapeMismatch(f"Gradienten fehlen für {missing[:5]}")
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ShapeMismatch(f"Gradient {name} hat Form {g.shape}, Parameter {tensor.shape}")
        tensor.data -= cfg.learning_rate * (g + cfg.l2_lambda * tensor.data)
        tensor.grad = g
    return net


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float
    test_accuracy: Optional[float] = None


def infer_loss(net: Network) -> str:
    """bce für Netze mit Sigmoid-Ausgang, sonst Kreuzentropie."""
    return 'bce' if isinstance(net.layers[-1], Sigmoid) else 'cross_entropy'


def _loss_fn(kind: str) -> Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]:
    if kind == 'bce':
        return lambda out, y: bce_loss(out, y.reshape(out.shape))
    return lambda out, y: cross_entropy_loss(out, y.astype(np.int64))


def _correct(kind: str, out: np.ndarray, y: np.ndarray) -> int:
    if kind == 'bce':
        return int(np.sum((out.reshape(-1) > 0.5) == (y.reshape(-1) > 0.5)))
    return int(np.sum(out.argmax(axis=1) == y))


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # Ein Restbatch der Größe 1 hat keine Batch-Statistik und wird angehängt
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def predict(net: Network, X: ArrayLike, batch_size: int = 1024) -> np.ndarray:
    """Netzausgabe im Eval-Modus, ohne den Modus des Netzes zu verändern."""
    data = _batched_input(net, X)
    outputs = [forward(net, data[i:i + batch_size], mode=Mode.EVAL).output
               for i in range(0, len(data), batch_size)]
    if not outputs:
        return np.zeros((0,) + net.output_shape)
    return np.concatenate(outputs, axis=0)


def accuracy(net: Network, X: ArrayLike, y: ArrayLike) -> float:
    """Anteil korrekt klassifizierter Proben (Schwelle 0.5 bzw. argmax)."""
    labels = np.asarray(y)
    if len(labels) == 0:
        return float('nan')
    return _correct(infer_loss(net), predict(net, X), labels) / len(labels)


def train(net: Network, X: ArrayLike, y: ArrayLike, cfg: TrainConfig,
          eval_data: Optional[Tuple[ArrayLike, ArrayLike]] = None,
          loss: Optional[str] = None) -> Tuple[Network, List[EpochLog]]:
    """
    Mini-Batch-SGD mit L2-Regularisierung.

    Reihenfolge der Batches folgt einem mit cfg.seed initialisierten Zufallsstrom;
    zwei Läufe mit gleichem Startwert und gleicher Initialisierung liefern
    bitgleiche Gewichte.

    Args:
        net: Zu trainierendes Netz (wird verändert)
        X: Eingaben (N, *input_shape)
        y: Ziele (0/1 für bce, Klassenindizes sonst)
        cfg: Trainingsparameter
        eval_data: Optionales Testpaar (X, y) für die Testgenauigkeit je Epoche
        loss: 'bce' oder 'cross_entropy', sonst aus der Architektur abgeleitet

    Returns:
        Tuple[Network, List[EpochLog]]: Das trainierte Netz (Eval-Modus) und das Epochenprotokoll

    Raises:
        EmptyDataset: Wenn X keine Zeilen hat
    """
    data = _batched_input(net, X) if np.size(X) else np.zeros((0,) + net.input_shape)
    labels = np.asarray(y, dtype=np.float64)
    if len(data) == 0:
        raise EmptyDataset("Trainingsdatensatz ist leer")
    if len(labels) != len(data):
        raise ShapeMismatch(f"{len(data)} Eingaben, aber {len(labels)} Ziele")
    kind = loss or infer_loss(net)
    loss_fn = _loss_fn(kind)
    rng = np.random.default_rng(cfg.seed)
    history: List[EpochLog] = []

    net.train()
    try:
        for epoch in range(1, cfg.epochs + 1):
            total_loss = 0.0
            correct = 0
            for idx in _batches(rng.permutation(len(data)), cfg.batch_size):
                trace = forward(net, data[idx])
                batch_loss, grad = loss_fn(trace.output, labels[idx])
                result = backward(net, trace, grad)
                sgd_step(net, result.param_grads, cfg)
                total_loss += batch_loss * len(idx)
                correct += _correct(kind, trace.output, labels[idx])
            entry = EpochLog(epoch, total_loss / len(data), correct / len(data))
            if eval_data is not None and len(eval_data[1]):
                entry.test_accuracy = accuracy(net, eval_data[0], eval_data[1])
            history.append(entry)
            if epoch == 1 or epoch == cfg.epochs or epoch % max(1, cfg.epochs // 10) == 0:
                logger.info(
                    f"Epoche {epoch}/{cfg.epochs}: Verlust {entry.loss:.4f}, "
                    f"Genauigkeit {entry.accuracy:.3f}"
                    + (f", Test {entry.test_accuracy:.3f}" if entry.test_accuracy is not None else "")
                )
    finally:
        net.eval()
    return net, history


def require_eval(net: Network) -> None:
    """
    Analysen arbeiten nur auf Netzen im Eval-Modus.

    Raises:
        ModeError: Wenn das Netz im Train-Modus ist
    """
    if net.mode != Mode.EVAL:
        raise ModeError("Analyse erfordert ein Netz im Eval-Modus")


def map_chunks(fn: Callable[[np.ndarray], np.ndarray], X: np.ndarray, threads: int = 1,
               chunk_size: int = EVAL_CHUNK) -> np.ndarray:
    """
    Wendet fn auf aufeinanderfolgende Teilblöcke von X an und fügt die Ergebnisse zusammen.

    Die Aufteilung hängt nur von chunk_size ab, nicht von der Anzahl Threads;
    die Ergebnisse sind daher für jede Threadzahl identisch. Netze im Eval-Modus
    dürfen dabei von mehreren Threads gleichzeitig ausgewertet werden.

    Returns:
        np.ndarray: Ergebnisse entlang der ersten Achse verkettet
    """
    chunks = [X[i:i + chunk_size] for i in range(0, len(X), chunk_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fn, chunks))
    else:
        results = [fn(chunk) for chunk in chunks]
    return np.concatenate([np.asarray(r, dtype=np.float64) for r in results], axis=0)
