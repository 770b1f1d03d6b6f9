"""
Ausgabe von Ergebnissen als CSV und des Lauf-Manifests.

Gleitkommazahlen werden mit repr() geschrieben; gleiche Eingaben ergeben damit
bytegleiche Dateien.
"""

import csv
import json
import logging
import os
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from backend.app.models.results import AMResult, SensitivityIndices

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
INDEX_COLUMNS = ['factor', 's1', 's1_lo', 's1_hi', 'st', 'st_lo', 'st_hi']


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str, header: Optional[Sequence[str]], rows: Iterable[Sequence[Any]]) -> str:
    """Schreibt eine CSV-Datei mit Unix-Zeilenenden."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        if header:
            writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.debug(f"CSV geschrieben: {path}")
    return path


def write_matrix_csv(path: str, matrix: np.ndarray) -> str:
    """Matrix ohne Kopfzeile, eine Zeile je Bildzeile."""
    return write_csv(path, None, np.atleast_2d(matrix).tolist())


def write_indices_csv(path: str, indices: SensitivityIndices) -> str:
    rows = ([r[c] for c in INDEX_COLUMNS] for r in indices.rows())
    return write_csv(path, INDEX_COLUMNS, rows)


def write_s2_csv(path: str, indices: SensitivityIndices) -> str:
    """Matrix zweiter Ordnung mit Faktornamen als Kopfzeile und erster Spalte."""
    rows = ([name] + list(indices.s2[i]) for i, name in enumerate(indices.names))
    return write_csv(path, ['factor'] + list(indices.names), rows)


def write_convergence_csv(path: str, study: List[Tuple[int, SensitivityIndices]]) -> str:
    """Eine Zeile je (N, Faktor) mit Intervallgrenzen und -breiten."""
    header = ['n', 'factor', 's1', 's1_lo', 's1_hi', 's1_width', 'st', 'st_lo', 'st_hi', 'st_width']
    rows = []
    for n, indices in study:
        for r in indices.rows():
            rows.append([n, r['factor'], r['s1'], r['s1_lo'], r['s1_hi'], r['s1_hi'] - r['s1_lo'],
                         r['st'], r['st_lo'], r['st_hi'], r['st_hi'] - r['st_lo']])
    return write_csv(path, header, rows)


def write_trace_csv(path: str, result: AMResult) -> str:
    rows = [[0, result.initial_activation]] + [[t, a] for t, a in enumerate(result.activation_trace, start=1)]
    return write_csv(path, ['step', 'activation'], rows)


def write_epochs_csv(path: str, history: Sequence[Any]) -> str:
    rows = [[e.epoch, e.loss, e.accuracy, '' if e.test_accuracy is None else e.test_accuracy] for e in history]
    return write_csv(path, ['epoch', 'loss', 'accuracy', 'test_accuracy'], rows)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_manifest(out_dir: str, command: str, config: Dict[str, Any], artifacts: List[str],
                   extra: Optional[Dict[str, Any]] = None) -> str:
    """
    Schreibt manifest.json mit vollständig aufgelöster Konfiguration und erzeugten Dateien.

    Das Manifest kann über --config erneut eingelesen werden (Schlüssel "config").
    """
    from backend.app import __version__

    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        'tool': 'nn-senslab',
        'version': __version__,
        'command': command,
        'config': _jsonable(config),
        'artifacts': sorted(os.path.relpath(a, out_dir) for a in artifacts),
    }
    if extra:
        manifest.update(_jsonable(extra))
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Manifest geschrieben: {path}")
    return path
