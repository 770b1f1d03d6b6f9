"""
Datenzugriff: Tabellen- und Bilddaten laden, aufteilen, normieren, PCA und synthetische Datensätze.
"""

import csv
import io
import logging
import math
import os
import struct
from typing import List, Optional, Sequence, Tuple

import numpy as np

from backend.app.core.exceptions import (
    DegenerateCovariance, EmptyDataset, FormatError, InconsistentDims, InsufficientRows,
    MissingColumn, ParseError, UnknownFeature,
)
from backend.app.models.datasets import DIABETES_FEATURES, DIABETES_LABEL, ImageDataset, TabularDataset
from backend.app.models.results import PCAResult
from backend.app.utils.image_io import read_image, write_image

logger = logging.getLogger(__name__)

PACK_MAGIC = b'SLIM'
PACK_VERSION = 1
MANIFEST_NAME = 'manifest.csv'
TOY_CLASSES = ['stripes_h', 'stripes_v', 'blob', 'checker']


# Tabellendaten

def load_tabular_csv(path: str, label_column: str = DIABETES_LABEL,
                     features: Optional[Sequence[str]] = None) -> TabularDataset:
    """
    Lädt eine CSV-Datei mit Kopfzeile und numerischen Zellen.

    Die Merkmale bleiben unnormiert; die z-Transformation erfolgt in split()
    mit den Statistiken des Trainingsteils.

    Args:
        path: Pfad zur CSV-Datei
        label_column: Spalte mit binärem Ziel
        features: Optionale Auswahl der Merkmalsspalten (Standard: alle übrigen)

    Returns:
        TabularDataset: Merkmale in Spaltenreihenfolge der Datei

    Raises:
        MissingColumn: Wenn Zielspalte oder ein Merkmal fehlt
        ParseError: Bei nicht numerischen Zellen oder Zielwerten außer 0/1 (mit Zeile und Spalte)
        EmptyDataset: Wenn die Datei keine Datenzeilen enthält
    """
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path} ist leer")
        if label_column not in header:
            raise MissingColumn(f"Zielspalte '{label_column}' fehlt in {path}")
        names = [h for h in header if h != label_column] if features is None else list(features)
        missing = [n for n in names if n not in header]
        if missing:
            raise MissingColumn(f"Spalten fehlen in {path}: {missing}")
        columns = [header.index(n) for n in names]
        label_idx = header.index(label_column)
        rows, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"Zeile {row_no}: {len(row)} Zellen, erwartet {len(header)}", row=row_no)
            values = []
            for idx in columns + [label_idx]:
                try:
                    value = float(row[idx])
                except ValueError:
                    value = math.nan
                if not math.isfinite(value):
                    raise ParseError(f"Zeile {row_no}, Spalte {header[idx]}: '{row[idx]}' ist keine Zahl",
                                     row=row_no, column=header[idx])
                values.append(value)
            if values[-1] not in (0.0, 1.0):
                raise ParseError(f"Zeile {row_no}, Spalte {label_column}: Zielwert {row[label_idx]} nicht 0/1",
                                 row=row_no, column=label_column)
            rows.append(values[:-1])
            labels.append(values[-1])
    if not rows:
        raise EmptyDataset(f"{path} enthält keine Datenzeilen")
    logger.info(f"{len(rows)} Zeilen mit {len(names)} Merkmalen aus {path} geladen")
    return TabularDataset(names, np.array(rows), np.array(labels))


def write_tabular_csv(dataset: TabularDataset, path: str, label_column: str = DIABETES_LABEL) -> str:
    """Schreibt Merkmale und Ziel als CSV; ganzzahlige Werte ohne Nachkommastellen."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(list(dataset.feature_names) + [label_column])
        for x, y in zip(dataset.X, dataset.y):
            writer.writerow([_format_cell(v) for v in x] + [int(y)])
    return path


def _format_cell(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _normalize(X: np.ndarray, stats: List[Tuple[float, float]]) -> np.ndarray:
    mean = np.array([m for m, _ in stats])
    std = np.array([s if s > 0 else 1.0 for _, s in stats])
    return (X - mean) / std


def zscore(dataset: TabularDataset) -> TabularDataset:
    """z-Transformation mit den eigenen Statistiken des Datensatzes."""
    if dataset.normalization is not None:
        return dataset
    mean, std = dataset.X.mean(axis=0), dataset.X.std(axis=0)
    stats = [(float(m), float(s)) for m, s in zip(mean, std)]
    constant = [n for n, s in zip(dataset.feature_names, std) if s == 0]
    return TabularDataset(list(dataset.feature_names), _normalize(dataset.X, stats), dataset.y.copy(),
                          stats, constant)


def normalize_with(dataset: TabularDataset, stats: Sequence[Sequence[float]]) -> TabularDataset:
    """Normiert Rohdaten mit gespeicherten Statistiken (z.B. aus den Metadaten eines Netzes)."""
    if dataset.normalization is not None:
        return dataset
    if len(stats) != dataset.k:
        raise UnknownFeature(f"{len(stats)} Normierungspaare für {dataset.k} Merkmale")
    stats = [(float(m), float(s)) for m, s in stats]
    constant = [n for n, (_, s) in zip(dataset.feature_names, stats) if s == 0]
    return TabularDataset(list(dataset.feature_names), _normalize(dataset.X, stats), dataset.y.copy(),
                          stats, constant)


def split(dataset: TabularDataset, train_n: int, test_n: int, seed: int = 1) -> Tuple[TabularDataset, TabularDataset]:
    """
    Zufällige Aufteilung mit festem Startwert und Normierung nach dem Trainingsteil.

    Nach dem Mischen bilden die ersten train_n Zeilen den Trainings- und die
    folgenden test_n Zeilen den Testteil; übrige Zeilen werden verworfen.

    Raises:
        InsufficientRows: Wenn train_n + test_n die Zeilenzahl übersteigt
    """
    n = len(dataset)
    if train_n < 1 or test_n < 0 or train_n + test_n > n:
        raise InsufficientRows(f"Aufteilung {train_n}/{test_n} bei {n} Zeilen nicht möglich")
    if dataset.normalization is not None:
        raise InsufficientRows("Datensatz ist bereits normiert; split erwartet Rohdaten")
    order = np.random.default_rng(seed).permutation(n)
    train_rows, test_rows = order[:train_n], order[train_n:train_n + test_n]
    X_train = dataset.X[train_rows]
    mean, std = X_train.mean(axis=0), X_train.std(axis=0)
    stats = [(float(m), float(s)) for m, s in zip(mean, std)]
    constant = [name for name, s in zip(dataset.feature_names, std) if s == 0]
    if constant:
        logger.warning(f"Konstante Merkmale im Trainingsteil: {constant}")
    names = list(dataset.feature_names)
    train = TabularDataset(names, _normalize(X_train, stats), dataset.y[train_rows], stats, constant)
    test = TabularDataset(names, _normalize(dataset.X[test_rows], stats), dataset.y[test_rows], stats, constant)
    logger.info(f"Aufteilung {train_n}/{test_n} (Startwert {seed}), {n - train_n - test_n} Zeilen ungenutzt")
    return train, test


def default_split_sizes(n: int) -> Tuple[int, int]:
    """500/200 ab 700 Zeilen, sonst 70/30."""
    if n >= 700:
        return 500, 200
    train_n = int(round(0.7 * n))
    return train_n, n - train_n


def feature_subset(dataset: TabularDataset, names: Sequence[str]) -> TabularDataset:
    """
    Spaltenauswahl in der angegebenen Reihenfolge.

    Raises:
        UnknownFeature: Wenn ein Name nicht im Datensatz vorkommt
    """
    unknown = [n for n in names if n not in dataset.feature_names]
    if unknown:
        raise UnknownFeature(f"Unbekannte Merkmale: {unknown}; vorhanden: {dataset.feature_names}")
    idx = [dataset.feature_names.index(n) for n in names]
    stats = None if dataset.normalization is None else [dataset.normalization[i] for i in idx]
    constant = [n for n in dataset.constant_features if n in names]
    return TabularDataset(list(names), dataset.X[:, idx].copy(), dataset.y.copy(), stats, constant)


def pca(dataset: TabularDataset) -> PCAResult:
    """
    Hauptkomponenten aus der Eigenzerlegung der Stichprobenkovarianz.

    Komponenten sind absteigend nach Eigenwert sortiert; das betragsgrößte
    Gewicht jeder Komponente ist positiv.

    Raises:
        DegenerateCovariance: Bei zu wenigen Zeilen oder verschwindender Gesamtvarianz
    """
    X = dataset.X
    n, k = X.shape
    if n <= k:
        raise DegenerateCovariance(f"PCA braucht mehr Zeilen ({n}) als Merkmale ({k})")
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    if not np.all(np.isfinite(cov)) or np.trace(cov) <= 0:
        raise DegenerateCovariance("Kovarianzmatrix ohne Varianz oder nicht endlich")
    eigenvalues, vectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    components = vectors[:, order].T
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ratios = eigenvalues / eigenvalues.sum()
    return PCAResult(list(dataset.feature_names), components, eigenvalues, ratios, X.mean(axis=0))


def rank_features_by_pca(result: PCAResult, threshold: float = 0.7) -> List[Tuple[str, float]]:
    """
    Rangfolge der Merkmale nach Gewicht in den führenden Komponenten.

    Bewertet wird sum_c ratio_c * |Gewicht_c| über die Komponenten, die
    kumuliert den Anteil threshold erreichen.
    """
    m = result.n_components_for(threshold)
    scores = result.explained_variance_ratio[:m] @ np.abs(result.components[:m])
    ranked = sorted(zip(result.feature_names, scores), key=lambda item: (-item[1], item[0]))
    return [(name, float(score)) for name, score in ranked]


# Bilddaten

def _labels_to_classes(raw: List[str]) -> Tuple[np.ndarray, List[str]]:
    if all(r.strip().lstrip('-').isdigit() for r in raw):
        labels = np.array([int(r) for r in raw], dtype=np.int64)
        n_classes = int(labels.max()) + 1 if len(labels) else 0
        return labels, [str(i) for i in range(n_classes)]
    names = sorted(set(r.strip() for r in raw))
    return np.array([names.index(r.strip()) for r in raw], dtype=np.int64), names


def _load_manifest(path: str) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    base = os.path.dirname(path)
    images, raw_labels, named = [], [], {}
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {'path', 'label'} <= set(reader.fieldnames):
            raise FormatError(f"Manifest {path} braucht die Spalten path,label")
        for row_no, row in enumerate(reader, start=2):
            image_path = os.path.join(base, row['path'])
            if not os.path.isfile(image_path):
                raise FormatError(f"Manifest {path}, Zeile {row_no}: Bild {image_path} fehlt")
            images.append(read_image(image_path))
            raw_labels.append(row['label'])
            if row.get('class'):
                named[row['label'].strip()] = row['class'].strip()
    if not images:
        raise EmptyDataset(f"Manifest {path} enthält keine Bilder")
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise InconsistentDims(f"Bilder mit unterschiedlichen Abmessungen: {sorted(shapes)}")
    labels, class_names = _labels_to_classes(raw_labels)
    # Optionale Spalte class benennt ganzzahlige Labels
    class_names = [named.get(name, name) for name in class_names]
    return np.stack(images), labels, class_names


def encode_pack(dataset: ImageDataset) -> bytes:
    """
    SLIM-Binärformat (little-endian):
        magic "SLIM" | u32 version | u32 n, H, W, C | u32 Klassenzahl
        | je Klasse u16 Länge + UTF-8-Name | n x u32 Labels | n*H*W*C u8 Pixel
    """
    n = len(dataset)
    h, w, c = dataset.shape
    out = io.BytesIO()
    out.write(PACK_MAGIC)
    out.write(struct.pack('<6I', PACK_VERSION, n, h, w, c, dataset.n_classes))
    for name in dataset.class_names:
        encoded = name.encode('utf-8')
        out.write(struct.pack('<H', len(encoded)))
        out.write(encoded)
    out.write(dataset.labels.astype('<u4').tobytes())
    out.write(np.ascontiguousarray(dataset.images, dtype=np.uint8).tobytes())
    return out.getvalue()


def decode_pack(payload: bytes, source: str = '<bytes>') -> Tuple[np.ndarray, np.ndarray, List[str]]:
    if payload[:4] != PACK_MAGIC:
        raise FormatError(f"{source}: keine SLIM-Datei")
    stream = io.BytesIO(payload[4:])

    def read(fmt: str):
        size = struct.calcsize(fmt)
        chunk = stream.read(size)
        if len(chunk) != size:
            raise FormatError(f"{source}: Datei unvollständig")
        return struct.unpack(fmt, chunk)

    version, n, h, w, c, n_classes = read('<6I')
    if version != PACK_VERSION:
        raise FormatError(f"{source}: nicht unterstützte Version {version}")
    class_names = []
    for _ in range(n_classes):
        (length,) = read('<H')
        raw = stream.read(length)
        if len(raw) != length:
            raise FormatError(f"{source}: Klassenname unvollständig")
        class_names.append(raw.decode('utf-8'))
    labels = np.frombuffer(stream.read(4 * n), dtype='<u4')
    pixels = np.frombuffer(stream.read(n * h * w * c), dtype=np.uint8)
    if len(labels) != n or len(pixels) != n * h * w * c or stream.read(1):
        raise FormatError(f"{source}: Datenlänge passt nicht zum Kopf")
    return pixels.reshape(n, h, w, c).copy(), labels.astype(np.int64), class_names


def pack_images(dataset: ImageDataset, path: str) -> str:
    """Schreibt einen Bilddatensatz als SLIM-Datei."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_pack(dataset))
    logger.info(f"{len(dataset)} Bilder nach {path} gepackt")
    return path


def is_image_source(path: str) -> bool:
    """Verzeichnis, SLIM-Datei oder CSV-Manifest mit Spalte path."""
    if os.path.isdir(path):
        return True
    if not os.path.isfile(path):
        return False
    with open(path, 'rb') as f:
        head = f.read(4096)
    if head[:4] == PACK_MAGIC:
        return True
    first = head.split(b'\n', 1)[0].decode('utf-8', errors='replace')
    return 'path' in [h.strip() for h in first.split(',')]


def split_images(dataset: ImageDataset, train_n: int, test_n: int,
                 seed: int = 1) -> Tuple[ImageDataset, ImageDataset]:
    """
    Zufällige Aufteilung eines Bilddatensatzes mit festem Startwert.

    Raises:
        InsufficientRows: Wenn train_n + test_n die Bildzahl übersteigt
    """
    n = len(dataset)
    if train_n < 1 or test_n < 0 or train_n + test_n > n:
        raise InsufficientRows(f"Aufteilung {train_n}/{test_n} bei {n} Bildern nicht möglich")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(order[:train_n]), dataset.subset(order[train_n:train_n + test_n])


def load_images(source: str, mean: Sequence[float] = (0.5,), std: Sequence[float] = (0.5,)) -> ImageDataset:
    """
    Lädt Bilder aus einem Verzeichnis mit manifest.csv, einer Manifestdatei oder einer SLIM-Datei.

    Pixel werden auf [0, 1] skaliert und je Kanal mit (mean, std) normiert,
    standardmäßig (x - 0.5) / 0.5.

    Raises:
        FormatError: Bei unbekanntem oder beschädigtem Format
        InconsistentDims: Bei Bildern unterschiedlicher Größe
    """
    if os.path.isdir(source):
        source = os.path.join(source, MANIFEST_NAME)
    if not os.path.isfile(source):
        raise FileNotFoundError(source)
    with open(source, 'rb') as f:
        head = f.read(4)
    if head == PACK_MAGIC:
        with open(source, 'rb') as f:
            images, labels, class_names = decode_pack(f.read(), source)
    elif source.endswith('.csv'):
        images, labels, class_names = _load_manifest(source)
    else:
        raise FormatError(f"{source}: weder SLIM-Datei noch CSV-Manifest")
    logger.info(f"{len(labels)} Bilder {images.shape[1:]} aus {source} geladen")
    return ImageDataset(images, labels, class_names, tuple(mean), tuple(std))


def save_image_folder(dataset: ImageDataset, directory: str) -> str:
    """Schreibt jedes Bild als PGM/PPM und ein manifest.csv (path,label,class)."""
    os.makedirs(directory, exist_ok=True)
    suffix = 'pgm' if dataset.shape[2] == 1 else 'ppm'
    manifest = os.path.join(directory, MANIFEST_NAME)
    with open(manifest, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['path', 'label', 'class'])
        for i, (pixels, label) in enumerate(zip(dataset.images, dataset.labels)):
            name = f"img_{i:05d}.{suffix}"
            write_image(os.path.join(directory, name), pixels)
            writer.writerow([name, int(label), dataset.class_names[label]])
    return manifest


# Synthetische Daten

def make_toy_images(n_per_class: int = 32, size: int = 16, seed: int = 1) -> ImageDataset:
    """
    Vier Klassen einfacher Muster: waagerechte Streifen, senkrechte Streifen, Fleck und Schachbrett.

    Jedes Bild hat eine zufällige Vordergrundfarbe, Phase bzw. Position und Rauschen.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    images, labels = [], []
    for _ in range(n_per_class):
        for cls in range(len(TOY_CLASSES)):
            phase = rng.integers(0, 4)
            if cls == 0:
                mask = ((yy + phase) // 2) % 2 == 0
            elif cls == 1:
                mask = ((xx + phase) // 2) % 2 == 0
            elif cls == 2:
                cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
                radius = rng.uniform(size * 0.18, size * 0.3)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
            else:
                mask = (((yy + phase) // 4) + ((xx + phase) // 4)) % 2 == 0
            color = rng.uniform(150, 255, size=3)
            background = rng.uniform(0, 70, size=3)
            image = np.where(mask[:, :, None], color, background) + rng.normal(0, 12, (size, size, 3))
            images.append(np.clip(np.rint(image), 0, 255).astype(np.uint8))
            labels.append(cls)
    return ImageDataset(np.stack(images), np.array(labels), list(TOY_CLASSES))


def make_toy_tabular(n: int = 768, seed: int = 1) -> TabularDataset:
    """
    Synthetischer Datensatz mit den Spalten des Pima-Diabetes-Datensatzes.

    Drei latente Faktoren (Alter, Körperbau, Stoffwechsel) und gemeinsam
    fehlende Werte (0) bei SkinThickness und Insulin erzeugen korrelierte
    Merkmale. Das Ziel hängt stark von Glucose, BMI und Age, mäßig von
    Insulin und kaum von den übrigen Merkmalen ab.
    """
    rng = np.random.default_rng(seed)
    age_f, body_f, meta_f = rng.normal(size=(3, n))

    def noise() -> np.ndarray:
        return rng.normal(size=n)

    pregnancies = np.clip(np.rint(3.8 + 2.6 * age_f + 1.8 * noise()), 0, 17)
    glucose = np.clip(np.rint(121 + 22 * meta_f + 20 * noise()), 44, 199)
    glucose[rng.random(n) < 0.007] = 0
    pressure = np.clip(np.rint(72 + 5 * age_f + 5 * body_f + 9 * noise()), 24, 122)
    pressure[rng.random(n) < 0.045] = 0
    skin = np.clip(np.rint(29 + 7 * body_f + 5 * noise()), 7, 99)
    insulin = np.clip(np.rint(155 + 60 * meta_f + 40 * body_f + 60 * noise()), 14, 846)
    missing = rng.random(n) < 0.3
    skin[missing] = 0
    insulin[missing | (rng.random(n) < 0.2)] = 0
    bmi = np.round(np.clip(32.4 + 5 * body_f + 1.5 * meta_f + 3 * noise(), 18.2, 67.1), 1)
    pedigree = np.round(np.clip(rng.lognormal(-0.9, 0.6, n), 0.078, 2.42), 3)
    age = np.clip(np.rint(33 + 9 * age_f + 6 * noise()), 21, 81)
    X = np.column_stack([pregnancies, glucose, pressure, skin, insulin, bmi, pedigree, age]).astype(np.float64)

    def z(col: np.ndarray) -> np.ndarray:
        return (col - col.mean()) / col.std()

    logit = (-0.8 + 1.5 * z(glucose) + 0.9 * z(bmi) + 0.7 * z(age) + 0.45 * z(insulin)
             + 0.15 * z(pregnancies) + 0.15 * z(pedigree))
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.float64)
    return TabularDataset(list(DIABETES_FEATURES), X, y)
