"""
Kommandozeile des Sensitivitätslabors.

Jeder Unterbefehl liest Netz- und Datendateien nur lesend, schreibt seine
Artefakte (CSV, PGM/PPM, Gewichte) in das Ausgabeverzeichnis und legt dort ein
manifest.json mit der vollständig aufgelösten Konfiguration ab.

Vorrang der Einstellungen: Kommandozeile > JSON-Datei (--config) > config.ini.

Exit-Codes:
    0  Erfolg
    1  fachlicher Fehler (SensLabError)
    2  Aufruffehler (Argumente, ungültiger Stichprobenplan, fehlende Datei)
"""

import argparse
import json
import logging
import math
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.app.core.architectures import build_network
from backend.app.core.attribution import am_ascend, cross_class_am, grad_cam, image_shape, predicted_class
from backend.app.core.data_manager import (
    default_split_sizes, feature_subset, is_image_source, load_images, load_tabular_csv, make_toy_images,
    make_toy_tabular, normalize_with, pack_images, pca, rank_features_by_pca, save_image_folder, split,
    split_images, write_tabular_csv, zscore,
)
from backend.app.core.exceptions import ConfigError, PlanError, SensLabError, ShapeMismatch
from backend.app.core.layers import Dense
from backend.app.core.local_sensitivity import STATISTICS, class_mean_map, pixel_sensitivity, pixelate, sensitivity_profile
from backend.app.core.network import Network, accuracy, predict
from backend.app.core.network import train as train_network
from backend.app.core.sobol_engine import (
    analyze_function, analyze_model, convergence_study, default_n_values, model_function,
)
from backend.app.core.test_functions import TEST_FUNCTIONS, get_test_function
from backend.app.core.weights_store import load_weights, save_weights
from backend.app.models.configs import (
    AMConfig, ClassLogit, FromImage, LayerNeuron, OutputSelector, SobolOrder, SobolPlan, TrainConfig,
    UniformRandom,
)
from backend.app.models.datasets import DIABETES_LABEL, ImageDataset, TabularDataset
from backend.app.utils import report
from backend.app.utils.image_io import colorize, overlay, to_gray, write_image
from backend.app.utils.logger import set_level
from backend.config.config import (
    AM_BLUR_RADIUS, AM_BLUR_SIGMA, AM_EPS1, AM_EPS2, AM_STEPS, BATCH_SIZE, DEBUG, EPOCHS, L2_LAMBDA,
    LEARNING_RATE, LOCAL_SENS_EPSILON, LOCAL_SENS_PIXELATE, OUTPUT_DIR, SEED, SOBOL_BOOTSTRAP,
    SOBOL_CONFIDENCE_LEVEL, SOBOL_N_BASE, SOBOL_SKIP, THREADS, WEB_HOST, WEB_PORT,
)

logger = logging.getLogger(__name__)

TOP_FEATURES = 'Glucose,BMI,Age,Insulin'
DEPTH_ARCHS = 'vgg-tiny,resnet-tiny'

COMMON_DEFAULTS: Dict[str, Any] = {
    'seed': SEED,
    'threads': THREADS,
    'out': None,
    'log_level': None,
}

_TRAINING = {
    'epochs': EPOCHS,
    'lr': LEARNING_RATE,
    'l2': L2_LAMBDA,
    'batch_size': BATCH_SIZE,
    'train_n': None,
    'test_n': None,
    'label_column': DIABETES_LABEL,
}

_SOBOL_SOURCE = {
    'weights': None,
    'function': None,
    'params': None,
    'data': None,
    'label_column': DIABETES_LABEL,
    'order': SobolOrder.FIRST_TOTAL.value,
    'bootstrap': SOBOL_BOOTSTRAP,
    'level': SOBOL_CONFIDENCE_LEVEL,
    'skip': SOBOL_SKIP,
}

COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'train': dict(_TRAINING, arch=None, data=None, features=None),
    'eval': {'weights': None, 'data': None, 'label_column': DIABETES_LABEL},
    'sobol': dict(_SOBOL_SOURCE, n=SOBOL_N_BASE, target='output', layer=None),
    'convergence': dict(_SOBOL_SOURCE, n_min=128, n_max=65536),
    'local-sens': {
        'weights': None, 'data': None, 'image': 0, 'cls': None, 'n_images': 1, 'block': 1,
        'channel': None, 'eps': LOCAL_SENS_EPSILON, 'pixelate': LOCAL_SENS_PIXELATE, 'statistic': 'mean',
    },
    'am': {
        'weights': None, 'data': None, 'layer': None, 'neuron': 0, 'cls': None, 'image': None,
        'eps1': AM_EPS1, 'eps2': AM_EPS2, 'steps': AM_STEPS, 'reg': 'none', 'blur_sigma': AM_BLUR_SIGMA,
        'blur_radius': AM_BLUR_RADIUS, 'clamp': [-1.0, 1.0], 'init_seed': None,
        'label_column': DIABETES_LABEL,
    },
    'grad-cam': {'weights': None, 'data': None, 'image': 0, 'cls': None, 'layer': None},
    'pca': {'data': None, 'features': None, 'threshold': 0.7, 'label_column': DIABETES_LABEL},
    'ablation': dict(_TRAINING, data=None, top=TOP_FEATURES),
    'depth-profile': dict(_TRAINING, data=None, archs=DEPTH_ARCHS, epochs=15, lr=0.05, n_images=9,
                          eps=LOCAL_SENS_EPSILON, toy_per_class=32),
    'make-toy': {'kind': 'tabular', 'n': None, 'size': 16, 'format': 'folder'},
    'serve': {'host': WEB_HOST, 'port': WEB_PORT, 'debug': DEBUG},
}


class UsageError(Exception):
    """Fehlerhafter Aufruf; führt zu Exit-Code 2."""


# Argumente

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group('global')
    group.add_argument('--seed', type=int, help=f"Startwert (Standard {SEED})")
    group.add_argument('--out', help=f"Ausgabeverzeichnis (Standard {OUTPUT_DIR}/<befehl>)")
    group.add_argument('--threads', type=int, help=f"Parallele Auswertungen (Standard {THREADS})")
    group.add_argument('--config', help="JSON-Datei mit Einstellungen oder manifest.json eines Laufs")
    group.add_argument('--log-level', dest='log_level', help="DEBUG, INFO, WARNING oder ERROR")
    return common


def _training_args(p: argparse.ArgumentParser) -> None:
    p.add_argument('--epochs', type=int)
    p.add_argument('--lr', type=float, help="Lernrate eta")
    p.add_argument('--l2', type=float, help="L2-Koeffizient lambda")
    p.add_argument('--batch-size', dest='batch_size', type=int)
    p.add_argument('--train-n', dest='train_n', type=int, help="Größe des Trainingsteils")
    p.add_argument('--test-n', dest='test_n', type=int, help="Größe des Testteils")
    p.add_argument('--label-column', dest='label_column')


def _sobol_source_args(p: argparse.ArgumentParser) -> None:
    p.add_argument('--weights', help="Gewichtsdatei eines Netzes mit Vektoreingabe")
    p.add_argument('--function', choices=TEST_FUNCTIONS, help="Eingebaute Testfunktion statt eines Netzes")
    p.add_argument('--params', help="Parameter der Testfunktion, kommagetrennt")
    p.add_argument('--data', help="Datensatz für die Grenzen (Standard: Grenzen aus den Gewichten)")
    p.add_argument('--label-column', dest='label_column')
    p.add_argument('--order', choices=[o.value for o in SobolOrder])
    p.add_argument('--bootstrap', type=int, help="Bootstrap-Wiederholungen")
    p.add_argument('--level', type=float, help="Konfidenzniveau")
    p.add_argument('--skip', type=int, help="Verworfene Anfangspunkte der Sobol-Folge")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog='senslab', description="Sensitivitätsanalyse kleiner neuronaler Netze")
    sub = parser.add_subparsers(dest='command', metavar='command')

    p = sub.add_parser('train', parents=[common], help="Netz trainieren")
    p.add_argument('--arch', help="mlp-<in>-<hidden>-<out>, vgg-tiny, resnet-tiny oder JSON-Datei")
    p.add_argument('--data', help="Tabellen-CSV oder Bildquelle")
    p.add_argument('--features', help="Merkmalsauswahl, kommagetrennt")
    _training_args(p)

    p = sub.add_parser('eval', parents=[common], help="Genauigkeit eines Netzes bestimmen")
    p.add_argument('--weights')
    p.add_argument('--data')
    p.add_argument('--label-column', dest='label_column')

    p = sub.add_parser('sobol', parents=[common], help="Sobol-Indizes")
    _sobol_source_args(p)
    p.add_argument('--n', type=int, help="Basisumfang N (Zweierpotenz)")
    p.add_argument('--target', choices=['output', 'hidden'])
    p.add_argument('--layer', type=int, help="Schichtindex für --target hidden (Standard: erste Dense-Schicht)")

    p = sub.add_parser('convergence', parents=[common], help="Konvergenz der Indizes über N")
    _sobol_source_args(p)
    p.add_argument('--n-min', dest='n_min', type=int)
    p.add_argument('--n-max', dest='n_max', type=int)

    p = sub.add_parser('local-sens', parents=[common], help="Pixelsensitivitätskarten")
    p.add_argument('--weights')
    p.add_argument('--data', help="Bildquelle")
    p.add_argument('--image', type=int, help="Bildindex")
    p.add_argument('--class', dest='cls', type=int, help="Mittelwertkarte über Bilder dieser Klasse")
    p.add_argument('--n-images', dest='n_images', type=int)
    p.add_argument('--block', type=int)
    p.add_argument('--channel', type=int, help="Farbkanal (Standard: alle)")
    p.add_argument('--eps', type=float)
    p.add_argument('--pixelate', type=int, help="Kachelgröße b")
    p.add_argument('--statistic', choices=STATISTICS)

    p = sub.add_parser('am', parents=[common], help="Aktivierungsmaximierung")
    p.add_argument('--weights')
    p.add_argument('--data', help="Datenquelle für --image")
    p.add_argument('--layer', type=int)
    p.add_argument('--neuron', type=int)
    p.add_argument('--class', dest='cls', type=int)
    p.add_argument('--image', type=int, help="Startbild aus --data")
    p.add_argument('--eps1', type=float)
    p.add_argument('--eps2', type=float)
    p.add_argument('--steps', type=int)
    p.add_argument('--reg', choices=['none', 'tv', 'blur'])
    p.add_argument('--blur-sigma', dest='blur_sigma', type=float)
    p.add_argument('--blur-radius', dest='blur_radius', type=int)
    p.add_argument('--clamp', nargs=2, type=float, metavar=('LO', 'HI'))
    p.add_argument('--init-seed', dest='init_seed', type=int)
    p.add_argument('--label-column', dest='label_column')

    p = sub.add_parser('grad-cam', parents=[common], help="Grad-CAM-Karte")
    p.add_argument('--weights')
    p.add_argument('--data')
    p.add_argument('--image', type=int)
    p.add_argument('--class', dest='cls', type=int, help="Zielklasse (Standard: Vorhersage)")
    p.add_argument('--layer', type=int, help="Faltungsschicht (Standard: letzte)")

    p = sub.add_parser('pca', parents=[common], help="Hauptkomponentenanalyse")
    p.add_argument('--data')
    p.add_argument('--features')
    p.add_argument('--threshold', type=float)
    p.add_argument('--label-column', dest='label_column')

    p = sub.add_parser('ablation', parents=[common], help="Training auf Merkmalsteilmengen")
    p.add_argument('--data')
    p.add_argument('--top', help=f"Starke Merkmale (Standard {TOP_FEATURES})")
    _training_args(p)

    p = sub.add_parser('depth-profile', parents=[common], help="Sensitivität je Block, VGG gegen ResNet")
    p.add_argument('--data', help="Bildquelle (Standard: synthetische Bilder)")
    p.add_argument('--archs')
    p.add_argument('--n-images', dest='n_images', type=int)
    p.add_argument('--eps', type=float)
    p.add_argument('--toy-per-class', dest='toy_per_class', type=int)
    _training_args(p)

    p = sub.add_parser('make-toy', parents=[common], help="Synthetische Datensätze schreiben")
    p.add_argument('--kind', choices=['tabular', 'images'])
    p.add_argument('--n', type=int, help="Zeilen bzw. Bilder je Klasse")
    p.add_argument('--size', type=int)
    p.add_argument('--format', choices=['folder', 'pack'])

    p = sub.add_parser('serve', parents=[common], help="JSON-API starten")
    p.add_argument('--host')
    p.add_argument('--port', type=int)
    p.add_argument('--debug', action='store_true', default=None)
    return parser


def load_config_file(path: str) -> Dict[str, Any]:
    """Liest eine JSON-Konfiguration; bei einem Manifest zählt dessen Abschnitt config."""
    if not os.path.isfile(path):
        raise UsageError(f"Konfigurationsdatei nicht gefunden: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"Konfigurationsdatei {path} ist kein gültiges JSON: {e}")
    if not isinstance(data, dict):
        raise UsageError(f"Konfigurationsdatei {path} muss ein JSON-Objekt enthalten")
    if isinstance(data.get('config'), dict):
        data = data['config']
    return data


def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    """Fasst config.ini-Standardwerte, JSON-Datei und Kommandozeile zusammen."""
    defaults = dict(COMMON_DEFAULTS)
    defaults.update(COMMAND_DEFAULTS[args.command])
    cfg = dict(defaults)
    if args.config:
        file_cfg = load_config_file(args.config)
        cfg.update({k: v for k, v in file_cfg.items() if k in defaults})
    cfg.update({k: v for k, v in vars(args).items() if k in defaults and v is not None})
    if cfg['out'] is None:
        cfg['out'] = os.path.join(OUTPUT_DIR, args.command)
    return cfg


# Hilfsfunktionen

def _names(value: Any) -> Optional[List[str]]:
    if value is None:
        return None
    if isinstance(value, str):
        return [v.strip() for v in value.split(',') if v.strip()]
    return [str(v) for v in value]


def _floats(value: Any) -> Optional[List[float]]:
    names = _names(value)
    if not names:
        return None
    try:
        return [float(v) for v in names]
    except ValueError:
        raise UsageError(f"Parameter müssen Zahlen sein: {value}")


def _require(cfg: Dict[str, Any], key: str) -> Any:
    if cfg.get(key) is None:
        raise UsageError(f"--{key.replace('_', '-')} ist erforderlich")
    return cfg[key]


def _existing(path: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"Datei nicht gefunden: {path}")
    return path


def _load_net(cfg: Dict[str, Any]) -> Network:
    net = load_weights(_existing(_require(cfg, 'weights')))
    net.eval()
    return net


def _is_image_net(net: Network) -> bool:
    return len(net.input_shape) == 3


def _tabular_for_net(net: Network, path: str, label_column: str) -> TabularDataset:
    """Lädt Rohdaten mit den Merkmalen des Netzes und normiert sie mit dessen Statistiken."""
    features = net.metadata.get('features')
    raw = load_tabular_csv(path, label_column, features)
    stats = net.metadata.get('normalization')
    data = normalize_with(raw, stats) if stats else raw
    if net.input_shape != (data.k,):
        raise ShapeMismatch(f"Netz erwartet Eingabe {net.input_shape}, Daten haben {data.k} Merkmale")
    return data


def _images_for_net(net: Network, path: str) -> ImageDataset:
    dataset = load_images(path, net.metadata.get('mean', (0.5,)), net.metadata.get('std', (0.5,)))
    if dataset.input_shape != net.input_shape:
        raise ShapeMismatch(f"Bilder {dataset.input_shape} passen nicht zum Netz {net.input_shape}")
    return dataset


def _image_index(dataset: ImageDataset, index: int) -> int:
    if not 0 <= index < len(dataset):
        raise ConfigError(f"Bildindex {index} außerhalb von [0, {len(dataset)})")
    return index


def _to_pixels(net: Network, image: np.ndarray) -> np.ndarray:
    mean = np.asarray(net.metadata.get('mean', [0.5]), dtype=np.float64)
    std = np.asarray(net.metadata.get('std', [0.5]), dtype=np.float64)
    return np.clip(np.rint((np.asarray(image) * std + mean) * 255.0), 0, 255).astype(np.uint8)


def _split_sizes(cfg: Dict[str, Any], n: int) -> Tuple[int, int]:
    train_n, test_n = cfg.get('train_n'), cfg.get('test_n')
    if train_n is None and test_n is None:
        return default_split_sizes(n)
    if train_n is None:
        return n - test_n, test_n
    if test_n is None:
        return train_n, n - train_n
    return train_n, test_n


def _train_config(cfg: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(learning_rate=cfg['lr'], l2_lambda=cfg['l2'], epochs=cfg['epochs'],
                       batch_size=cfg['batch_size'], seed=cfg['seed'])


def _train_tabular(raw: TabularDataset, cfg: Dict[str, Any], arch: Optional[str] = None):
    """Aufteilen, Netz bauen, trainieren; liefert (Netz, Verlauf, Trainings- und Testgenauigkeit)."""
    train_n, test_n = _split_sizes(cfg, len(raw))
    train_set, test_set = split(raw, train_n, test_n, cfg['seed'])
    net = build_network(arch or f"mlp-{train_set.k}-10-1", cfg['seed'])
    if net.input_shape != (train_set.k,):
        raise ConfigError(f"Architektur {net.name} erwartet {net.input_shape}, Daten haben {train_set.k} Merkmale")
    net.metadata = {
        'kind': 'tabular',
        'features': list(train_set.feature_names),
        'normalization': [list(s) for s in train_set.normalization],
        'bounds': [list(b) for b in train_set.bounds()],
        'constant_features': list(train_set.constant_features),
        'label_column': cfg['label_column'],
    }
    eval_data = (test_set.X, test_set.y) if len(test_set) else None
    net, history = train_network(net, train_set.X, train_set.y, _train_config(cfg), eval_data=eval_data)
    test_acc = accuracy(net, test_set.X, test_set.y) if len(test_set) else math.nan
    return net, history, accuracy(net, train_set.X, train_set.y), test_acc


def _train_images(dataset: ImageDataset, cfg: Dict[str, Any], arch: str):
    train_n, test_n = _split_sizes(cfg, len(dataset))
    train_set, test_set = split_images(dataset, train_n, test_n, cfg['seed'])
    net = build_network(arch, cfg['seed'], input_shape=dataset.input_shape, n_classes=dataset.n_classes)
    if net.input_shape != dataset.input_shape:
        raise ConfigError(f"Architektur {net.name} erwartet {net.input_shape}, Bilder haben {dataset.input_shape}")
    net.metadata = dict(dataset.metadata(), kind='image')
    X_train, X_test = train_set.network_inputs(), test_set.network_inputs()
    eval_data = (X_test, test_set.labels) if len(test_set) else None
    net, history = train_network(net, X_train, train_set.labels, _train_config(cfg), eval_data=eval_data)
    test_acc = accuracy(net, X_test, test_set.labels) if len(test_set) else math.nan
    return net, history, accuracy(net, X_train, train_set.labels), test_acc, test_set


def _finish(cfg: Dict[str, Any], command: str, artifacts: List[str], results: Optional[Dict[str, Any]] = None) -> int:
    run_cfg = {k: v for k, v in cfg.items() if k != 'log_level'}
    extra = {'results': results} if results else None
    manifest = report.write_manifest(cfg['out'], command, run_cfg, artifacts, extra)
    print(f"Manifest: {manifest}")
    return 0


def _out(cfg: Dict[str, Any], name: str) -> str:
    return os.path.join(cfg['out'], name)


# Befehle

def cmd_train(cfg: Dict[str, Any]) -> int:
    """Trainiert ein Netz und schreibt Gewichte sowie Epochenmetriken."""
    data = _existing(_require(cfg, 'data'))
    if is_image_source(data):
        dataset = load_images(data)
        net, history, train_acc, test_acc, _ = _train_images(dataset, cfg, cfg['arch'] or 'vgg-tiny')
    else:
        raw = load_tabular_csv(data, cfg['label_column'], _names(cfg['features']))
        net, history, train_acc, test_acc = _train_tabular(raw, cfg, cfg['arch'])
    weights = _out(cfg, 'weights.slns')
    sidecar = save_weights(net, weights)
    metrics = report.write_epochs_csv(_out(cfg, 'epochs.csv'), history)
    print(f"train_accuracy={train_acc:.4f}")
    print(f"test_accuracy={test_acc:.4f}")
    print(f"Gewichte: {weights}")
    return _finish(cfg, 'train', [weights, sidecar, metrics],
                   {'train_accuracy': train_acc, 'test_accuracy': test_acc, 'arch': net.name})


def cmd_eval(cfg: Dict[str, Any]) -> int:
    """Genauigkeit eines gespeicherten Netzes auf einem Datensatz."""
    net = _load_net(cfg)
    data = _existing(_require(cfg, 'data'))
    if _is_image_net(net):
        dataset = _images_for_net(net, data)
        X, y = dataset.network_inputs(), dataset.labels
    else:
        dataset = _tabular_for_net(net, data, cfg['label_column'])
        X, y = dataset.X, dataset.y
    out = predict(net, X)
    predicted = (out[:, 0] > 0.5).astype(int) if out.shape[1] == 1 else out.argmax(axis=1)
    acc = accuracy(net, X, y)
    path = report.write_csv(_out(cfg, 'predictions.csv'), ['index', 'label', 'predicted'],
                            ([i, int(label), int(p)] for i, (label, p) in enumerate(zip(y, predicted))))
    print(f"accuracy={acc:.4f} (n={len(y)})")
    return _finish(cfg, 'eval', [path], {'accuracy': acc, 'n': len(y)})


def _sobol_source(cfg: Dict[str, Any]):
    """Modellfunktion, Grenzen, Faktornamen, exakte Indizes (nur Testfunktionen) und Netz."""
    if cfg['function'] and cfg['weights']:
        raise UsageError("--function und --weights schließen sich aus")
    if cfg['function']:
        tf = get_test_function(cfg['function'], _floats(cfg['params']))
        return tf, tf.bounds, [f"x{i + 1}" for i in range(tf.k)], tf.exact, None
    if not cfg['weights']:
        raise UsageError("--weights oder --function ist erforderlich")
    net = _load_net(cfg)
    if _is_image_net(net):
        raise ConfigError("Sobol-Analyse braucht ein Netz mit Vektoreingabe")
    if cfg['data']:
        bounds = _tabular_for_net(net, _existing(cfg['data']), cfg['label_column']).bounds()
    elif net.metadata.get('bounds'):
        bounds = [tuple(b) for b in net.metadata['bounds']]
    else:
        raise ConfigError("Gewichte enthalten keine Grenzen; --data angeben")
    names = net.metadata.get('features') or [f"x{i + 1}" for i in range(len(bounds))]
    return None, bounds, names, None, net


def _plan(cfg: Dict[str, Any], bounds, names, n_base: int) -> SobolPlan:
    return SobolPlan(bounds=bounds, n_base=n_base, order=cfg['order'], bootstrap_resamples=cfg['bootstrap'],
                     confidence_level=cfg['level'], seed=cfg['seed'], skip=cfg['skip'], names=list(names))


def _first_dense(net: Network) -> int:
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            return i
    raise ConfigError("Netz enthält keine Dense-Schicht")


def _suffix(name: str) -> str:
    return '' if name == 'output' else f"_{name}"


def cmd_sobol(cfg: Dict[str, Any]) -> int:
    """Sobol-Indizes eines Netzes oder einer Testfunktion."""
    fn, bounds, names, exact, net = _sobol_source(cfg)
    plan = _plan(cfg, bounds, names, cfg['n'])
    if cfg['target'] == 'hidden':
        if net is None:
            raise UsageError("--target hidden erfordert --weights")
        layer = _first_dense(net) if cfg['layer'] is None else cfg['layer']
        results = analyze_model(net, plan, OutputSelector(layer), cfg['threads'], on_zero_variance='nan')
    elif net is not None:
        results = analyze_model(net, plan, threads=cfg['threads'])
    else:
        results = analyze_function(fn, plan, cfg['threads'])

    artifacts = []
    for result in results:
        artifacts.append(report.write_indices_csv(_out(cfg, f"indices{_suffix(result.output)}.csv"), result))
        if result.s2 is not None:
            artifacts.append(report.write_s2_csv(_out(cfg, f"s2{_suffix(result.output)}.csv"), result))
    if exact is not None:
        s1, st = exact
        artifacts.append(report.write_csv(_out(cfg, 'exact.csv'), ['factor', 's1', 'st'],
                                          ([n, a, b] for n, a, b in zip(names, s1, st))))
    first = results[0]
    print(f"{'factor':>26} {'S1':>8} {'ST':>8}  ({first.output}, N={plan.n_base}, {first.n_evaluations} Auswertungen)")
    for row in first.rows():
        print(f"{row['factor']:>26} {row['s1']:8.4f} {row['st']:8.4f}")
    return _finish(cfg, 'sobol', artifacts, {'outputs': [r.output for r in results],
                                             'ranking_s1': first.ranking('s1')})


def cmd_convergence(cfg: Dict[str, Any]) -> int:
    """Wiederholt die Analyse für N = n_min ... n_max (Faktor 4)."""
    fn, bounds, names, _, net = _sobol_source(cfg)
    if net is not None:
        fn, _ = model_function(net)
    plan = _plan(cfg, bounds, names, cfg['n_min'])
    if cfg['n_max'] < cfg['n_min']:
        raise UsageError(f"--n-max {cfg['n_max']} kleiner als --n-min {cfg['n_min']}")
    n_values = default_n_values(cfg['n_min'], cfg['n_max'])
    # Jeder Umfang muss vor dem ersten Lauf ein gültiger Plan sein
    for n in n_values:
        plan.with_n(n)
    study = convergence_study(fn, plan, n_values, cfg['threads'])
    path = report.write_convergence_csv(_out(cfg, 'convergence.csv'), study)
    for n, result in study:
        widths = ' '.join(f"{w:.4f}" for w in result.ci_width('s1'))
        print(f"N={n:>6}: S1-Intervallbreiten {widths}")
    return _finish(cfg, 'convergence', [path], {'n_values': n_values, 'rows': len(n_values) * plan.k})


def _write_map(cfg: Dict[str, Any], stem: str, values: np.ndarray) -> List[str]:
    return [
        report.write_matrix_csv(_out(cfg, f"{stem}.csv"), values),
        write_image(_out(cfg, f"{stem}.pgm"), to_gray(values)),
        write_image(_out(cfg, f"{stem}_color.ppm"), colorize(values)),
    ]


def cmd_local_sens(cfg: Dict[str, Any]) -> int:
    """Pixelsensitivitätskarten eines Blocks je Farbkanal."""
    net = _load_net(cfg)
    if not _is_image_net(net):
        raise ConfigError("Lokale Sensitivität braucht ein Bildnetz")
    dataset = _images_for_net(net, _existing(_require(cfg, 'data')))
    channels = range(net.input_shape[0]) if cfg['channel'] is None else [cfg['channel']]
    q = cfg['block']
    artifacts, scales = [], {}
    for channel in channels:
        if cfg['cls'] is not None:
            sens_map, _ = class_mean_map(net, dataset, cfg['cls'], q, channel, cfg['eps'], cfg['n_images'],
                                         cfg['statistic'], cfg['threads'])
        else:
            index = _image_index(dataset, cfg['image'])
            sens_map = pixel_sensitivity(net, dataset.normalized(index), q, channel, cfg['eps'], cfg['threads'])
        sens_map = pixelate(sens_map, cfg['pixelate'])
        artifacts += _write_map(cfg, f"sens_block{q}_ch{channel}", sens_map.values)
        scales[channel] = sens_map.scale_exponent
        print(f"Block {q}, Kanal {channel}: {sens_map.shape[0]}x{sens_map.shape[1]}, "
              f"Skala 10^{sens_map.scale_exponent}, mittleres |s| {sens_map.mean_abs:.4g}")
    return _finish(cfg, 'local-sens', artifacts, {'scale_exponents': scales})


def cmd_am(cfg: Dict[str, Any]) -> int:
    """Aktivierungsmaximierung für ein Neuron oder eine Klasse."""
    net = _load_net(cfg)
    if cfg['cls'] is not None:
        target = ClassLogit(cfg['cls'])
    else:
        layer = len(net.layers) - 1 if cfg['layer'] is None else cfg['layer']
        target = LayerNeuron(layer, cfg['neuron'])
    start = None
    if cfg['image'] is not None:
        data = _existing(_require(cfg, 'data'))
        if _is_image_net(net):
            dataset = _images_for_net(net, data)
            start = dataset.normalized(_image_index(dataset, cfg['image']))
        else:
            rows = _tabular_for_net(net, data, cfg['label_column']).X
            if not 0 <= cfg['image'] < len(rows):
                raise ConfigError(f"Zeilenindex {cfg['image']} außerhalb von [0, {len(rows)})")
            start = rows[cfg['image']]
    seed = cfg['seed'] if cfg['init_seed'] is None else cfg['init_seed']
    am_cfg = AMConfig(target=target, eps1=cfg['eps1'], eps2=cfg['eps2'], steps=cfg['steps'],
                      init=UniformRandom(seed=seed) if start is None else FromImage(start),
                      regularizer=cfg['reg'], blur_sigma=cfg['blur_sigma'], blur_radius=cfg['blur_radius'],
                      clamp=tuple(cfg['clamp']))
    if isinstance(target, ClassLogit) and start is not None:
        result = cross_class_am(net, start, target.cls, am_cfg)
    else:
        result = am_ascend(net, am_cfg)

    artifacts = [report.write_trace_csv(_out(cfg, 'am_trace.csv'), result)]
    if _is_image_net(net):
        suffix = 'pgm' if image_shape(net)[2] == 1 else 'ppm'
        artifacts.append(write_image(_out(cfg, f"am.{suffix}"), _to_pixels(net, result.image)))
    else:
        names = net.metadata.get('features') or [f"x{i + 1}" for i in range(result.image.size)]
        artifacts.append(report.write_csv(_out(cfg, 'am_input.csv'), ['feature', 'value'],
                                          zip(names, result.image.reshape(-1))))
    print(f"Aktivierung {result.initial_activation:.6g} -> {result.final_activation:.6g} "
          f"(Zugewinn {result.gain:.6g})")
    results = {'initial_activation': result.initial_activation, 'final_activation': result.final_activation}
    if result.source_class is not None:
        print(f"Vorhergesagte Klasse des Startbilds: {result.source_class}")
        results['source_class'] = result.source_class
    return _finish(cfg, 'am', artifacts, results)


def cmd_grad_cam(cfg: Dict[str, Any]) -> int:
    """Grad-CAM-Karte und Überlagerung für ein Bild."""
    net = _load_net(cfg)
    if not _is_image_net(net):
        raise ConfigError("Grad-CAM braucht ein Bildnetz")
    dataset = _images_for_net(net, _existing(_require(cfg, 'data')))
    index = _image_index(dataset, cfg['image'])
    image = dataset.normalized(index)
    target = predicted_class(net, image) if cfg['cls'] is None else cfg['cls']
    cam = grad_cam(net, image, target, cfg['layer'])
    heat = np.rint(np.clip(cam.upsampled, 0.0, 1.0) * 255.0).astype(np.uint8)
    artifacts = [
        report.write_matrix_csv(_out(cfg, 'gradcam.csv'), cam.upsampled),
        report.write_matrix_csv(_out(cfg, 'gradcam_map.csv'), cam.values),
        write_image(_out(cfg, 'gradcam.pgm'), heat),
        write_image(_out(cfg, 'gradcam_overlay.ppm'), overlay(dataset.images[index], cam.upsampled)),
    ]
    print(f"Grad-CAM: Bild {index}, Klasse {target}, Schicht {cam.layer}")
    return _finish(cfg, 'grad-cam', artifacts, {'target_class': target, 'layer': cam.layer})


def cmd_pca(cfg: Dict[str, Any]) -> int:
    """PCA auf z-normierten Merkmalen mit Merkmalsrangfolge."""
    raw = load_tabular_csv(_existing(_require(cfg, 'data')), cfg['label_column'], _names(cfg['features']))
    result = pca(zscore(raw))
    ratios = result.explained_variance_ratio
    cumulative = np.cumsum(ratios)
    artifacts = [
        report.write_csv(_out(cfg, 'pca_ratios.csv'), ['component', 'eigenvalue', 'ratio', 'cumulative'],
                         ([i + 1, ev, r, c] for i, (ev, r, c)
                          in enumerate(zip(result.explained_variance, ratios, cumulative)))),
        report.write_csv(_out(cfg, 'pca_loadings.csv'),
                         ['feature'] + [f"pc{i + 1}" for i in range(len(ratios))],
                         ([name] + list(result.components[:, j]) for j, name in enumerate(result.feature_names))),
    ]
    ranking = rank_features_by_pca(result, cfg['threshold'])
    artifacts.append(report.write_csv(_out(cfg, 'pca_ranking.csv'), ['rank', 'feature', 'score'],
                                      ([i + 1, n, s] for i, (n, s) in enumerate(ranking))))
    m = result.n_components_for(cfg['threshold'])
    top4 = result.cumulative_ratio(min(4, len(ratios)))
    print(f"Kumulierter Anteil der ersten 4 Komponenten: {top4:.4f}")
    print(f"{m} Komponenten erreichen {cfg['threshold']:.2f}; Rangfolge: {', '.join(n for n, _ in ranking)}")
    return _finish(cfg, 'pca', artifacts, {'top4_cumulative_ratio': top4, 'components_for_threshold': m})


def cmd_ablation(cfg: Dict[str, Any]) -> int:
    """Vergleicht volle, starke und schwache Merkmalsmengen bei gleichem Training."""
    raw = load_tabular_csv(_existing(_require(cfg, 'data')), cfg['label_column'])
    top = _names(cfg['top'])
    feature_subset(raw, top)
    weak = [n for n in raw.feature_names if n not in top]
    if not weak:
        raise ConfigError("Starke Merkmale umfassen alle Merkmale, keine schwache Teilmenge übrig")
    rows, artifacts, results = [], [], {}
    for label, names in (('full', list(raw.feature_names)), ('top', top), ('weak', weak)):
        net, history, train_acc, test_acc = _train_tabular(feature_subset(raw, names), cfg)
        weights = _out(cfg, f"weights_{label}.slns")
        artifacts += [weights, save_weights(net, weights)]
        rows.append([label, len(names), ';'.join(names), train_acc, test_acc])
        results[label] = test_acc
        print(f"{label:>5}: {len(names)} Merkmale, Testgenauigkeit {test_acc:.4f}")
    artifacts.append(report.write_csv(_out(cfg, 'ablation.csv'),
                                      ['model', 'n_features', 'features', 'train_accuracy', 'test_accuracy'], rows))
    return _finish(cfg, 'ablation', artifacts, results)


def cmd_depth_profile(cfg: Dict[str, Any]) -> int:
    """Mittlere |s| je Block für mehrere Architekturen auf denselben Bildern."""
    if cfg['data']:
        dataset = load_images(_existing(cfg['data']))
    else:
        dataset = make_toy_images(cfg['toy_per_class'], seed=cfg['seed'])
    rows, ratios = [], {}
    for arch in _names(cfg['archs']):
        net, _, train_acc, test_acc, test_set = _train_images(dataset, cfg, arch)
        probe = test_set if len(test_set) >= cfg['n_images'] else dataset
        images = [probe.normalized(i) for i in range(min(cfg['n_images'], len(probe)))]
        profile = sensitivity_profile(net, images, epsilon=cfg['eps'], threads=cfg['threads'])
        blocks = sorted(profile)
        first = profile[blocks[0]]
        ratios[arch] = profile[blocks[-1]] / first if first > 0 else math.nan
        for q in blocks:
            rows.append([arch, q, profile[q], profile[q] / first if first > 0 else math.nan])
        print(f"{arch}: Testgenauigkeit {test_acc:.3f}, |s| letzter/erster Block {ratios[arch]:.4g}")
        if arch == 'vgg-tiny' and ratios[arch] > 1.0:
            logger.warning(f"vgg-tiny: Sensitivität nimmt mit der Tiefe nicht ab "
                           f"(Block {blocks[-1]} / Block {blocks[0]} = {ratios[arch]:.4g})")
    if 'vgg-tiny' in ratios and 'resnet-tiny' in ratios and not ratios['resnet-tiny'] > ratios['vgg-tiny']:
        logger.warning("Residualnetz behält die Sensitivität über die Tiefe nicht besser als das VGG-Netz")
    path = report.write_csv(_out(cfg, 'depth_profile.csv'), ['arch', 'block', 'mean_abs', 'ratio_to_first'], rows)
    return _finish(cfg, 'depth-profile', [path], {'ratio_last_first': ratios})


def cmd_make_toy(cfg: Dict[str, Any]) -> int:
    """Schreibt synthetische Tabellen- oder Bilddaten."""
    if cfg['kind'] == 'tabular':
        dataset = make_toy_tabular(cfg['n'] or 768, seed=cfg['seed'])
        path = write_tabular_csv(dataset, _out(cfg, 'diabetes_toy.csv'))
    else:
        images = make_toy_images(cfg['n'] or 32, size=cfg['size'], seed=cfg['seed'])
        if cfg['format'] == 'pack':
            path = pack_images(images, _out(cfg, 'toy_images.slim'))
        else:
            path = save_image_folder(images, _out(cfg, 'toy_images'))
    print(f"Daten: {path}")
    return _finish(cfg, 'make-toy', [path])


def cmd_serve(cfg: Dict[str, Any]) -> int:
    """Startet die JSON-API."""
    from backend.app.app import create_app

    app = create_app()
    logger.info(f"Starte Server auf {cfg['host']}:{cfg['port']} (Debug: {cfg['debug']})")
    app.run(host=cfg['host'], port=cfg['port'], debug=cfg['debug'])
    return 0


COMMANDS: Dict[str, Callable[[Dict[str, Any]], int]] = {
    'train': cmd_train,
    'eval': cmd_eval,
    'sobol': cmd_sobol,
    'convergence': cmd_convergence,
    'local-sens': cmd_local_sens,
    'am': cmd_am,
    'grad-cam': cmd_grad_cam,
    'pca': cmd_pca,
    'ablation': cmd_ablation,
    'depth-profile': cmd_depth_profile,
    'make-toy': cmd_make_toy,
    'serve': cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Einstiegspunkt der Kommandozeile.

    Returns:
        int: Exit-Code (0 Erfolg, 1 fachlicher Fehler, 2 Aufruffehler)
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = resolve_config(args)
        if cfg['log_level']:
            set_level(logging.getLogger('backend'), cfg['log_level'])
        return COMMANDS[args.command](cfg)
    except (UsageError, PlanError) as e:
        print(f"Fehler: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"Datei nicht gefunden: {e.filename or e}", file=sys.stderr)
        return 2
    except SensLabError as e:
        logger.debug("Abbruch", exc_info=True)
        print(f"Fehler: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
