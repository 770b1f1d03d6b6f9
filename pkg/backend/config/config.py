"""
Konfigurationsdatei für das Sensitivitätslabor.
"""

import os
import configparser
from dotenv import load_dotenv

# Lade Umgebungsvariablen aus .env-Datei
load_dotenv()

# Bestimme den Pfad zur Konfigurationsdatei
CONFIG_FILE = os.environ.get('CONFIG_FILE', 'config.ini')
CONFIG_SAMPLE_FILE = 'config-sample.ini'

# Erstelle Konfigurationsobjekt
config = configparser.ConfigParser()

# Versuche, die Konfigurationsdatei zu lesen
if os.path.exists(CONFIG_FILE):
    config.read(CONFIG_FILE, encoding='utf-8')
    CONFIG_SOURCE = CONFIG_FILE
elif os.path.exists(CONFIG_SAMPLE_FILE):
    config.read(CONFIG_SAMPLE_FILE, encoding='utf-8')
    CONFIG_SOURCE = CONFIG_SAMPLE_FILE
else:
    CONFIG_SOURCE = None


# Hilfsfunktion zum Bereinigen von Werten (entfernt Kommentare)
def clean_value(value):
    """Entfernt Kommentare aus einem Konfigurationswert."""
    if isinstance(value, str):
        # Entferne alles nach einem #, falls vorhanden
        comment_pos = value.find('#')
        if comment_pos >= 0:
            value = value[:comment_pos]
        value = value.strip()
    return value


def _get(section: str, key: str, fallback: str) -> str:
    """Liest einen Wert; Umgebungsvariable SENSLAB_<KEY> hat Vorrang vor der Datei."""
    env_value = os.environ.get(f'SENSLAB_{key.upper()}')
    if env_value:
        return clean_value(env_value)
    return clean_value(config.get(section, key, fallback=fallback))


def _get_bool(section: str, key: str, fallback: bool) -> bool:
    return _get(section, key, str(fallback)).lower() in ('1', 'true', 'yes', 'on')


# Pfade
OUTPUT_DIR = _get('paths', 'output_dir', 'runs')

# Webserver-Einstellungen (JSON-API)
WEB_HOST = _get('server', 'host', '127.0.0.1')
WEB_PORT = int(_get('server', 'port', '5002'))
DEBUG = _get_bool('server', 'debug', False)

# Laufzeit
SEED = int(_get('runtime', 'seed', '1'))
THREADS = int(_get('runtime', 'threads', '1'))

# Training
LEARNING_RATE = float(_get('training', 'learning_rate', '0.01'))
L2_LAMBDA = float(_get('training', 'l2_lambda', '0.001'))
EPOCHS = int(_get('training', 'epochs', '300'))
BATCH_SIZE = int(_get('training', 'batch_size', '32'))

# Sobol-Analyse
SOBOL_N_BASE = int(_get('sobol', 'n_base', '8192'))
SOBOL_BOOTSTRAP = int(_get('sobol', 'bootstrap', '200'))
SOBOL_CONFIDENCE_LEVEL = float(_get('sobol', 'confidence_level', '0.95'))
SOBOL_SKIP = int(_get('sobol', 'skip', '1'))

# Lokale Sensitivität
LOCAL_SENS_EPSILON = float(_get('local_sens', 'epsilon', '0.1'))
LOCAL_SENS_PIXELATE = int(_get('local_sens', 'pixelate', '1'))

# Aktivierungsmaximierung
AM_EPS1 = float(_get('am', 'eps1', '0.1'))
AM_EPS2 = float(_get('am', 'eps2', '0.1'))
AM_STEPS = int(_get('am', 'steps', '200'))
AM_BLUR_SIGMA = float(_get('am', 'blur_sigma', '1.0'))
AM_BLUR_RADIUS = int(_get('am', 'blur_radius', '2'))

# Logging-Einstellungen
LOG_LEVEL = _get('logging', 'level', 'INFO')
LOG_TO_FILE = _get_bool('logging', 'log_to_file', False)
LOG_FILE = _get('logging', 'log_file', 'logs/senslab.log')
