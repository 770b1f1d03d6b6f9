"""
API-Endpunkte des Sensitivitätslabors.
"""

import logging
from typing import Any, Dict

from flask import Blueprint, current_app, jsonify, request

from backend.app import __version__
from backend.app.core.exceptions import SensLabError
from backend.app.core.sobol_engine import analyze_function, sobol_sequence
from backend.app.core.test_functions import TEST_FUNCTIONS, get_test_function
from backend.app.models.configs import SobolOrder, SobolPlan
from backend.config.config import SOBOL_BOOTSTRAP, SOBOL_CONFIDENCE_LEVEL, SOBOL_SKIP

logger = logging.getLogger(__name__)

# Blueprint für API-Endpunkte
api_bp = Blueprint('api', __name__, url_prefix='/api')


def _error(message: str, status: int = 400):
    return jsonify({"status": "error", "message": message}), status


@api_bp.route('/status', methods=['GET'])
def get_status() -> Dict[str, Any]:
    """
    Gibt den aktuellen Status der Anwendung zurück.

    Returns:
        Dict[str, Any]: Version, Testfunktionen und Grenzen der Anfragen
    """
    return jsonify({
        "status": "ok",
        "version": __version__,
        "test_functions": list(TEST_FUNCTIONS),
        "orders": [o.value for o in SobolOrder],
        "max_sequence_points": current_app.config['MAX_SEQUENCE_POINTS'],
        "max_analysis_n": current_app.config['MAX_ANALYSIS_N'],
    })


@api_bp.route('/sobol/sequence', methods=['POST'])
def post_sequence() -> Dict[str, Any]:
    """
    Liefert Punkte der Sobol-Folge.

    Erwartet JSON mit dim, n und optional skip.
    """
    data = request.get_json(silent=True)
    if not data:
        return _error("Keine Daten erhalten")
    missing = [f for f in ("dim", "n") if f not in data]
    if missing:
        return _error(f"Fehlende Felder: {', '.join(missing)}")
    try:
        dim, n, skip = int(data["dim"]), int(data["n"]), int(data.get("skip", SOBOL_SKIP))
    except (TypeError, ValueError):
        return _error("dim, n und skip müssen ganze Zahlen sein")
    if n > current_app.config['MAX_SEQUENCE_POINTS']:
        return _error(f"Höchstens {current_app.config['MAX_SEQUENCE_POINTS']} Punkte je Anfrage")
    try:
        points = sobol_sequence(dim, n, skip)
    except SensLabError as e:
        return _error(str(e))
    return jsonify({"status": "success", "dim": dim, "n": n, "skip": skip, "points": points.tolist()})


@api_bp.route('/sobol/analyze', methods=['POST'])
def post_analyze() -> Dict[str, Any]:
    """
    Sobol-Analyse einer eingebauten Testfunktion.

    Erwartet JSON mit function und optional params, n, order, bootstrap, level, seed.
    """
    data = request.get_json(silent=True)
    if not data or "function" not in data:
        return _error("Fehlendes Feld: function")
    try:
        n = int(data.get("n", 1024))
        if n > current_app.config['MAX_ANALYSIS_N']:
            return _error(f"N höchstens {current_app.config['MAX_ANALYSIS_N']} je Anfrage")
        tf = get_test_function(data["function"], data.get("params"))
        plan = SobolPlan(
            bounds=tf.bounds,
            n_base=n,
            order=data.get("order", SobolOrder.FIRST_TOTAL.value),
            bootstrap_resamples=int(data.get("bootstrap", SOBOL_BOOTSTRAP)),
            confidence_level=float(data.get("level", SOBOL_CONFIDENCE_LEVEL)),
            seed=int(data.get("seed", 1)),
        )
        result = analyze_function(tf, plan, current_app.config['THREADS'])[0]
    except (SensLabError, ValueError, TypeError) as e:
        return _error(str(e))
    s1, st = tf.exact
    logger.info(f"API-Analyse {tf.name}: N={plan.n_base}, {result.n_evaluations} Auswertungen")
    return jsonify({
        "status": "success",
        "function": tf.name,
        "params": tf.params,
        "result": result.to_dict(),
        "exact": {"s1": [float(v) for v in s1], "st": [float(v) for v in st]},
    })
