"""
Flask-Anwendung mit der JSON-API des Sensitivitätslabors.
"""

import os

from flask import Flask, jsonify

from backend.app.api.routes import api_bp
from backend.app.utils.logger import setup_logger
from backend.config.config import DEBUG, THREADS, WEB_HOST, WEB_PORT

# Logger einrichten
logger = setup_logger('app')


def create_app(test_config=None):
    """
    Erstellt und konfiguriert die Flask-Anwendung.

    Args:
        test_config: Testkonfiguration (optional)

    Returns:
        Flask: Die Flask-Anwendung
    """
    app = Flask(__name__)

    app.config.from_mapping(
        SECRET_KEY=os.environ.get('SECRET_KEY', 'dev_key'),
        DEBUG=DEBUG,
        THREADS=THREADS,
        MAX_SEQUENCE_POINTS=65536,
        MAX_ANALYSIS_N=16384,
    )

    if test_config is not None:
        app.config.from_mapping(test_config)

    app.register_blueprint(api_bp)

    @app.errorhandler(404)
    def not_found(e):
        return jsonify({"status": "error", "message": "Nicht gefunden"}), 404

    @app.errorhandler(500)
    def server_error(e):
        logger.error(f"Serverfehler: {e}", exc_info=True)
        return jsonify({"status": "error", "message": "Interner Fehler"}), 500

    return app


def run_app():
    """Führt die Anwendung aus."""
    app = create_app()

    host = os.environ.get('FLASK_HOST', WEB_HOST)
    port = int(os.environ.get('FLASK_PORT', WEB_PORT))
    debug = os.environ.get('FLASK_DEBUG', str(DEBUG)).lower() == 'true'

    logger.info(f"Starte Server auf {host}:{port} (Debug: {debug})")
    app.run(host=host, port=port, debug=debug)
