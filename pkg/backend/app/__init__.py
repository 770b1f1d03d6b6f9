"""
Sensitivitätslabor für kleine neuronale Netze.
"""

from backend.app.utils.logger import setup_logger

# Initialisiere den Logger für das gesamte Paket
logger = setup_logger('backend')

__version__ = '1.0.0'
