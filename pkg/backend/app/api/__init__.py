"""
API-Module für das Sensitivitätslabor.
"""
