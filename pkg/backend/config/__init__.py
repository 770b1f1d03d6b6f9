"""
Konfigurationsmodul für das Sensitivitätslabor.
"""
