"""
Datenmodelle für Konfigurationen und Ergebnisse.
"""
