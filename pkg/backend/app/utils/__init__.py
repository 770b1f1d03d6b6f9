"""
Dienstprogramme für das Sensitivitätslabor.
"""
