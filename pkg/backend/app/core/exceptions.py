"""
Fehlerklassen des Sensitivitätslabors.

Jede Klasse entspricht einem benannten Fehlerfall der Module. Fehler, die einen
ungültigen Wert beschreiben, erben zusätzlich von ValueError.
"""


class SensLabError(Exception):
    """Basisklasse aller fachlichen Fehler."""


# Netz-Engine
class ShapeMismatch(SensLabError, ValueError):
    """Form eines Tensors passt nicht zur erwarteten Form."""


class NonFiniteValue(SensLabError, ValueError):
    """NaN oder Inf an einer Modulgrenze entdeckt."""

    def __init__(self, message: str, step: int = None):
        super().__init__(message)
        self.step = step


class TraceMismatch(SensLabError, ValueError):
    """Aktivierungsspur passt nicht zum Netz oder zur Schichtliste."""


class ClassOutOfRange(SensLabError, ValueError):
    """Klassenindex außerhalb des gültigen Bereichs."""


class EmptyDataset(SensLabError, ValueError):
    """Datensatz enthält keine Zeilen."""


class WeightsFormatError(SensLabError, ValueError):
    """Gewichtsdatei ist beschädigt oder hat ein unbekanntes Format."""


class ModeError(SensLabError):
    """Netz befindet sich im falschen Modus (Train/Eval)."""


# Sobol-Analyse
class DimensionUnsupported(SensLabError, ValueError):
    """Dimension übersteigt die Tabelle der Richtungszahlen."""


class ZeroVariance(SensLabError, ValueError):
    """Modellausgabe ist konstant, Indizes sind nicht definiert."""


class PlanError(SensLabError, ValueError):
    """Stichprobenplan verletzt eine Invariante."""


# Lokale Sensitivität
class UnknownBlock(SensLabError, ValueError):
    """Kein Layer trägt die angefragte Block-ID."""


class InsufficientImages(SensLabError, ValueError):
    """Zu wenige Bilder der angefragten Klasse."""


# Attribution
class TargetUnresolvable(SensLabError, ValueError):
    """Ziel (Neuron, Klasse oder Faltungsschicht) existiert nicht."""


class ConfigError(SensLabError, ValueError):
    """Konfiguration verletzt eine Invariante."""


# Datenzugriff
class ParseError(SensLabError, ValueError):
    """Zelle einer Tabellendatei ist nicht lesbar."""

    def __init__(self, message: str, row: int = None, column: str = None):
        super().__init__(message)
        self.row = row
        self.column = column


class MissingColumn(SensLabError, ValueError):
    """Erwartete Spalte fehlt in der Kopfzeile."""


class InsufficientRows(SensLabError, ValueError):
    """Zu wenige Zeilen für die angeforderte Aufteilung."""


class UnknownFeature(SensLabError, ValueError):
    """Merkmalsname existiert im Datensatz nicht."""


class DegenerateCovariance(SensLabError, ValueError):
    """Kovarianzmatrix ist nicht auswertbar."""


class FormatError(SensLabError, ValueError):
    """Bilddatei oder Paketdatei hat ein ungültiges Format."""


class InconsistentDims(SensLabError, ValueError):
    """Bilder eines Datensatzes haben unterschiedliche Abmessungen."""
