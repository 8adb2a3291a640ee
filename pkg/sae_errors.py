"""
Exceptions de la boîte à outils d'estimation sur petites zones.

Toute erreur levée volontairement dérive de SAEError pour que la CLI puisse la
convertir en enregistrement lisible par machine.
"""

from typing import Any, Dict, Optional


class SAEError(Exception):
    """Erreur de base, porte des champs supplémentaires pour l'enregistrement JSON"""

    def __init__(self, message: str, **fields: Any):
        super().__init__(message)
        self.message = message
        self.fields = fields

    def to_record(self) -> Dict[str, Any]:
        record = {'error': type(self).__name__, 'message': self.message}
        record.update(self.fields)
        return record


class InvalidConfigError(SAEError, ValueError):
    pass


class DegenerateStandardizationError(SAEError, ValueError):
    """Levée quand une colonne ne peut pas être ramenée à variance 1"""


class DesignError(SAEError, ValueError):
    """Plan de sondage infaisable ou tailles d'inclusion invalides"""


class EmptySampleError(DesignError):
    pass


class ParameterLayoutError(SAEError, ValueError):
    """Le vecteur de paramètres ne correspond pas au layout du modèle"""


class DataError(SAEError, ValueError):
    pass


class SchemaError(SAEError, ValueError):
    def __init__(self, message: str, column: Optional[str] = None, **fields: Any):
        super().__init__(message, column=column, **fields)
        self.column = column


class SingletonStratumError(SAEError, ValueError):
    def __init__(self, message: str, stratum: Any = None, **fields: Any):
        super().__init__(message, stratum=stratum, **fields)
        self.stratum = stratum


class SingularMatrixError(SAEError, ArithmeticError):
    pass


class InsufficientDrawsError(SAEError, ValueError):
    pass


class MetricsError(SAEError, ValueError):
    pass
