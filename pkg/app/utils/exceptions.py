from typing import Any, Dict, Optional


class RNSDEException(Exception):
    exit_code = 1

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
    ):
        self.message = message
        self.error_code = error_code or "RNSDE_ERROR"
        self.details = details or {}
        super().__init__(self.message)


class ConfigurationException(RNSDEException):
    exit_code = 2


class InvalidInputException(RNSDEException):
    exit_code = 2


class ShapeMismatchException(InvalidInputException):
    pass


class GeometryMismatchException(InvalidInputException):
    pass


class UnsupportedOperationException(RNSDEException):
    pass


class ContainerFormatException(RNSDEException):
    pass


class DatasetException(RNSDEException):
    pass


class DependencyException(RNSDEException):
    exit_code = 3


class CheckpointNotFoundException(DependencyException):
    pass


class NumericalException(RNSDEException):
    exit_code = 4


class DivergenceException(NumericalException):
    pass
