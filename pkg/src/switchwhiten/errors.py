class SwitchWhiteningError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(SwitchWhiteningError, ValueError):
    pass


class ShapeError(SwitchWhiteningError, ValueError):
    pass


class ConfigError(SwitchWhiteningError, ValueError):
    pass


class NumericalFailure(SwitchWhiteningError, ArithmeticError):
    pass


class DegenerateSpectrum(NumericalFailure):
    """Eigenvalue gap too small for the eigendecomposition gradient."""

    def __init__(self, message, gap=None):
        super().__init__(message)
        self.gap = gap


class StateError(SwitchWhiteningError, RuntimeError):
    pass


class OracleFailure(SwitchWhiteningError, ArithmeticError):
    pass


class TrainingDiverged(SwitchWhiteningError, RuntimeError):
    pass


class FormatError(SwitchWhiteningError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FileError(SwitchWhiteningError, OSError):
    pass
