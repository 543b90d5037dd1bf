"""Exception hierarchy shared by all kgpm modules."""


class KgpmError(Exception):
    """Base class for every error raised by kgpm."""


class DataError(KgpmError, ValueError):
    """Malformed or inconsistent input data (files, configs, labels)."""


class ShapeError(KgpmError, ValueError):
    """Operand shapes are incompatible for an autodiff primitive."""


class NumericalError(KgpmError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class ConfigMismatch(DataError):
    """A checkpoint does not match the model configuration or data it is used with."""


class TrainingDiverged(NumericalError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the best checkpoint seen before divergence, or ``None``
    if divergence happened before the first epoch finished.
    """

    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history or []
