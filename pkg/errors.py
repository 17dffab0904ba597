"""Exception types shared by every dCNN module.

Each error also derives from the closest builtin so callers can catch
either ``ShapeError`` or plain ``ValueError``.
"""


class DcnnError(Exception):
    """Base class for all framework errors"""


class ShapeError(DcnnError, ValueError):
    """Operand shapes do not fit the operation"""


class ArgumentError(DcnnError, ValueError):
    """An argument is outside its documented domain"""


class ConfigError(DcnnError, ValueError):
    """Configuration is invalid or cannot be realised"""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class FormatError(DcnnError, ValueError):
    """A binary or text file does not follow its format"""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NumericError(DcnnError, ArithmeticError):
    """A computation produced NaN or Inf"""


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss.

    ``network`` holds the best network seen before divergence and ``log``
    the records collected so far.
    """

    def __init__(self, message, network=None, log=None, iteration=None):
        super().__init__(message)
        self.network = network
        self.log = log
        self.iteration = iteration


class StateError(DcnnError, RuntimeError):
    """A cache or trace does not belong to the call it was passed to"""


class DataLoadError(DcnnError, OSError):
    """Dataset files are missing or malformed"""


class StratificationWarning(UserWarning):
    """A split received no samples of one class"""
