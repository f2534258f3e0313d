"""Exception hierarchy shared by all cubemix modules."""


class CubeMixError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CubeMixError, ValueError):
    pass


class NonFiniteError(CubeMixError, FloatingPointError):
    pass


class ConfigError(CubeMixError, ValueError):
    pass


class TapeError(CubeMixError, RuntimeError):
    pass


class DataError(CubeMixError):
    """Dataset loading failure. ``sample_id`` / ``path`` name the culprit when known."""

    def __init__(self, message, *, sample_id=None, path=None):
        super().__init__(message)
        self.sample_id = sample_id
        self.path = path


class MissingFileError(DataError, FileNotFoundError):
    pass


class NumericAbort(CubeMixError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, *, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class SampleShapeError(DataError, ValueError):
    pass


class NonFiniteDataError(DataError, ValueError):
    pass
