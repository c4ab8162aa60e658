"""Exception hierarchy shared by all modules."""


class KoopmanError(Exception):
    """Base class for library errors."""


class DimensionError(KoopmanError, ValueError):
    pass


class DomainError(KoopmanError, ValueError):
    pass


class ConvergenceError(KoopmanError, RuntimeError):
    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class DegenerateScaleError(DomainError):
    """A state component has zero spread, so per-component scaling is undefined."""


class DataError(KoopmanError, ValueError):
    pass


class FormatError(KoopmanError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class TapeError(KoopmanError, RuntimeError):
    """Raised when a consumed tape is used again."""


class NumericError(KoopmanError, FloatingPointError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, last_good_epoch):
        super().__init__(f"{message}; last good epoch: {last_good_epoch}")
        self.last_good_epoch = last_good_epoch
