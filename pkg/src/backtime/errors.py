"""Exception hierarchy shared by every backtime module."""


class BacktimeError(Exception):
    """Base class; the CLI maps subclasses to exit categories."""

    category = "error"


class BoundaryError(BacktimeError, IndexError):
    category = "boundary"


class DegenerateVariableError(BacktimeError, ValueError):
    category = "data"


class SplitSizeError(BacktimeError, ValueError):
    category = "data"


class CsvParseError(BacktimeError, ValueError):
    category = "parse"

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class ShapeError(BacktimeError, ValueError):
    category = "shape"


class InputValidationError(BacktimeError, ValueError):
    category = "input"


class BudgetError(BacktimeError, ValueError):
    category = "budget"


class InjectionError(BacktimeError, ValueError):
    category = "injection"


class ConfigError(BacktimeError, ValueError):
    category = "config"

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)


class DivergenceError(BacktimeError, FloatingPointError):
    category = "divergence"


class SearchError(BacktimeError, ValueError):
    category = "search"


class UndefinedMetricError(BacktimeError, ValueError):
    category = "metric"


class StageError(BacktimeError):
    """Wraps a failure inside the bi-level loop with the stage and epoch."""

    category = "stage"

    def __init__(self, stage, epoch, cause):
        super().__init__(f"stage {stage!r} failed at epoch {epoch}: {cause}")
        self.stage = stage
        self.epoch = epoch
        self.cause = cause
