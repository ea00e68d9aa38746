"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes do not satisfy an operation's contract."""


class DomainError(ValueError):
    """Input values fall outside an operation's domain."""


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


class UsageError(RuntimeError):
    """An operation was called in the wrong state or with invalid arguments."""


class TrainingError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class MetricError(RuntimeError):
    pass
