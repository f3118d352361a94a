"""Exception types shared across the package; the CLI maps them to exit codes."""


class TrendcastError(Exception):
    exit_code = 1


class ConfigError(TrendcastError, ValueError):
    exit_code = 2


class InvalidArgumentError(TrendcastError, ValueError):
    exit_code = 2


class DimensionError(InvalidArgumentError):
    """Operand shapes do not conform."""


class VocabularyError(ConfigError, KeyError):
    """A group attribute or element id is missing from an embedding table."""

    def __str__(self):
        return Exception.__str__(self)


class DataIntegrityError(TrendcastError):
    exit_code = 3


class UnusableSeriesError(DataIntegrityError):
    """Too few valid points to repair a series."""


class NumericalError(TrendcastError, FloatingPointError):
    exit_code = 4
