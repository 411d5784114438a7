"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, PrerequisiteError -> 3,
NumericError -> 4. Data/schema problems in input files are treated like
configuration errors (exit 2).
"""


class TrajmineError(Exception):
    """Base class for all trajmine errors."""


class ConfigError(TrajmineError):
    """Invalid configuration value, unparsable config file, or mismatched artifacts."""


class SchemaError(TrajmineError):
    """Input file does not have the required columns/format."""


class DataError(TrajmineError):
    """Input rows violate a data invariant (ordering, duplicates, coverage)."""


class PrerequisiteError(TrajmineError):
    """A pipeline stage was invoked before the stages it depends on."""


class NumericError(TrajmineError):
    """A numeric computation produced non-finite or degenerate results."""


class UndefinedMetricError(NumericError):
    """A metric is mathematically undefined for the given inputs (e.g. empty target set)."""


class TrainingError(NumericError):
    """Optimization diverged. Carries the training log collected so far in `.log`."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
