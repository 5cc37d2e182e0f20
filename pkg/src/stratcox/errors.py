"""Exception hierarchy.

Every error a user can trigger through bad input derives from
:class:`StratCoxError`; the CLI maps those to exit code 2.
"""


class StratCoxError(Exception):
    """Base class for all library errors caused by input or data."""


class ValidationError(StratCoxError, ValueError):
    pass


class AlignmentError(ValidationError):
    """Sample ids differ between expression, survival and layout inputs."""


class InvalidSurvival(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class MissingLevel(StratCoxError):
    """The requested stratification level is not present in the layout."""


class MissingFeature(StratCoxError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NoEvents(StratCoxError):
    pass


class NonConvergence(StratCoxError):
    pass


class Separation(StratCoxError):
    """Monotone likelihood: a coefficient diverged during Newton iterations."""


class TooFewEvents(StratCoxError):
    pass


class SelectionFailed(StratCoxError):
    pass


class BatchTooSmall(StratCoxError):
    pass


class NoComparablePairs(StratCoxError):
    pass


class OracleUndefined(StratCoxError):
    pass


class ModelFormatError(StratCoxError):
    pass
