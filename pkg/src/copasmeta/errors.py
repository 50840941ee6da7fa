"""Exception hierarchy shared by the library and the CLI."""


class CopasMetaError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CopasMetaError, ValueError):
    """An argument lies outside the domain of the operation."""


class DataError(CopasMetaError, ValueError):
    """Malformed user data, e.g. a CSV row with a nonpositive standard error."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigurationError(CopasMetaError, ValueError):
    """A configuration document or generative setting cannot be used."""


class DegenerateSpreadError(CopasMetaError, ValueError):
    """Two quantiles that must differ coincide (or are reversed)."""


class DegenerateStudyError(CopasMetaError, RuntimeError):
    """A simulated study has no usable within-group variability."""


class CalibrationInfeasibleError(CopasMetaError, RuntimeError):
    """The target publication rate is outside the achievable range."""

    def __init__(self, message, achievable=None):
        self.achievable = achievable
        super().__init__(message)


class EstimationError(CopasMetaError, RuntimeError):
    """An estimator failed to produce a usable fit."""


class LRTError(EstimationError):
    """One of the two nested fits behind a likelihood-ratio test failed.

    Both fits are attached so callers can inspect the partial results.
    """

    def __init__(self, message, full=None, reduced=None):
        self.full = full
        self.reduced = reduced
        super().__init__(message)


class EmptyReportError(CopasMetaError, ValueError):
    """No converged replicate is available to summarise."""
