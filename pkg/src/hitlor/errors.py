"""Exception hierarchy shared across the package."""


class HitlorError(Exception):
    """Base class for all errors raised by this package."""


class LoadError(HitlorError):
    """A dataset file is missing, inconsistent, or does not match its manifest."""


class FormatError(LoadError):
    """A binary descriptor file violates the on-disk format."""


class ValidationError(HitlorError):
    """An input value violates a documented contract."""


class ConfigError(HitlorError):
    """A configuration is internally inconsistent or unusable."""


class QueryError(HitlorError):
    """A query is invalid for the loaded dataset."""


class SamplingError(HitlorError):
    """A random sample was requested from a pool that is too small."""


class TrainingError(HitlorError):
    """The classifier cannot be trained on the given sample set."""


class OracleError(HitlorError):
    """A feedback oracle was asked about an unknown image."""


class SessionStateError(HitlorError):
    """A session operation was attempted in the wrong state."""
