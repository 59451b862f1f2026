"""Exception taxonomy. CLI maps these onto exit codes (2/3/4)."""


class FdsError(Exception):
    """Base class for package errors."""


class ConfigError(FdsError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class StageError(FdsError):
    """A pipeline stage failed (CLI exit code 3)."""


class IntegrityError(FdsError):
    """Persisted artifact does not match its recorded hash (CLI exit code 4)."""


class LeakageError(FdsError):
    """A target-domain sample reached a training stream."""
