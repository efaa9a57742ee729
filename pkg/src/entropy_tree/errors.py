"""Exception hierarchy shared across the package."""


class EntropyTreeError(Exception):
    """Base class for all package errors."""


class InputError(EntropyTreeError, ValueError):
    """An argument is outside the domain of the operation."""


class ParseError(InputError):
    """A file could not be parsed; the message names the offending line."""


class ValidationError(InputError):
    """Parsed data violates an invariant (e.g. probabilities do not sum to 1)."""


class UndefinedImportanceError(InputError):
    """Importance requested for a position with no predecessor."""


class UndefinedAUROCError(InputError):
    """AUROC requested for input containing a single class."""


class CalibrationError(EntropyTreeError):
    """Threshold calibration produced no statistics to pool."""


class ConfigError(EntropyTreeError):
    """An experiment configuration is incomplete or inconsistent."""


class DecodeError(EntropyTreeError):
    """A model failed while scoring a path; carries the path context."""

    def __init__(self, message: str, path_id: tuple[int, ...] = (), prefix: tuple[int, ...] = ()):
        super().__init__(f"{message} (path={list(path_id)}, prefix={list(prefix)})")
        self.path_id = path_id
        self.prefix = prefix
