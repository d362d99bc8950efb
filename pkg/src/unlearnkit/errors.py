"""Exception types shared across the package."""


class UnlearnKitError(Exception):
    """Base class for all package errors."""


class CorpusLoadError(UnlearnKitError):
    """A corpus file violated the on-disk schema (carries file and line)."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class IntegrityError(UnlearnKitError):
    """Cross-record invariant violated (overlap, bad partition, ...)."""


class EncodingError(UnlearnKitError):
    """Text contains a token outside the model vocabulary."""


class ShapeMismatchError(UnlearnKitError):
    """Parameter snapshot does not match the target model layout."""


class NumericsError(UnlearnKitError):
    """A loss or metric became non-finite or degenerate."""


class GenerationError(UnlearnKitError):
    """Backend response could not be parsed after retries."""

    def __init__(self, message, raw_text=""):
        super().__init__(message)
        self.raw_text = raw_text


class ConfigurationError(UnlearnKitError):
    """Missing or invalid runtime configuration (backend keys, config files)."""


class TransientBackendError(UnlearnKitError):
    """Retryable backend failure (timeouts, rate limits)."""


class DivergenceError(UnlearnKitError):
    """Training produced a non-finite loss."""
