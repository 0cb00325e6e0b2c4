"""Exception hierarchy shared by every module."""


class AdaptokError(Exception):
    """Base class for all package errors."""


class ValidationError(AdaptokError, ValueError):
    """Input violates a documented precondition."""


class UnsupportedArityError(ValidationError):
    pass


class SearchSizeError(ValidationError):
    pass


class PreconditionError(ValidationError):
    pass


class BudgetTooSmallError(ValidationError):
    pass


class RouterStateError(AdaptokError, RuntimeError):
    """Router used before its normalizer is available."""


class ConfigurationError(ValidationError):
    pass


class DivergenceError(AdaptokError, RuntimeError):
    pass


class StreamError(AdaptokError, ValueError):
    """Malformed token stream."""


class BadMagicError(StreamError):
    pass


class VersionError(StreamError):
    pass


class TruncatedStreamError(StreamError):
    pass


class PopcountMismatchError(StreamError):
    pass
