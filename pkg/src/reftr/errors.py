"""Exception types raised across the package."""


class ReftrError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(ReftrError, ValueError):
    pass


class NaNInput(ReftrError, ValueError):
    pass


class DomainError(ReftrError, ValueError):
    pass


class NonFiniteGradient(ReftrError, ArithmeticError):
    pass


class BadShape(ReftrError, ValueError):
    pass


class BadImageShape(ReftrError, ValueError):
    pass


class TextTooLong(ReftrError, ValueError):
    pass


class EmptyText(ReftrError, ValueError):
    pass


class EmptyPhrase(ReftrError, ValueError):
    pass


class BadChannelCount(ReftrError, ValueError):
    pass


class EmptySpan(ReftrError, ValueError):
    pass


class SpanOutOfRange(ReftrError, IndexError):
    pass


class NoQueries(ReftrError, ValueError):
    pass


class ModeUnknown(ReftrError, ValueError):
    pass


class GenerationFailed(ReftrError, RuntimeError):
    pass


class CorruptManifest(ReftrError, ValueError):
    pass


class ChecksumMismatch(ReftrError, ValueError):
    pass


class EmptyDataset(ReftrError, ValueError):
    pass


class DivergedLoss(ReftrError, FloatingPointError):
    pass


class ConfigMismatch(ReftrError, ValueError):
    pass


class LengthMismatch(ReftrError, ValueError):
    pass


class IoError(ReftrError, OSError):
    pass


class InvalidConfig(ReftrError, ValueError):
    """A configuration value violates its contract."""
