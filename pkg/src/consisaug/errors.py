"""Exception types shared across the package."""


class ConsisaugError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(ConsisaugError, ValueError):
    pass


class DomainError(ConsisaugError, ValueError):
    pass


class EmptyReduction(ConsisaugError, ValueError):
    pass


class NotScalar(ConsisaugError, ValueError):
    pass


class NoTape(ConsisaugError, RuntimeError):
    pass


class TapeConsumed(ConsisaugError, RuntimeError):
    """backward() was called twice on the same tape without a reset."""


class NotADistribution(ConsisaugError, ValueError):
    pass


class InvalidThresholds(ConsisaugError, ValueError):
    pass


class InvalidImageSize(ConsisaugError, ValueError):
    pass


class ConfigError(ConsisaugError, ValueError):
    """Bad config file line, unknown key or invalid merged value."""


class IoError(ConsisaugError, OSError):
    pass


class MissingLabel(IoError):
    pass


class CorruptImage(IoError):
    pass


class LabelParseError(IoError):
    pass


class NonFiniteLoss(ConsisaugError, FloatingPointError):
    pass


class CheckpointError(IoError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ArchMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass
