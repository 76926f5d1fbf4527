"""Exception types shared across the toolkit."""


class SnnForgeError(Exception):
    """Base class for all toolkit errors."""


class BadMagic(SnnForgeError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(SnnForgeError):
    """Container version is not supported by this reader."""


class ManifestError(SnnForgeError):
    """Manifest is malformed or inconsistent with the payload."""


class ShapeMismatch(SnnForgeError):
    """Tensor shapes do not compose."""


class InvalidTensor(SnnForgeError):
    """Tensor payload contains NaN or Inf."""


class CountMismatch(SnnForgeError):
    """Image and label counts disagree."""


class TruncatedFile(SnnForgeError):
    """File ends before the declared data."""


class DeadLayer(SnnForgeError):
    """A layer produced no activation on the normalization set."""


class WrongResetMode(SnnForgeError):
    """An analysis was requested for a reset mode it does not apply to."""


class UnsupportedLayer(SnnForgeError):
    """Layer kind or arrangement cannot be handled by this operation."""
