"""Exception types shared across the package."""


class GsatError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GsatError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class InvalidMaskError(GsatError, ValueError):
    """A mask leaves no position to normalize over."""


class ContractError(GsatError, RuntimeError):
    """An internal API contract was violated (e.g. non-scalar loss)."""


class ConfigError(GsatError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DataFormatError(GsatError, ValueError):
    """A dataset or ontology file does not match the expected layout."""


class CheckpointError(GsatError, RuntimeError):
    """A checkpoint file is unreadable, truncated or incompatible."""


class NonFiniteGradientError(GsatError, RuntimeError):
    """A NaN/Inf gradient was detected during optimization."""
