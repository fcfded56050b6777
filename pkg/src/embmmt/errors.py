"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class FormatError(ValueError):
    """A file does not match its expected on-disk layout."""


class ConfigError(ValueError):
    """A configuration is invalid or inconsistent."""
