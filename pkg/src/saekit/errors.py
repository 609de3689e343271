"""Exception types shared across the package."""


class SaeKitError(Exception):
    """Base class for all errors raised by saekit."""


class DimensionError(SaeKitError, ValueError):
    """Shapes are incompatible for the requested operation."""


class ContractError(SaeKitError, ValueError):
    """A precondition on values (not shapes) was violated."""


class ConfigError(SaeKitError, ValueError):
    """Invalid model, training or CLI configuration."""


class FormatError(SaeKitError, ValueError):
    """A file on disk does not follow the expected binary layout."""
