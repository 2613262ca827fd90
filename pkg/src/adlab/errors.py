"""Exception hierarchy shared across the package."""


class AdlabError(Exception):
    pass


class DimensionError(AdlabError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(AdlabError, ValueError):
    """Invalid configuration value or combination."""


class ContractError(AdlabError, ValueError):
    """A caller violated a documented precondition."""


class NumericError(AdlabError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(AdlabError, ValueError):
    """Malformed on-disk artifact (checkpoint, IDX file, ...)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RunError(AdlabError, RuntimeError):
    """A training/evaluation run failed at runtime (e.g. divergence)."""
