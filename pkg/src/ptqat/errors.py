"""Exception types shared across the package."""


class PTQATError(Exception):
    pass


class DimensionError(PTQATError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PTQATError, ValueError):
    """A precondition on an argument was violated."""


class ConfigError(PTQATError, ValueError):
    """Unknown architecture, task, mode or an invalid flag combination."""


class FormatError(PTQATError, ValueError):
    """A serialized container is corrupt, truncated or of the wrong kind."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvariantError(PTQATError, RuntimeError):
    """An internal invariant did not hold."""
