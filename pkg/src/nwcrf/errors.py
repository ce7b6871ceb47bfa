"""Exception hierarchy shared by every module of the package."""


class NwcrfError(Exception):
    """Base class for all package errors."""


class ShapeError(NwcrfError, ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class DomainError(NwcrfError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(NwcrfError, ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateRowError(NwcrfError, ValueError):
    """A softmax row has no unmasked entry."""


class NumericError(NwcrfError, ArithmeticError):
    """Non-finite values appeared during a forward pass or training step."""

    def __init__(self, stage: str, step: int | None = None):
        self.stage = stage
        self.step = step
        where = f"stage {stage!r}" if step is None else f"step {step}, stage {stage!r}"
        super().__init__(f"non-finite values produced at {where}")


class ConfigError(NwcrfError, ValueError):
    """Invalid or unknown configuration key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class CheckpointFormatError(NwcrfError):
    """Checkpoint has the wrong magic bytes or an unsupported version."""


class CheckpointCorruptError(NwcrfError):
    """Checkpoint ends early or contains inconsistent records."""
