"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations


class SenseflowError(Exception):
    """Base class for all senseflow errors."""

    exit_code = 1


class ConfigError(SenseflowError):
    """Invalid, missing or unknown configuration value."""

    exit_code = 2


class ContainerError(SenseflowError):
    """Malformed SNFL array container."""

    exit_code = 3


class BadMagicError(ContainerError):
    """File does not start with the SNFL magic bytes."""


class DtypeMismatchError(ContainerError):
    """Unknown dtype code, or a dtype other than the one requested."""


class TruncatedPayloadError(ContainerError):
    """Header or payload shorter than the declared dimensions require."""


class DimensionError(SenseflowError, ValueError):
    """Operator, data and grid dimensions disagree."""


class NumericalError(SenseflowError):
    """Non-finite objective, vanishing density or similar breakdown."""

    exit_code = 4


class StageError(SenseflowError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:  # type: ignore[override]
        if isinstance(self.cause, SenseflowError):
            return self.cause.exit_code
        if isinstance(self.cause, OSError):
            return 3
        return 1
