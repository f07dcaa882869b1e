"""
Exception hierarchy shared by every wombet module.

Numeric kernels raise these; orchestration code logs and re-raises them, and the
command-line entry point maps them onto process exit codes.
"""

from typing import Optional


class WombetError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(WombetError):
    """A caller broke an interface contract (shape, dimension, finiteness)."""


class PreconditionError(WombetError):
    """An operation was invoked on degenerate or insufficient input."""


class EnvironmentFault(WombetError):
    """The simulated environment produced a non-finite state."""


class PlannerFailure(WombetError):
    """Every candidate action sequence was rejected by the planner."""


class DivergenceError(WombetError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, batch_id: Optional[int] = None) -> None:
        super().__init__(message if batch_id is None else f"{message} (batch {batch_id})")
        self.batch_id = batch_id


class DatasetParseError(WombetError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnsupportedVersionError(WombetError):
    """A dataset file declares a format version this code cannot read."""


class ConfigError(WombetError):
    """Configuration could not be parsed or violates an invariant."""


class VerificationFailure(WombetError):
    """A theory certification found a violation it must not find."""
