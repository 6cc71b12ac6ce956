"""Exceptions raised on purpose by the toolkit."""
from typing import Optional


class MfgError(Exception):
    """Base class for every error the toolkit raises deliberately."""


class GridError(MfgError, ValueError):
    """Axis out of range, shape mismatch or grid mismatch."""


class DomainError(MfgError, ValueError):
    """A density value left the domain of a coupling or of the entropy."""

    def __init__(self, message: str, node: Optional[int] = None):
        super().__init__(message)
        self.node = node


class ConvergenceError(MfgError, RuntimeError):
    """An iteration cap or step-size floor was hit."""

    def __init__(self, message: str, residual: float = float("nan"), trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = trace


class LinearSolveError(MfgError, RuntimeError):
    """A KKT, sensitivity or adjoint solve failed even after regularization."""

    def __init__(self, message: str, condition_estimate: float = float("nan")):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class KernelError(MfgError, ValueError):
    """Gram matrix could not be factorized."""


class ConfigError(MfgError, ValueError):
    """Bad configuration: unknown key, bad value or unknown preset."""


class StageError(MfgError):
    """Failure inside one stage of an experiment run."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
