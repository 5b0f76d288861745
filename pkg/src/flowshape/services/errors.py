from __future__ import annotations
from typing import Optional


class FlowShapeError(Exception):
    """Base for every failure the CLI turns into a nonzero exit."""

    exit_code = 1


class RejectedInputError(FlowShapeError, ValueError):
    exit_code = 2


class ConfigurationError(FlowShapeError):
    exit_code = 2


class IntegrationError(FlowShapeError):
    """Non-finite values during ODE integration or training."""

    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class TrainingDivergedError(IntegrationError):
    pass


class StorageError(FlowShapeError):
    exit_code = 4


def require_same_shape(a, b, what: str = "inputs") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise RejectedInputError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
