"""Uniform binning of 7-DoF action slices into tokens and back."""
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .models import ACTION_DIM, ActionSpaceBounds
from .utils import as_finite_array

GRIPPER_DIM = ACTION_DIM - 1
_SNAP = 1e-9


class GripperState(str, Enum):
    OPEN = "open"
    CLOSED = "closed"


def _bounds_arrays(bounds: ActionSpaceBounds) -> tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(bounds.low, dtype=np.float64)
    hi = np.asarray(bounds.high, dtype=np.float64)
    if lo.shape != (ACTION_DIM,) or hi.shape != (ACTION_DIM,):
        raise ConfigurationError(f"action bounds must have {ACTION_DIM} dimensions")
    if np.any(hi <= lo):
        bad = [i for i in range(ACTION_DIM) if hi[i] <= lo[i]]
        raise ConfigurationError(f"degenerate action bounds in dimensions {bad}")
    return lo, hi


def _check_bins(n_bins: int) -> None:
    if n_bins < 2:
        raise ConfigurationError(f"bin count must be at least 2, got {n_bins}")


def quantize(action: Sequence[float], bounds: ActionSpaceBounds, n_bins: int = 256) -> list[int]:
    _check_bins(n_bins)
    a = as_finite_array(action, "action", ndim=1)
    if a.shape != (ACTION_DIM,):
        raise InvalidInputError(f"action must have {ACTION_DIM} components, got {a.shape[0]}")
    lo, hi = _bounds_arrays(bounds)
    scaled = (np.clip(a, lo, hi) - lo) / (hi - lo) * (n_bins - 1)
    # float error can leave an exact bin centre a hair below its integer
    nearest = np.rint(scaled)
    scaled = np.where(np.abs(scaled - nearest) < _SNAP, nearest, scaled)
    bins = np.clip(np.floor(scaled), 0, n_bins - 1).astype(np.int64)
    return [int(b) for b in bins]


def dequantize(bins: Sequence[int], bounds: ActionSpaceBounds, n_bins: int = 256) -> list[float]:
    _check_bins(n_bins)
    b = np.asarray(bins)
    if b.shape != (ACTION_DIM,):
        raise InvalidInputError(f"bins must have {ACTION_DIM} components, got shape {b.shape}")
    if not np.issubdtype(b.dtype, np.integer):
        raise InvalidInputError("bins must be integers")
    if np.any(b < 0) or np.any(b > n_bins - 1):
        raise InvalidInputError(f"bin index out of range [0, {n_bins - 1}]: {b.tolist()}")
    lo, hi = _bounds_arrays(bounds)
    return [float(v) for v in lo + b / (n_bins - 1) * (hi - lo)]


def gripper_binary(g: float, bounds: ActionSpaceBounds) -> GripperState:
    midpoint = (bounds.low[GRIPPER_DIM] + bounds.high[GRIPPER_DIM]) / 2.0
    return GripperState.CLOSED if g >= midpoint else GripperState.OPEN


def quantize_many(actions: Sequence[Sequence[float]], bounds: ActionSpaceBounds, n_bins: int = 256) -> list[int]:
    """Flatten several action slices into one token list."""
    tokens: list[int] = []
    for action in actions:
        tokens.extend(quantize(action, bounds, n_bins))
    return tokens


def dequantize_many(tokens: Sequence[int], bounds: ActionSpaceBounds, n_bins: int = 256) -> list[list[float]]:
    if len(tokens) % ACTION_DIM:
        raise InvalidInputError(f"token count {len(tokens)} is not a multiple of {ACTION_DIM}")
    return [
        dequantize(list(tokens[i:i + ACTION_DIM]), bounds, n_bins)
        for i in range(0, len(tokens), ACTION_DIM)
    ]
