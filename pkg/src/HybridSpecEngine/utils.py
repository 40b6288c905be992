import csv
import json
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import InvalidInputError


def as_finite_array(values, name: str = "input", ndim: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError):
        raise InvalidInputError(f"{name}: not numeric") from None
    if ndim is not None and arr.ndim != ndim:
        raise InvalidInputError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: contains non-finite values")
    return arr


def derive_rng(*keys: int) -> np.random.Generator:
    """Independent generator per (seed, task, trial, ...) tuple."""
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def dumps_line(obj) -> str:
    # repr-based float formatting round-trips exactly
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def fmt_float(value: float | None) -> str:
    if value is None:
        return ""
    return f"{value:.6f}"
