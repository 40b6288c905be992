"""Windowed trajectory kinematics and the fused retrieval/drafter metric.

A window of gripper positions is centered, projected onto its two dominant
principal axes and fitted with a circle; the mean distance to the fitted center
is the curvature radius R. Together with the path length D of the same window
this yields a fused value F in [0, 1] that separates long straight motion
(retrieval friendly) from slow fine manipulation (drafter friendly).
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from loguru import logger
from scipy.optimize import least_squares

from .errors import InsufficientWindowError, InvalidInputError
from .models import FusedMetricParams, NormalizationBounds, SDMode, WindowFeatures
from .utils import as_finite_array

SPREAD_EPS = 1e-9
COLLINEAR_RATIO = 1e-9
FIT_TOL = 1e-10
FIT_MAX_NFEV = 400
COLD = "cold"


@dataclass(frozen=True)
class CircleFit:
    center: tuple[float, float]
    radius: float
    degenerate: bool = False
    collinear: bool = False
    evaluations: int = 0


def _points(points, dims: int, minimum: int) -> np.ndarray:
    arr = as_finite_array(points, "points")
    if arr.ndim != 2 or arr.shape[1] != dims:
        raise InvalidInputError(f"points must have shape (n, {dims}), got {arr.shape}")
    if arr.shape[0] < minimum:
        raise InsufficientWindowError(f"need at least {minimum} points, got {arr.shape[0]}")
    return arr


def project_window(points: Sequence[Sequence[float]]) -> np.ndarray:
    pts = _points(points, 3, 3)
    centered = pts - pts.mean(axis=0)
    # eigh returns ascending eigenvalues; keep the two largest
    _, vecs = np.linalg.eigh(centered.T @ centered)
    axes = vecs[:, [2, 1]]
    return centered @ axes


def _spread(pts: np.ndarray) -> float:
    diffs = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diffs ** 2).sum(axis=-1)).max())


def _radial_residuals(center: np.ndarray, pts: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(pts - center, axis=1)
    return d - d.mean()


def _algebraic_center(pts: np.ndarray) -> Optional[np.ndarray]:
    a = np.column_stack([2 * pts, np.ones(len(pts))])
    b = (pts ** 2).sum(axis=1)
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < 3 or not np.all(np.isfinite(sol)):
        return None
    return sol[:2]


def fit_circle_center(points2d: Sequence[Sequence[float]]) -> CircleFit:
    """Minimize the variance of distances from the points to a center.

    Levenberg-Marquardt on the radial residuals, run in coordinates scaled to
    the window's spread, from the centroid and from the algebraic (Kasa)
    center; the lower cost wins.
    """
    pts = _points(points2d, 2, 3)
    centroid = pts.mean(axis=0)
    spread = _spread(pts)
    if spread < SPREAD_EPS:
        return CircleFit(center=(float(centroid[0]), float(centroid[1])), radius=0.0, degenerate=True)

    sv = np.linalg.svd(pts - centroid, compute_uv=False)
    if sv[1] <= COLLINEAR_RATIO * sv[0]:
        return CircleFit(center=(float(centroid[0]), float(centroid[1])), radius=float("inf"), collinear=True)

    scaled = (pts - centroid) / spread
    starts = [np.zeros(2)]
    algebraic = _algebraic_center(scaled)
    if algebraic is not None:
        starts.append(algebraic)

    best = None
    for start in starts:
        result = least_squares(
            _radial_residuals, start, args=(scaled,), method="lm",
            xtol=FIT_TOL, ftol=FIT_TOL, gtol=FIT_TOL, max_nfev=FIT_MAX_NFEV,
        )
        if best is None or result.cost < best.cost:
            best = result
    center = centroid + spread * best.x
    radius = float(np.linalg.norm(pts - center, axis=1).mean())
    return CircleFit(center=(float(center[0]), float(center[1])), radius=radius, evaluations=int(best.nfev))


def curvature_radius(points: Sequence[Sequence[float]], r_cap: float) -> float:
    fit = fit_circle_center(project_window(points))
    if fit.degenerate:
        return 0.0
    return float(min(fit.radius, r_cap))


def cumulative_displacement(points: Sequence[Sequence[float]]) -> float:
    pts = _points(points, 3, 2)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def normalize(x: float, lo: float, hi95: float) -> float:
    if lo > hi95:
        raise InvalidInputError(f"normalization bounds inverted: lo={lo} > hi95={hi95}")
    if lo == hi95:
        logger.warning(f"degenerate normalization bounds lo == hi95 == {lo}; value forced to 0")
        return 0.0
    return float(min(max((x - lo) / (hi95 - lo), 0.0), 1.0))


def compute_percentile_bounds(samples: Sequence[float]) -> tuple[float, float]:
    if len(samples) == 0:
        raise InvalidInputError("cannot compute bounds of an empty sample list")
    ordered = sorted(float(s) for s in samples)
    n = len(ordered)
    # nearest rank: ceil(0.95 n) - 1, in integer arithmetic
    idx = (95 * n + 99) // 100 - 1
    return ordered[0], ordered[idx]


def fused_metric(R: float, D: float, params: FusedMetricParams, bounds: NormalizationBounds) -> float:
    if R < 0 or D < 0:
        raise InvalidInputError(f"R and D must be nonnegative, got R={R}, D={D}")
    r_term = normalize(R, bounds.r_min, bounds.r_max95)
    d_term = normalize(D, bounds.d_min, bounds.d_max95)
    value = params.alpha * r_term + (1.0 - params.alpha) * d_term
    return float(min(max(value, 0.0), 1.0))


def classify_segment(F: float, threshold: float) -> SDMode:
    return SDMode.RETRIEVAL_SD if F > threshold else SDMode.DRAFTER_SD


def window_features(points: Sequence[Sequence[float]], params: FusedMetricParams, bounds: NormalizationBounds) -> WindowFeatures:
    pts = _points(points, 3, 3)
    R = curvature_radius(pts, params.r_cap)
    D = cumulative_displacement(pts)
    return WindowFeatures(R=R, D=D, F=fused_metric(R, D, params, bounds), w=len(pts))


def analyze_trajectory(
    positions: Sequence[Sequence[float]],
    params: FusedMetricParams,
    bounds: NormalizationBounds,
) -> list[dict]:
    """Per-step R, D, F and segment label over the trailing window.

    Steps whose trailing window is shorter than ``params.window`` are labeled
    ``cold`` and carry no metric values.
    """
    pts = as_finite_array(positions, "positions")
    if pts.size == 0:
        return []
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"positions must have shape (n, 3), got {pts.shape}")
    w = params.window
    rows = []
    for i in range(len(pts)):
        if i + 1 < w:
            rows.append({"step": i, "R": None, "D": None, "F": None, "label": COLD})
            continue
        feats = window_features(pts[i + 1 - w:i + 1], params, bounds)
        rows.append({
            "step": i,
            "R": feats.R,
            "D": feats.D,
            "F": feats.F,
            "label": classify_segment(feats.F, params.threshold).value,
        })
    return rows


def window_samples(positions: Sequence[Sequence[float]], window: int, r_cap: float) -> tuple[list[float], list[float]]:
    """All trailing-window (R, D) samples of one trajectory."""
    pts = as_finite_array(positions, "positions")
    radii, displacements = [], []
    for end in range(window, len(pts) + 1):
        chunk = pts[end - window:end]
        radii.append(curvature_radius(chunk, r_cap))
        displacements.append(cumulative_displacement(chunk))
    return radii, displacements


def bounds_from_samples(radii: Sequence[float], displacements: Sequence[float]) -> NormalizationBounds:
    r_min, r_max95 = compute_percentile_bounds(radii)
    d_min, d_max95 = compute_percentile_bounds(displacements)
    return NormalizationBounds(d_min=d_min, d_max95=d_max95, r_min=r_min, r_max95=r_max95)


def positions_from_deltas(deltas: Sequence[Sequence[float]], origin: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Absolute positions visited by applying position deltas from ``origin``."""
    d = as_finite_array(deltas, "deltas")
    start = as_finite_array(origin, "origin")
    if d.size == 0:
        return start[None, :]
    return np.vstack([start, start + np.cumsum(d[:, :3], axis=0)])


def threshold_grid(step: float = 0.05) -> list[float]:
    count = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(count + 1)]


def sweep_threshold(
    values: Sequence[float],
    phases: Optional[Sequence[Optional[str]]] = None,
    grid: Optional[Sequence[float]] = None,
) -> tuple[list[dict], Optional[float]]:
    """Evaluate the retrieval/drafter split for every threshold in ``grid``.

    With phase labels (``straight`` / ``curved``) each threshold also gets a
    balanced accuracy, straight steps counting as retrieval positives; the
    best threshold is the first one reaching the highest accuracy.
    """
    grid = list(grid) if grid is not None else threshold_grid()
    F = np.asarray(values, dtype=np.float64)
    labels = None
    if phases is not None:
        labels = np.asarray([p or "" for p in phases])
        if len(labels) != len(F):
            raise InvalidInputError("phase labels and metric values differ in length")
    rows = []
    best_theta, best_score = None, -1.0
    for theta in grid:
        picks = F > theta
        row = {"theta": theta, "retrieval_fraction": float(picks.mean()) if len(F) else 0.0, "balanced_accuracy": None}
        if labels is not None:
            straight = labels == "straight"
            curved = labels == "curved"
            if straight.any() and curved.any():
                tpr = float(picks[straight].mean())
                tnr = float((~picks[curved]).mean())
                score = 0.5 * (tpr + tnr)
                row["balanced_accuracy"] = score
                if score > best_score:
                    best_theta, best_score = theta, score
        rows.append(row)
    return rows, best_theta
