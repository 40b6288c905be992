import math
from pathlib import Path

import numpy as np
import pytest

from HybridSpecEngine.config import load_norm_bounds
from HybridSpecEngine.models import ActionSpaceBounds, EngineConfig

BOUNDS_FILE = Path(__file__).resolve().parents[1] / "norm_bounds.json"


@pytest.fixture
def unit_bounds():
    return ActionSpaceBounds(low=[-1.0] * 7, high=[1.0] * 7)


@pytest.fixture
def goal_bounds():
    return load_norm_bounds(BOUNDS_FILE)["libero-goal"]


@pytest.fixture
def small_config():
    """Two tasks, few demonstrations and trials: fast enough for unit tests."""
    return EngineConfig.model_validate({
        "env": {"n_tasks": 2, "demo_episodes": 2},
        "eval": {"trials": 1},
    })


def circle_points(n, radius, center=(0.0, 0.0, 0.0), span=2 * math.pi, start=0.0):
    angles = start + np.arange(n) * span / n
    return np.column_stack([
        center[0] + radius * np.cos(angles),
        center[1] + radius * np.sin(angles),
        np.full(n, center[2]),
    ])


def line_points(n, spacing, direction=(1.0, 0.0, 0.0), origin=(0.0, 0.0, 0.0)):
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    return np.asarray(origin, dtype=float) + np.outer(np.arange(n) * spacing, u)
