import numpy as np
import pytest

from HybridSpecEngine.actions import (
    GripperState,
    dequantize,
    dequantize_many,
    gripper_binary,
    quantize,
    quantize_many,
)
from HybridSpecEngine.errors import ConfigurationError, InvalidInputError
from HybridSpecEngine.models import ActionSpaceBounds


@pytest.mark.parametrize("value, expected", [(-1.0, 0), (1.0, 255), (0.0, 127)])
def test_quantize_reference_points(unit_bounds, value, expected):
    assert quantize([value] * 7, unit_bounds) == [expected] * 7


@pytest.mark.parametrize("b, expected", [(0, -1.0), (255, 1.0), (127, -1.0 + 127 / 255 * 2)])
def test_dequantize_reference_points(unit_bounds, b, expected):
    assert dequantize([b] * 7, unit_bounds) == pytest.approx([expected] * 7, abs=1e-12)


def test_out_of_range_actions_are_clamped(unit_bounds):
    assert quantize([-5.0, 5.0, 0.0, 0.0, 0.0, 0.0, 2.0], unit_bounds) == [0, 255, 127, 127, 127, 127, 255]


def test_dequantize_then_quantize_is_identity(unit_bounds):
    for b in range(256):
        assert quantize(dequantize([b] * 7, unit_bounds), unit_bounds) == [b] * 7


def test_round_trip_error_within_one_bin():
    bounds = ActionSpaceBounds()
    lo, hi = np.asarray(bounds.low), np.asarray(bounds.high)
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = rng.uniform(lo * 1.5, hi * 1.5)
        back = np.asarray(dequantize(quantize(a, bounds), bounds))
        assert np.all(np.abs(back - np.clip(a, lo, hi)) <= (hi - lo) / 255 + 1e-12)


def test_quantize_is_monotone(unit_bounds):
    values = np.linspace(-1.2, 1.2, 500)
    bins = [quantize([v] * 7, unit_bounds)[0] for v in values]
    assert bins == sorted(bins)


def test_non_finite_action_rejected(unit_bounds):
    with pytest.raises(InvalidInputError):
        quantize([0.0, float("nan"), 0, 0, 0, 0, 0], unit_bounds)
    with pytest.raises(InvalidInputError):
        quantize([0.0] * 6, unit_bounds)


def test_degenerate_bounds_rejected():
    bounds = ActionSpaceBounds.model_construct(low=[0.0] * 7, high=[0.0] + [1.0] * 6)
    with pytest.raises(ConfigurationError):
        quantize([0.0] * 7, bounds)
    with pytest.raises(ConfigurationError):
        quantize([0.0] * 7, ActionSpaceBounds(), n_bins=1)


def test_dequantize_rejects_out_of_range_bins(unit_bounds):
    with pytest.raises(InvalidInputError):
        dequantize([0, 0, 0, 0, 0, 0, 256], unit_bounds)
    with pytest.raises(InvalidInputError):
        dequantize([-1, 0, 0, 0, 0, 0, 0], unit_bounds)


@pytest.mark.parametrize("g, state", [(1.0, GripperState.CLOSED), (0.0, GripperState.OPEN), (0.5, GripperState.CLOSED)])
def test_gripper_binary(g, state):
    assert gripper_binary(g, ActionSpaceBounds()) == state


def test_many_slices(unit_bounds):
    tokens = quantize_many([[-1.0] * 7, [1.0] * 7], unit_bounds)
    assert tokens == [0] * 7 + [255] * 7
    assert dequantize_many(tokens, unit_bounds) == [[-1.0] * 7, [1.0] * 7]
    with pytest.raises(InvalidInputError):
        dequantize_many(tokens[:-1], unit_bounds)
