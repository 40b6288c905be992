"""Scripted policy acting as the verifier model of the toy world.

The policy approaches the object in a straight line, closes in along a
shrinking log-spiral, steps onto it, grasps, transports to the goal the same
way and releases. Its quantized actions are the greedy tokens; the final-layer
"features" are a normalized summary of the state relative to the goal.
"""
import math
from typing import Sequence

import numpy as np

from .actions import GRIPPER_DIM, dequantize, quantize
from .errors import VerifierError
from .models import ACTION_DIM, ActionsConfig, EnvConfig
from .toy_env import EnvState, is_success, transition

STRAIGHT = "straight"
CURVED = "curved"


def _target(state: EnvState) -> tuple[np.ndarray, float]:
    task = state.task
    if state.holding:
        return np.asarray(task.goal), task.place_yaw
    return np.asarray(state.object), task.grasp_yaw


def oracle_phase(state: EnvState, config: EnvConfig) -> str:
    """``straight`` for the fast approach, ``curved`` for everything inside
    ``fine_radius`` (spiral, final step, grasp and release)."""
    target, _ = _target(state)
    d = float(np.linalg.norm(target - np.asarray(state.pose)))
    return STRAIGHT if d > config.fine_radius else CURVED


def oracle_action(state: EnvState, config: EnvConfig, bounds_low: Sequence[float], bounds_high: Sequence[float]) -> list[float]:
    target, yaw = _target(state)
    grip_lo, grip_hi = bounds_low[GRIPPER_DIM], bounds_high[GRIPPER_DIM]

    offset = target - np.asarray(state.pose)
    d = float(np.linalg.norm(offset))
    if d <= config.approach_tol:
        move = np.zeros(3)
        # grasp when empty-handed, release when carrying
        grip = grip_lo if state.holding else grip_hi
    else:
        grip = grip_hi if state.holding else grip_lo
        if d > config.fine_radius:
            move = offset / d * min(config.fast_speed, d)
        elif d > config.spiral_inner_radius:
            # next offset from the target: rotated in the table plane and shrunk
            rel = -offset
            c, s = math.cos(config.spiral_turn), math.sin(config.spiral_turn)
            nxt = config.spiral_shrink * np.array([c * rel[0] - s * rel[1], s * rel[0] + c * rel[1], rel[2]])
            move = nxt - rel
        else:
            move = offset
        move = np.clip(move, bounds_low[:3], bounds_high[:3])

    target_orient = np.array([0.0, 0.0, yaw])
    rot = np.clip(-config.rot_gain * (np.asarray(state.orient) - target_orient), -config.rot_step, config.rot_step)
    return [float(v) for v in move] + [float(v) for v in rot] + [float(grip)]


def oracle_features(state: EnvState, n_tasks: int, dim: int, scale: float = 10.0) -> np.ndarray:
    """Unit vector of (pose, goal, goal - pose, task one-hot), zero padded."""
    pose = np.asarray(state.pose)
    goal = np.asarray(state.task.goal)
    one_hot = np.zeros(n_tasks)
    one_hot[state.task.index] = 1.0
    raw = np.concatenate([scale * pose, scale * goal, scale * (goal - pose), one_hot])
    if dim < raw.size:
        raise ValueError(f"feature dim {dim} below the {raw.size} feature components")
    out = np.zeros(dim)
    out[:raw.size] = raw
    return out / np.linalg.norm(out)


class OracleVLA:
    """Deterministic verifier: greedy tokens are the scripted policy's
    quantized actions given the state reached by the preceding tokens."""

    def __init__(self, env_config: EnvConfig, actions: ActionsConfig, n_tasks: int, feature_dim: int):
        self.env_config = env_config
        self.actions = actions
        self.n_tasks = n_tasks
        self.feature_dim = feature_dim

    def action_tokens(self, state: EnvState) -> list[int]:
        action = oracle_action(state, self.env_config, self.actions.bounds.low, self.actions.bounds.high)
        return quantize(action, self.actions.bounds, self.actions.n_bins)

    def execute(self, state: EnvState, tokens: Sequence[int]) -> EnvState:
        action = dequantize(list(tokens), self.actions.bounds, self.actions.n_bins)
        return transition(state, action, self.env_config, self.actions.bounds)

    def greedy_tokens(self, context: Sequence[int], observation: EnvState, draft: Sequence[int]) -> list[int]:
        try:
            return self._greedy_tokens(context, observation, draft)
        except (ValueError, TypeError, AttributeError, IndexError) as e:
            raise VerifierError(f"verifier forward pass failed: {e}") from e

    def _greedy_tokens(self, context: Sequence[int], observation: EnvState, draft: Sequence[int]) -> list[int]:
        # ``observation`` is the state at the slice boundary where ``context`` starts
        prefix = list(context) + list(draft)
        state = observation
        current = 0
        greedy = self.action_tokens(state)
        out: list[int] = []
        for j in range(len(context), len(prefix) + 1):
            while current < j // ACTION_DIM:
                state = self.execute(state, prefix[current * ACTION_DIM:(current + 1) * ACTION_DIM])
                current += 1
                greedy = self.action_tokens(state)
            out.append(greedy[j % ACTION_DIM])
        return out

    def features(self, observation: EnvState) -> np.ndarray:
        try:
            return oracle_features(observation, self.n_tasks, self.feature_dim, self.env_config.feature_scale)
        except (ValueError, TypeError, AttributeError, IndexError) as e:
            raise VerifierError(f"verifier feature extraction failed: {e}") from e


def rollout(oracle: OracleVLA, start: EnvState, horizon: int) -> list[tuple[EnvState, list[int]]]:
    """Oracle episode as (state, executed tokens) pairs until success or horizon."""
    steps = []
    state = start
    while state.step < horizon and not is_success(state, oracle.env_config):
        tokens = oracle.action_tokens(state)
        steps.append((state, tokens))
        state = oracle.execute(state, tokens)
    return steps
