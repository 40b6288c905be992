"""Kinematic pick-and-place world.

Actions displace the gripper by their (dequantized) position and rotation
deltas; closing the gripper near the object grasps it, opening releases it.
There is no physics: an object being held simply follows the gripper.
"""
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .actions import GRIPPER_DIM, GripperState, gripper_binary
from .models import ActionSpaceBounds, EnvConfig
from .utils import derive_rng

START_POSE = (0.0, 0.0, 0.2)
TABLE_Z = 0.02
Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    index: int
    start: Vec3
    object: Vec3
    goal: Vec3
    grasp_yaw: float
    place_yaw: float
    instruction: str


@dataclass(frozen=True)
class EnvState:
    task: TaskSpec
    pose: Vec3
    orient: Vec3
    object: Vec3
    holding: bool = False
    gripper_closed: bool = False
    step: int = 0


def _vec(values) -> Vec3:
    return (float(values[0]), float(values[1]), float(values[2]))


def make_task_suite(config: EnvConfig) -> list[TaskSpec]:
    tasks = []
    for i in range(config.n_tasks):
        rng = derive_rng(config.suite_seed, i)
        obj_angle = rng.uniform(0.0, 2 * math.pi)
        goal_angle = obj_angle + math.radians(rng.uniform(120.0, 160.0)) * (1 if rng.random() < 0.5 else -1)
        r = config.object_radius
        tasks.append(TaskSpec(
            task_id=f"task-{i}",
            index=i,
            start=START_POSE,
            object=(r * math.cos(obj_angle), r * math.sin(obj_angle), TABLE_Z),
            goal=(r * math.cos(goal_angle), r * math.sin(goal_angle), TABLE_Z),
            grasp_yaw=float(rng.uniform(-0.3, 0.3)),
            place_yaw=float(rng.uniform(-0.3, 0.3)),
            instruction=f"pick up object {i} and place it on target {i}",
        ))
    return tasks


def _disk_offset(rng: np.random.Generator, radius: float) -> np.ndarray:
    angle = rng.uniform(0.0, 2 * math.pi)
    dist = radius * math.sqrt(rng.random())
    return np.array([dist * math.cos(angle), dist * math.sin(angle), 0.0])


def perturb_task(task: TaskSpec, radius: float, rng: np.random.Generator) -> TaskSpec:
    """Same task, unseen instance: start, object and goal shifted in the
    table plane by at most ``radius``."""
    if radius <= 0:
        return task
    return replace(
        task,
        start=_vec(np.asarray(task.start) + _disk_offset(rng, radius)),
        object=_vec(np.asarray(task.object) + _disk_offset(rng, radius)),
        goal=_vec(np.asarray(task.goal) + _disk_offset(rng, radius)),
    )


def reset(task: TaskSpec) -> EnvState:
    return EnvState(task=task, pose=task.start, orient=(0.0, 0.0, 0.0), object=task.object)


def distance(a: Sequence[float], b: Sequence[float]) -> float:
    return math.dist(a, b)


def transition(state: EnvState, action: Sequence[float], config: EnvConfig, bounds: ActionSpaceBounds) -> EnvState:
    pose = _vec([state.pose[i] + action[i] for i in range(3)])
    orient = _vec([state.orient[i] + action[3 + i] for i in range(3)])
    closed = gripper_binary(action[GRIPPER_DIM], bounds) == GripperState.CLOSED
    holding = state.holding
    if closed and not holding and distance(pose, state.object) <= config.success_tol:
        holding = True
    elif not closed:
        holding = False
    obj = pose if holding else state.object
    return EnvState(
        task=state.task,
        pose=pose,
        orient=orient,
        object=obj,
        holding=holding,
        gripper_closed=closed,
        step=state.step + 1,
    )


def is_success(state: EnvState, config: EnvConfig) -> bool:
    return distance(state.pose, state.task.goal) <= config.success_tol and not state.gripper_closed


def is_done(state: EnvState, config: EnvConfig) -> bool:
    return is_success(state, config) or state.step >= config.horizon


def observation_embedding(state: EnvState, dim: int) -> np.ndarray:
    """Unit retrieval key for a state: scaled pose, orientation, object and
    goal positions plus grasp flags, zero padded to ``dim``."""
    raw = np.concatenate([
        [1.0],
        10.0 * np.asarray(state.pose),
        3.0 * np.asarray(state.orient),
        10.0 * np.asarray(state.object),
        10.0 * np.asarray(state.task.goal),
        [float(state.holding), float(state.gripper_closed)],
    ])
    if dim < raw.size:
        raise ValueError(f"embedding dim {dim} below the {raw.size} state components")
    out = np.zeros(dim)
    out[:raw.size] = raw
    return out / np.linalg.norm(out)
