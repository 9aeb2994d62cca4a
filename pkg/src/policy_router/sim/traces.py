"""Synthetic policy execution: outcome sampling and trace templates.

Outcome randomness is drawn from the episode configuration's own seed, so
every policy (and every router) facing the same configuration sees the
same uniform draw. Marginally each outcome is still Bernoulli(true_rate);
the coupling only removes noise from paired comparisons.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ..core import EpisodeTrace, Frame, SceneFeatures, SceneObject, Stage
from ..evaluator import ToolManifest
from .universe import FAILURE_STAGES, EpisodeConfig, TaskProfile, Universe, scene_for, stage_distribution, true_rate

FRAME_DT = 1.0
GRIPPER = "gripper"
GRIPPER_HOME = (0.0, -0.3, 1.0)
LIFT = 0.10
GRASP_DELTA = 0.02
APPROACH_RADIUS = 0.08
PLACE_RADIUS = 0.03


def tool_manifest(universe: Universe) -> ToolManifest:
    """Per-task grasp / approach / placement tools for a universe."""
    tools = []
    timeouts = {}
    for tid in universe.task_ids:
        t = universe.task(tid)
        tools += [
            {
                "tool_id": f"{tid}/grasp",
                "applies_to": tid,
                "kind": "pose-delta",
                "params": {"obj": t.manipuland, "threshold": GRASP_DELTA, "flag": "grasped"},
            },
            {
                "tool_id": f"{tid}/approach",
                "applies_to": tid,
                "kind": "distance-threshold",
                "params": {"a": t.manipuland, "b": t.target, "threshold": APPROACH_RADIUS, "flag": "approached"},
            },
            {
                "tool_id": f"{tid}/place",
                "applies_to": tid,
                "kind": "region-containment",
                "params": {"obj": t.manipuland, "target": t.target, "radius": PLACE_RADIUS, "flag": "placed"},
            },
        ]
        timeouts[tid] = t.timeout_s
    return ToolManifest.from_dict({"tools": tools, "timeouts": timeouts})


def _lerp(a, b, f):
    return tuple(x + (y - x) * f for x, y in zip(a, b))


def _path(keys: list[tuple[float, tuple[float, ...]]], t: float) -> tuple[float, ...]:
    if t <= keys[0][0]:
        return keys[0][1]
    for (t0, p0), (t1, p1) in zip(keys, keys[1:]):
        if t <= t1:
            return _lerp(p0, p1, (t - t0) / (t1 - t0) if t1 > t0 else 1.0)
    return keys[-1][1]


def _offset(p, dx=0.0, dy=0.0, dz=0.0):
    return (p[0] + dx, p[1] + dy, p[2] + dz)


def generate_trace(
    task: TaskProfile, scene: SceneFeatures, stage: Stage, rng: np.random.Generator
) -> EpisodeTrace:
    """Template trace that succeeds (``Stage.NONE``) or fails at ``stage``."""
    T = task.timeout_s
    p0 = scene.object(task.manipuland).position
    q = scene.object(task.target).position
    if stage is Stage.NONE:
        elapsed = T * float(rng.uniform(0.35, 0.75))
    elif stage is Stage.TIMEOUT:
        elapsed = T * float(rng.uniform(1.0, 1.15))
    else:
        elapsed = T
    elapsed = max(FRAME_DT, math.floor(elapsed / FRAME_DT) * FRAME_DT)
    t_grasp, t_hover, t_place, t_release = (elapsed * f for f in (0.25, 0.65, 0.8, 0.9))
    hover = _offset(q, dz=LIFT + 0.02)
    angle = float(rng.uniform(0, 2 * math.pi))
    if stage in (Stage.NONE, Stage.TIMEOUT):
        r = float(rng.uniform(0.0, 0.01))
        final = _offset(q, r * math.cos(angle), r * math.sin(angle), 0.02)
    else:
        r = float(rng.uniform(0.045, 0.07))
        final = _offset(q, r * math.cos(angle), r * math.sin(angle), 0.0)
    lifted = _offset(p0, dz=LIFT)

    if stage is Stage.GRASP:
        obj_keys = [(0.0, p0)]
        grip_keys = [(0.0, GRIPPER_HOME), (t_grasp, _offset(p0, dz=0.02)), (elapsed, GRIPPER_HOME)]
        closed = (t_grasp, elapsed)
    elif stage is Stage.TRANSPORT:
        f = float(rng.uniform(0.1, 0.4))
        stall = _lerp(lifted, hover, f)
        t_drop = t_grasp + (t_hover - t_grasp) * f
        dropped = (stall[0], stall[1], p0[2])
        obj_keys = [(0.0, p0), (t_grasp, p0), (t_grasp + 0.5 * (t_drop - t_grasp), lifted), (t_drop, stall), (t_drop + FRAME_DT, dropped)]
        grip_keys = [(0.0, GRIPPER_HOME), (t_grasp, p0), (t_drop, stall), (elapsed, GRIPPER_HOME)]
        closed = (t_grasp, t_drop)
    else:
        obj_keys = [(0.0, p0), (t_grasp, p0), (t_grasp + 0.1 * (t_hover - t_grasp), lifted), (t_hover, hover), (t_place, final)]
        grip_keys = [(0.0, GRIPPER_HOME), (t_grasp, p0), (t_hover, hover), (t_place, final), (elapsed, GRIPPER_HOME)]
        closed = (t_grasp, t_release)

    n = int(round(elapsed / FRAME_DT)) + 1
    others = [o for o in scene.objects if o.name != task.manipuland]
    manip = scene.object(task.manipuland)
    frames = []
    grips = []
    for i in range(n):
        t = i * FRAME_DT
        objs = [SceneObject(manip.name, _path(obj_keys, t), manip.category), *others]
        objs.append(SceneObject(GRIPPER, _path(grip_keys, t), "effector"))
        frames.append(Frame(t, SceneFeatures(tuple(objs), scene.camera_pose)))
        grips.append(closed[0] <= t <= closed[1])
    return EpisodeTrace(tuple(frames), tuple(grips), outcome=stage is Stage.NONE, elapsed_s=frames[-1].t)


def _pick_stage(dist: Mapping[Stage, float], u: float) -> Stage:
    acc = 0.0
    for s in FAILURE_STAGES:
        acc += dist[s]
        if u < acc:
            return s
    return FAILURE_STAGES[-1]


def execute_policy(
    universe: Universe,
    policy_id: str,
    config: EpisodeConfig,
    rng: np.random.Generator | None = None,
    *,
    force_stage: Stage | None = None,
) -> EpisodeTrace:
    """Roll out a synthetic policy.

    Without ``rng`` the draws come from ``config.seed`` (common random
    numbers across policies). ``force_stage`` bypasses the outcome draw.
    """
    if policy_id not in universe.policies:
        raise KeyError(f"unknown policy {policy_id!r}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    u_outcome, u_stage = rng.random(), rng.random()
    task = universe.task(config.task_id)
    if force_stage is not None:
        stage = force_stage
    elif u_outcome < true_rate(universe, policy_id, config):
        stage = Stage.NONE
    else:
        stage = _pick_stage(stage_distribution(universe, policy_id, config.task_id), u_stage)
    return generate_trace(task, scene_for(universe, config), stage, rng)
