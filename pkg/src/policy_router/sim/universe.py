"""Synthetic task universe with known per-policy success profiles.

Each task has nominal object positions, domain-randomization axes that
shift objects, per-policy base success rates, and optional per-axis
sensitivities. ``true_rate`` is the ground truth behind the routing oracle.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Mapping, Sequence

import numpy as np

from ..core import SceneFeatures, SceneObject, Stage, TaskInstance

FAILURE_STAGES = (Stage.GRASP, Stage.TRANSPORT, Stage.PLACEMENT, Stage.TIMEOUT)
STAGE_PRESETS = ("uniform", "competence")
TABLE_HEIGHT = 0.75
CAMERA_POSE = (0.0, -0.45, 1.1, 0.9, 0.0, 0.0)
DEFAULT_TIMEOUT_S = 30.0
DEFAULT_AXIS_HALF_WIDTH = 0.08


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class Axis:
    name: str
    low: float
    high: float
    # which object and coordinate (0=x, 1=y, 2=z) the axis displaces
    target_object: str = ""
    coord: int = 0

    def normalize(self, value: float) -> float:
        if self.high == self.low:
            return 0.0
        mid = (self.high + self.low) / 2.0
        return (value - mid) / ((self.high - self.low) / 2.0)


@dataclass(frozen=True)
class TaskProfile:
    task_id: str
    instruction: str
    base_rates: dict[str, float]
    objects: tuple[SceneObject, ...]
    manipuland: str
    target: str
    axes: tuple[Axis, ...] = ()
    sensitivity: dict[str, dict[str, float]] = field(default_factory=dict)
    timeout_s: float = DEFAULT_TIMEOUT_S


@dataclass(frozen=True)
class EpisodeConfig:
    task_id: str
    values: dict[str, float]
    seed: int


@dataclass(frozen=True)
class Universe:
    tasks: dict[str, TaskProfile]
    policies: tuple[str, ...]
    stage_preset: str = "uniform"
    # Explicit per-policy failure-stage weights override the preset.
    stage_weights: dict[str, dict[str, float]] = field(default_factory=dict)
    seed: int = 0

    @property
    def task_ids(self) -> list[str]:
        return sorted(self.tasks)

    def task(self, task_id: str) -> TaskProfile:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise KeyError(f"unknown task {task_id!r}") from None


def _unit_hash(*parts: Any) -> float:
    h = hashlib.blake2b("/".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2**64


def _nominal_position(seed: int, task_id: str, name: str, role: int) -> tuple[float, float, float]:
    # Manipuland on the left, target on the right, extras at the back, so
    # the start pose never satisfies the approach test.
    lo, hi = [(-0.35, -0.2), (0.15, 0.3), (-0.1, 0.1)][min(role, 2)]
    x = lo + (hi - lo) * _unit_hash(seed, task_id, name, "x")
    y = -0.15 + 0.3 * _unit_hash(seed, task_id, name, "y") + (0.2 if role >= 2 else 0.0)
    return (round(x, 4), round(y, 4), TABLE_HEIGHT)


def _rate(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
        raise ProfileError(f"{where}: rate must be a number in [0, 1], got {v!r}")
    return float(v)


def _parse_task(entry: Mapping[str, Any], policies: Sequence[str], seed: int) -> TaskProfile:
    try:
        tid = entry["task_id"]
        rates = entry["base_rates"]
    except KeyError as exc:
        raise ProfileError(f"task entry missing {exc.args[0]!r}") from None
    base = {p: _rate(rates[p], f"{tid}.{p}") for p in policies if p in rates}
    if set(base) != set(policies):
        raise ProfileError(f"{tid}: base_rates must cover policies {list(policies)}")
    obj_specs = entry.get("objects") or [{"name": "object", "category": "item"}, {"name": "target", "category": "marker"}]
    names = [o["name"] for o in obj_specs]
    manip = entry.get("manipuland", names[0])
    target = entry.get("target", names[1] if len(names) > 1 else names[0])
    objects = []
    for o in obj_specs:
        role = 0 if o["name"] == manip else 1 if o["name"] == target else 2
        pos = o.get("position") or _nominal_position(seed, tid, o["name"], role)
        objects.append(SceneObject(o["name"], tuple(float(c) for c in pos), o.get("category", "")))
    if "axes" in entry:
        axes = tuple(
            Axis(a["name"], float(a["low"]), float(a["high"]), a.get("object", manip), int(a.get("coord", 0)))
            for a in entry["axes"]
        )
    else:
        w = DEFAULT_AXIS_HALF_WIDTH
        axes = (Axis("obj_x", -w, w, manip, 0), Axis("obj_y", -w, w, manip, 1))
    for a in axes:
        if not (math.isfinite(a.low) and math.isfinite(a.high)) or a.low > a.high:
            raise ProfileError(f"{tid}: axis {a.name} needs a finite range with low <= high")
        if a.target_object not in names:
            raise ProfileError(f"{tid}: axis {a.name} moves unknown object {a.target_object!r}")
    sens = {p: {k: float(v) for k, v in d.items()} for p, d in entry.get("sensitivity", {}).items()}
    return TaskProfile(
        task_id=tid,
        instruction=entry.get("instruction", tid.replace("_", " ")),
        base_rates=base,
        objects=tuple(objects),
        manipuland=manip,
        target=target,
        axes=axes,
        sensitivity=sens,
        timeout_s=float(entry.get("timeout_s", DEFAULT_TIMEOUT_S)),
    )


def load_profile(source: str | Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Profile dict from a path, a dict, or (``None``) the bundled table."""
    if source is None:
        text = resources.files("policy_router.data").joinpath("table1.json").read_text()
        return json.loads(text)
    if isinstance(source, Mapping):
        return dict(source)
    try:
        with open(source, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{source}: malformed profile ({exc})") from None


def make_universe(
    profile_source: str | Mapping[str, Any] | None = None,
    noise_params: Mapping[str, Any] | None = None,
    seed: int = 0,
) -> Universe:
    """Build a deterministic universe.

    ``noise_params`` may override ``stage_preset`` ("uniform" or
    "competence"), ``stage_weights`` (policy -> stage -> weight), and
    ``axis_half_width`` (meters, for tasks without explicit axes).
    """
    data = load_profile(profile_source)
    noise = dict(noise_params or {})
    if "tasks" not in data or not data["tasks"]:
        raise ProfileError("profile has no tasks")
    policies = tuple(data.get("policies") or sorted(data["tasks"][0]["base_rates"]))
    if "axis_half_width" in noise:
        w = float(noise["axis_half_width"])
        data = {**data, "tasks": [t if "axes" in t else {**t, "axes": _default_axes(t, w)} for t in data["tasks"]]}
    tasks = {}
    for entry in data["tasks"]:
        t = _parse_task(entry, policies, seed)
        if t.task_id in tasks:
            raise ProfileError(f"duplicate task {t.task_id!r}")
        tasks[t.task_id] = t
    preset = noise.get("stage_preset", data.get("stage_preset", "uniform"))
    if preset not in STAGE_PRESETS:
        raise ProfileError(f"unknown stage preset {preset!r}")
    weights = noise.get("stage_weights", data.get("stage_weights", {}))
    return Universe(tasks, policies, preset, {p: dict(w) for p, w in weights.items()}, seed)


def _default_axes(entry: Mapping[str, Any], w: float) -> list[dict[str, Any]]:
    manip = entry.get("manipuland") or (entry.get("objects") or [{"name": "object"}])[0]["name"]
    return [
        {"name": "obj_x", "low": -w, "high": w, "object": manip, "coord": 0},
        {"name": "obj_y", "low": -w, "high": w, "object": manip, "coord": 1},
    ]


def with_crossover(universe: Universe, strength: float = 0.2, axis: str = "obj_x") -> Universe:
    """Give every task a configuration-dependent crossover: the two best
    policies by base rate move in opposite directions along ``axis``."""
    tasks = {}
    for tid, t in universe.tasks.items():
        ranked = sorted(t.base_rates, key=lambda p: (-t.base_rates[p], p))
        sens = {p: dict(v) for p, v in t.sensitivity.items()}
        if len(ranked) >= 2:
            sens.setdefault(ranked[0], {})[axis] = -strength
            sens.setdefault(ranked[1], {})[axis] = strength
        tasks[tid] = replace(t, sensitivity=sens)
    return replace(universe, tasks=tasks)


def without_sensitivity(universe: Universe) -> Universe:
    return replace(universe, tasks={tid: replace(t, sensitivity={}) for tid, t in universe.tasks.items()})


def sample_episode(universe: Universe, task_id: str, rng: np.random.Generator) -> tuple[TaskInstance, EpisodeConfig]:
    t = universe.task(task_id)
    values = {a.name: float(rng.uniform(a.low, a.high)) if a.high > a.low else a.low for a in t.axes}
    config = EpisodeConfig(task_id, values, int(rng.integers(2**63 - 1)))
    return task_instance(universe, config), config


def scene_for(universe: Universe, config: EpisodeConfig) -> SceneFeatures:
    t = universe.task(config.task_id)
    offsets: dict[str, list[float]] = {o.name: [0.0, 0.0, 0.0] for o in t.objects}
    for a in t.axes:
        offsets[a.target_object][a.coord] += config.values.get(a.name, 0.0)
    objects = tuple(
        SceneObject(o.name, tuple(p + d for p, d in zip(o.position, offsets[o.name])), o.category) for o in t.objects
    )
    return SceneFeatures(objects=objects, camera_pose=CAMERA_POSE)


def task_instance(universe: Universe, config: EpisodeConfig) -> TaskInstance:
    t = universe.task(config.task_id)
    return TaskInstance(t.task_id, t.instruction, scene_for(universe, config), timestamp=0)


def nominal_config(universe: Universe, task_id: str) -> EpisodeConfig:
    t = universe.task(task_id)
    return EpisodeConfig(task_id, {a.name: (a.low + a.high) / 2.0 for a in t.axes}, 0)


def true_rate(universe: Universe, policy_id: str, config: EpisodeConfig) -> float:
    t = universe.task(config.task_id)
    rate = t.base_rates[policy_id]
    sens = t.sensitivity.get(policy_id, {})
    for a in t.axes:
        s = sens.get(a.name, 0.0)
        if s:
            rate += s * a.normalize(config.values.get(a.name, (a.low + a.high) / 2.0))
    return min(1.0, max(0.0, rate))


def oracle_best(universe: Universe, config: EpisodeConfig, pool: Sequence[str] | None = None) -> str:
    ids = sorted(pool if pool is not None else universe.policies)
    return min(ids, key=lambda p: (-true_rate(universe, p, config), p))


def expected_task_rate(universe: Universe, policy_id: str, task_id: str, grid: int = 201) -> float:
    """Mean of ``true_rate`` over the task's uniform axis distribution.

    Exact for sensitivity-free tasks; otherwise a midpoint grid over the
    axes the policy is sensitive to (one axis: 1-D rule, more: product grid
    truncated to 41 points per axis)."""
    t = universe.task(task_id)
    sens = t.sensitivity.get(policy_id, {})
    active = [a for a in t.axes if sens.get(a.name, 0.0) and a.high > a.low]
    if not active:
        return true_rate(universe, policy_id, nominal_config(universe, task_id))
    n = grid if len(active) == 1 else 41
    pts = [(np.arange(n) + 0.5) / n for _ in active]
    mesh = np.meshgrid(*pts, indexing="ij")
    base = dict(nominal_config(universe, task_id).values)
    total = 0.0
    count = 0
    for idx in np.ndindex(*mesh[0].shape):
        vals = dict(base)
        for a, m in zip(active, mesh):
            vals[a.name] = a.low + (a.high - a.low) * float(m[idx])
        total += true_rate(universe, policy_id, EpisodeConfig(task_id, vals, 0))
        count += 1
    return total / count


def stage_distribution(universe: Universe, policy_id: str, task_id: str) -> dict[Stage, float]:
    """Probability of each failure stage given that an episode fails."""
    explicit = universe.stage_weights.get(policy_id)
    if explicit:
        w = {s: float(explicit.get(s.value, 0.0)) for s in FAILURE_STAGES}
    elif universe.stage_preset == "competence":
        # weak policies fail early, strong ones late
        r = universe.task(task_id).base_rates[policy_id]
        w = {
            Stage.GRASP: (1 - r) ** 2,
            Stage.TRANSPORT: r * (1 - r),
            Stage.PLACEMENT: r**2,
            Stage.TIMEOUT: 0.05,
        }
    else:
        w = {s: 1.0 for s in FAILURE_STAGES}
    total = sum(w.values())
    if total <= 0:
        raise ProfileError(f"stage weights for {policy_id} sum to zero")
    return {s: v / total for s, v in w.items()}
