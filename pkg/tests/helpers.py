from __future__ import annotations

import math

import numpy as np

from policy_router.core import (
    EvaluationReport,
    ExecutionRecord,
    SceneFeatures,
    SceneObject,
    Stage,
    TaskInstance,
    TaskMetadata,
    TaskRepresentation,
)
from policy_router.evaluator import DEFAULT_PROGRESS

CAMERA = (0.0, -0.45, 1.1, 0.9, 0.0, 0.0)


def scene(*objects, camera=CAMERA) -> SceneFeatures:
    """scene(("cup", (x, y, z), "container"), ...)"""
    objs = objects or (("cup", (0.1, 0.0, 0.75), "container"), ("plate", (0.3, 0.1, 0.75), "dish"))
    return SceneFeatures(tuple(SceneObject(n, tuple(map(float, p)), c) for n, p, c in objs), camera)


def empty_scene(camera=CAMERA) -> SceneFeatures:
    return SceneFeatures((), camera)


def task(instruction="put the cup on the plate", task_id="t0", sc=None) -> TaskInstance:
    return TaskInstance(task_id, instruction, sc or scene())


def unit(rng: np.random.Generator, d: int) -> tuple[float, ...]:
    v = rng.normal(size=d)
    return tuple(float(x) for x in v / np.linalg.norm(v))


def rep(vec, objects=(), task_id="") -> TaskRepresentation:
    v = np.asarray(vec, dtype=float)
    v = v / np.linalg.norm(v)
    objs = frozenset(objects)
    return TaskRepresentation(tuple(float(x) for x in v), TaskMetadata(objs, len(objs), frozenset()), task_id)


def report(success: bool, stage: Stage | None = None, summary: str = "") -> EvaluationReport:
    stage = Stage.NONE if success else (stage or Stage.GRASP)
    return EvaluationReport(success, 10.0, {"elapsed_s": 10.0}, stage, DEFAULT_PROGRESS[stage], summary)


def record(rid, representation, policy="A", success=True, created_at=0, stage=None) -> ExecutionRecord:
    return ExecutionRecord(rid, representation, policy, report(success, stage), created_at)


def angle_vec(d: int, theta: float) -> tuple[float, ...]:
    """Unit vector at angle ``theta`` from e0 inside the e0/e1 plane."""
    v = [0.0] * d
    v[0], v[1] = math.cos(theta), math.sin(theta)
    return tuple(v)


OBJECTS = (("cup", "container"), ("plate", "dish"), ("hammer", "tool"), ("block", "toy"), ("bottle", "container"))
VERBS = ("put", "lift", "place", "stack", "move")


def random_task(rng: np.random.Generator, task_id: str = "t") -> TaskInstance:
    n = int(rng.integers(1, 4))
    picks = rng.choice(len(OBJECTS), size=n, replace=False)
    objs = [(OBJECTS[i][0], tuple(rng.uniform(-0.3, 0.3, 2)) + (0.75,), OBJECTS[i][1]) for i in picks]
    words = [VERBS[int(rng.integers(len(VERBS)))], "the"] + [o[0] for o in objs]
    return TaskInstance(task_id, " ".join(words), scene(*objs))


def random_fixture(rng: np.random.Generator, embedder, *, max_records=200, max_policies=6):
    """(query task, records, context, pool) for brute-force comparisons."""
    from policy_router.core import PolicyDescriptor
    from policy_router.embedding import extract_metadata
    from policy_router.evaluator import DEFAULT_PROGRESS
    from policy_router.recorder import RouterContext, RouterContextItem

    def embed(t):
        return embedder.embed(t.instruction, t.scene, extract_metadata(t.scene), t.task_id)

    pool_ids = [f"P{i}" for i in range(int(rng.integers(1, max_policies + 1)))]
    bases = [random_task(rng, f"t{i}") for i in range(int(rng.integers(1, 6)))]
    records = []
    for i in range(int(rng.integers(0, max_records + 1))):
        t = bases[int(rng.integers(len(bases)))]
        if rng.random() < 0.5:
            t = random_task(rng, t.task_id)
        success = bool(rng.random() < 0.6)
        stage = Stage.NONE if success else list(Stage)[1 + int(rng.integers(4))]
        rpt = EvaluationReport(success, 5.0, {}, stage, DEFAULT_PROGRESS[stage], "")
        pid = pool_ids[int(rng.integers(len(pool_ids)))] if rng.random() < 0.95 else "ghost"
        records.append(ExecutionRecord(f"r{i:04d}", embed(t), pid, rpt, int(rng.integers(0, 50))))
    clusters = {}
    items = []
    if rng.random() < 0.8:
        for c, t in enumerate(bases):
            clusters[f"k{c}"] = embed(t).vector
        for j in range(int(rng.integers(0, 12))):
            trials = int(rng.integers(1, 11))
            cid = f"k{int(rng.integers(len(bases)))}"
            items.append(RouterContextItem(
                f"item-{j:06d}", pool_ids[int(rng.integers(len(pool_ids)))], cid, trials,
                int(rng.integers(0, trials + 1)), float(rng.uniform(0, 1)), "", clusters[cid], 0,
            ))
    ctx = RouterContext(tuple(items), 1, clusters, len(items) + 1)
    query = random_task(rng, "q")
    return query, records, ctx, [PolicyDescriptor(p) for p in pool_ids]


def random_context(rng: np.random.Generator, d: int = 4, max_items: int = 12):
    """Context whose centroids cluster tightly enough that merges happen."""
    from policy_router.recorder import RouterContext, RouterContextItem

    anchors = [unit(rng, d) for _ in range(int(rng.integers(1, 4)))]
    items = []
    for j in range(int(rng.integers(0, max_items + 1))):
        a = np.asarray(anchors[int(rng.integers(len(anchors)))])
        c = a + rng.normal(scale=float(rng.choice([0.0, 0.1, 0.4])), size=d)
        trials = int(rng.integers(1, 20))
        items.append(RouterContextItem(
            f"item-{j:06d}", "ABC"[int(rng.integers(3))], f"c{int(rng.integers(3))}", trials,
            int(rng.integers(0, trials + 1)), float(rng.uniform(0, 1)), f"n{j}" if rng.random() < 0.5 else "",
            tuple(float(x) for x in c / np.linalg.norm(c)), int(rng.integers(0, 100)),
        ))
    return RouterContext(tuple(items), int(rng.integers(0, 5)), {}, len(items) + 1)


def policy_totals(ctx) -> dict[str, tuple[int, int]]:
    out: dict[str, tuple[int, int]] = {}
    for it in ctx.items:
        t, s = out.get(it.policy_id, (0, 0))
        out[it.policy_id] = (t + it.trials, s + it.successes)
    return out
