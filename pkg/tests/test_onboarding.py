from __future__ import annotations

import numpy as np
import pytest

from helpers import rep, task, unit
from policy_router.core import EpisodeTrace, Frame, PolicyDescriptor, PolicyKind
from policy_router.embedding import HashingEmbedder, extract_metadata
from policy_router.evaluator import Evaluator
from policy_router.onboarding import (
    DuplicatePolicyError,
    UnknownTaskError,
    cluster_points,
    cluster_tasks,
    default_k,
    evaluation_plan,
    kmeans,
    register_policy,
)
from policy_router.recorder import RouterContext
from policy_router.router import route
from policy_router.store import RecordStore

EMB = HashingEmbedder()


def _seen(n, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return [rep(unit(rng, d), task_id=f"task_{i:02d}") for i in range(n)]


def test_kmeans_hand_example():
    X = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], dtype=float)
    for seed in range(5):
        cl = cluster_points(X, ["1", "2", "3", "4"], 2, seed, normalize=False)
        assert [c.member_task_ids for c in cl] == [("1", "2"), ("3", "4")]
        # both members are 0.5 from the centroid (0, 0.5): lower id wins
        assert cl[0].medoid_task_id == "1" and cl[1].medoid_task_id == "3"
        assert cl[0].centroid == (0.0, 0.5)


def test_singletons_and_identical_points():
    reps = _seen(5)
    cl = cluster_tasks(reps, 5)
    assert sorted(c.member_task_ids for c in cl) == [(r.source_task_id,) for r in reps]
    assert all(c.medoid_task_id == c.member_task_ids[0] for c in cl)
    same = [rep([1.0, 0.0], task_id=t) for t in ("c", "a", "b")]
    [only] = cluster_tasks(same, 1)
    assert only.medoid_task_id == "a" and only.member_task_ids == ("a", "b", "c")


def test_cluster_errors():
    with pytest.raises(ValueError):
        cluster_tasks(_seen(3), 4)
    with pytest.raises(ValueError):
        cluster_tasks(_seen(3), 0)
    with pytest.raises(ValueError):
        cluster_tasks([], 1)


def test_kmeans_objective_non_increasing_and_terminates():
    rng = np.random.default_rng(0)
    for trial in range(50):
        X = rng.normal(size=(int(rng.integers(5, 60)), 4))
        k = int(rng.integers(1, min(8, X.shape[0]) + 1))
        res = kmeans(X, k, seed=trial)
        assert res.iterations <= 100
        assert all(b <= a + 1e-9 for a, b in zip(res.objective, res.objective[1:]))
        assert len(set(res.labels.tolist())) == k  # no empty cluster survives


def test_every_task_in_exactly_one_cluster():
    cl = cluster_tasks(_seen(20), 5, seed=3)
    members = [m for c in cl for m in c.member_task_ids]
    assert sorted(members) == [f"task_{i:02d}" for i in range(20)]
    assert all(c.medoid_task_id in c.member_task_ids for c in cl)
    assert all(np.linalg.norm(c.centroid) == pytest.approx(1.0) for c in cl)
    assert cluster_tasks(_seen(20), 5, seed=3) == cl  # deterministic


def test_plan_examples():
    seen = _seen(20)
    single = PolicyDescriptor("dp", PolicyKind.SINGLE_TASK, "task_03")
    plan = evaluation_plan(single, seen)
    assert [(e.task_id, e.n_trials) for e in plan.entries] == [("task_03", 10)]
    multi = evaluation_plan(PolicyDescriptor("m"), seen)
    assert default_k(20) == 5 and len(multi.entries) == 5 and multi.episodes == 50
    assert len(evaluation_plan(PolicyDescriptor("m"), seen[:1]).entries) == 1
    # cost is k * n_trials regardless of how many tasks were seen
    assert evaluation_plan(PolicyDescriptor("m"), _seen(200), k=5).episodes == 50
    with pytest.raises(UnknownTaskError):
        evaluation_plan(PolicyDescriptor("dp", PolicyKind.SINGLE_TASK, "lift_pot"), seen)
    with pytest.raises(ValueError):
        evaluation_plan(PolicyDescriptor("m"), seen, n_trials=0)


def _success_trace():
    f = (Frame(0.0, task().scene), Frame(4.0, task().scene))
    return EpisodeTrace(f, (False, False), True, 4.0)


def test_register_policy_end_to_end():
    t = task("lift the pot", "lift_pot")
    store = RecordStore(256, 0)
    pool = (PolicyDescriptor("old"),)
    results = [(t, _success_trace()) for _ in range(10)]
    ids = iter(range(100))
    out = register_policy(
        PolicyDescriptor("new", PolicyKind.SINGLE_TASK, "lift_pot"), results, Evaluator(), store, RouterContext(), pool,
        record_id=lambda: f"r{next(ids)}", clock=lambda: 1,
    )
    assert [p.policy_id for p in out.pool] == ["old", "new"] and pool == (PolicyDescriptor("old"),)
    [item] = out.context.items
    assert (item.policy_id, item.trials, item.successes) == ("new", 10, 10)
    assert store.count() == 10 and all(r.policy_id == "new" for r in out.records)
    d = route(task("lift the pot", "lift_pot"), store, out.context, out.pool)
    assert d.chosen_policy == "new"


def test_register_rejects_duplicates_and_empty_results():
    store = RecordStore(256, 0)
    pool = (PolicyDescriptor("A"),)
    with pytest.raises(DuplicatePolicyError):
        register_policy(PolicyDescriptor("A"), [(task(), _success_trace())], Evaluator(), store, RouterContext(), pool)
    with pytest.raises(ValueError):
        register_policy(PolicyDescriptor("B"), [], Evaluator(), store, RouterContext(), pool)
    assert store.count() == 0 and pool == (PolicyDescriptor("A"),)


def test_cluster_tasks_on_real_embeddings_groups_same_task():
    reps = []
    for name, obj in (("lift_pot", "pot"), ("lift_pan", "pan"), ("stack_cups", "cup")):
        for j in range(3):
            sc = task().scene.moved("cup", (0.01 * j, 0, 0)) if obj == "cup" else task().scene
            inst = f"{name.replace('_', ' ')} {obj}"
            reps.append(EMB.embed(inst, sc, extract_metadata(sc), f"{name}_{j}"))
    cl = cluster_tasks(reps, 3)
    groups = sorted(tuple(sorted({m.rsplit("_", 1)[0] for m in c.member_task_ids})) for c in cl)
    assert groups == [("lift_pan",), ("lift_pot",), ("stack_cups",)]
