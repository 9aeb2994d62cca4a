"""Training-free onboarding of new policies.

Seen tasks are clustered by representation; a multi-task policy is
evaluated on each cluster's medoid, a single-task policy on its training
task only. Executed trials are evaluated and recorded like any other
feedback, so routing considers the policy immediately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import EpisodeTrace, ExecutionRecord, PolicyDescriptor, PolicyKind, RoutingDecision, TaskInstance, TaskRepresentation
from .embedding import HashingEmbedder, extract_metadata
from .recorder import RouterContext, new_record_id, update_context, write_back
from .store import RecordStore

MAX_ITER = 100
TOL = 1e-6
DEFAULT_TRIALS = 10


class UnknownTaskError(KeyError):
    pass


class DuplicatePolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterAssignment:
    cluster_id: str
    member_task_ids: tuple[str, ...]
    centroid: tuple[float, ...]
    medoid_task_id: str


@dataclass(frozen=True)
class PlanEntry:
    task_id: str
    n_trials: int


@dataclass(frozen=True)
class EvaluationPlan:
    policy_id: str
    entries: tuple[PlanEntry, ...]
    clusters: tuple[ClusterAssignment, ...] = ()

    @property
    def episodes(self) -> int:
        return sum(e.n_trials for e in self.entries)


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objective: tuple[float, ...]  # after every update step
    iterations: int


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        d2 = _sq_dists(X, X[chosen]).min(axis=1)
        total = d2.sum()
        if total <= 0:
            rest = [i for i in range(n) if i not in chosen]
            chosen.append(int(rest[rng.integers(len(rest))]))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
    return X[chosen].copy()


def kmeans(X: np.ndarray, k: int, seed: int = 0, *, max_iter: int = MAX_ITER, tol: float = TOL) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding. Empty clusters are
    re-seeded from the point farthest from its assigned centroid."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if k <= 0:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)
    C = kmeans_pp_init(X, k, rng)
    history = []
    labels = np.zeros(n, dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, C)
        labels = d2.argmin(axis=1)
        for j in range(k):
            if not np.any(labels == j):
                own = d2[np.arange(n), labels]
                # only steal from clusters that keep at least one member
                counts = np.bincount(labels, minlength=k)
                own = np.where(counts[labels] > 1, own, -1.0)
                far = int(own.argmax())
                labels[far] = j
        newC = np.vstack([X[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.max(np.linalg.norm(newC - C, axis=1)))
        C = newC
        history.append(float(((X - C[labels]) ** 2).sum()))
        if shift <= tol:
            break
    return KMeansResult(labels, C, tuple(history), it)


def cluster_points(
    X: np.ndarray, ids: Sequence[str], k: int, seed: int = 0, *, normalize: bool = True
) -> list[ClusterAssignment]:
    X = np.asarray(X, dtype=float)
    if len(ids) != X.shape[0]:
        raise ValueError("one id per point is required")
    res = kmeans(X, k, seed)
    groups = [np.flatnonzero(res.labels == j) for j in range(k)]
    # Stable numbering: order clusters by their smallest member id.
    order = sorted(range(k), key=lambda j: min(ids[i] for i in groups[j]))
    out = []
    for n_, j in enumerate(order):
        members = groups[j]
        center = res.centroids[j]
        d = np.linalg.norm(X[members] - center, axis=1)
        best = d.min()
        medoid = min(ids[i] for i, di in zip(members, d) if di <= best + 1e-12)
        if normalize:
            norm = np.linalg.norm(center)
            center = center / norm if norm > 0 else center
        out.append(
            ClusterAssignment(
                cluster_id=f"cl-{n_:03d}",
                member_task_ids=tuple(sorted(ids[i] for i in members)),
                centroid=tuple(float(x) for x in center),
                medoid_task_id=medoid,
            )
        )
    return out


def cluster_tasks(reps: Sequence[TaskRepresentation], k: int, seed: int = 0) -> list[ClusterAssignment]:
    if not reps:
        raise ValueError("no tasks to cluster")
    ids = [r.source_task_id for r in reps]
    if len(set(ids)) != len(ids):
        raise ValueError("task ids must be unique")
    return cluster_points(np.asarray([r.vector for r in reps]), ids, k, seed)


def default_k(n_tasks: int) -> int:
    return max(1, math.ceil(math.sqrt(n_tasks)))


def evaluation_plan(
    policy: PolicyDescriptor,
    seen_tasks: Sequence[TaskRepresentation],
    k: int | None = None,
    n_trials: int = DEFAULT_TRIALS,
    seed: int = 0,
) -> EvaluationPlan:
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    ids = [r.source_task_id for r in seen_tasks]
    if policy.kind is PolicyKind.SINGLE_TASK:
        if policy.training_task_id not in ids:
            raise UnknownTaskError(policy.training_task_id)
        return EvaluationPlan(policy.policy_id, (PlanEntry(policy.training_task_id, n_trials),))
    if not seen_tasks:
        raise ValueError("no seen tasks to plan over")
    clusters = cluster_tasks(seen_tasks, default_k(len(seen_tasks)) if k is None else k, seed)
    entries = tuple(PlanEntry(c.medoid_task_id, n_trials) for c in clusters)
    return EvaluationPlan(policy.policy_id, entries, tuple(clusters))


@dataclass(frozen=True)
class OnboardingResult:
    pool: tuple[PolicyDescriptor, ...]
    context: RouterContext
    records: tuple[ExecutionRecord, ...]


def register_policy(
    policy: PolicyDescriptor,
    results: Sequence[tuple[TaskInstance, EpisodeTrace]],
    evaluator: Callable,
    store: RecordStore,
    ctx: RouterContext,
    pool: Sequence[PolicyDescriptor],
    *,
    embedder=None,
    episodes: Sequence[dict] | None = None,
    record_id: Callable[[], str] = new_record_id,
    clock: Callable[[], int] | None = None,
) -> OnboardingResult:
    """Evaluate executed plan trials, record them, and return the new pool.

    The returned pool is a fresh tuple; callers swap it in atomically.
    """
    if any(p.policy_id == policy.policy_id for p in pool):
        raise DuplicatePolicyError(policy.policy_id)
    if not results:
        raise ValueError("onboarding needs executed plan results")
    embedder = embedder or HashingEmbedder()
    decision = RoutingDecision(chosen_policy=policy.policy_id, scores={policy.policy_id: 0.0})
    records = []
    for i, (task, trace) in enumerate(results):
        rep = embedder.embed(task.instruction, task.scene, extract_metadata(task.scene), task.task_id)
        report = evaluator(task, trace)
        now = clock() if clock else None
        rec = write_back(
            rep,
            decision,
            report,
            store,
            record_id=record_id(),
            created_at=now,
            episode=episodes[i] if episodes else {"task_id": task.task_id, "onboarding": True},
        )
        ctx = update_context(ctx, rep, policy.policy_id, report, now=now)
        records.append(rec)
    return OnboardingResult(tuple(pool) + (policy,), ctx, tuple(records))
