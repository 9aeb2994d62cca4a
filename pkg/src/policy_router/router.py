"""Policy selection: estimate a success score for every pooled policy and
take the argmax.

The reference estimator is a retrieval-weighted, prior-smoothed success
rate. For policy p with reranked records i (weight w_i = rerank score,
s_i = 1 on success):

    S_p = (sum_i w_i * s_i + alpha * prior_p) / (sum_i w_i + alpha)

where prior_p is the mean progress of the context items of p in the
query's nearest cluster (``default_prior`` when there are none). This is a
reconstruction: an LLM router reasoning over the same evidence can be
plugged in through :class:`RouterBackend`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Iterable, Protocol, Sequence

import httpx

from .core import (
    PolicyDescriptor,
    RoutingDecision,
    TaskInstance,
    TaskRepresentation,
    from_jsonable,
    to_jsonable,
)
from .embedding import EmbedderConfig, HashingEmbedder, extract_metadata
from .recorder import RouterContext
from .rerank import ReferenceReranker, Reranker, RerankScore, rerank
from .store import RecordStore, RetrievalHit, StoreSnapshot

TIE_BREAK_RULE = "support-then-id"


class EmptyPoolError(ValueError):
    pass


@dataclass(frozen=True)
class RouterParams:
    k: int = 16
    alpha: float = 2.0
    default_prior: float = 0.5
    tie_break: str = TIE_BREAK_RULE
    # "progress" uses stage-aware mean progress as the prior; "binary"
    # uses the plain success rate of the same context items.
    prior_mode: str = "progress"
    # Retrieve k records per pooled policy instead of k overall.
    per_policy: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.default_prior <= 1.0:
            raise ValueError("default_prior must lie in [0, 1]")
        if self.prior_mode not in ("progress", "binary"):
            raise ValueError("prior_mode must be 'progress' or 'binary'")
        if self.tie_break != TIE_BREAK_RULE:
            raise ValueError(f"unknown tie_break rule {self.tie_break!r}")


Reranked = Sequence[tuple[RetrievalHit, RerankScore]]


def policy_priors(
    query: TaskRepresentation, context: RouterContext, pool: Iterable[PolicyDescriptor], params: RouterParams
) -> dict[str, float]:
    cluster = context.nearest_cluster(query.vector)
    binary = params.prior_mode == "binary"
    out = {}
    for p in pool:
        prior = context.policy_prior(p.policy_id, cluster, binary=binary) if cluster is not None else None
        out[p.policy_id] = params.default_prior if prior is None else prior
    return out


def estimate_scores(
    query: TaskRepresentation,
    reranked: Reranked,
    context: RouterContext,
    pool: Sequence[PolicyDescriptor],
    params: RouterParams = RouterParams(),
) -> dict[str, float]:
    if not pool:
        raise EmptyPoolError("policy pool is empty")
    priors = policy_priors(query, context, pool, params)
    num = {p.policy_id: 0.0 for p in pool}
    den = {p.policy_id: 0.0 for p in pool}
    for hit, score in reranked:
        pid = hit.record.policy_id
        if pid not in num:
            continue
        num[pid] += score.score * (1.0 if hit.record.report.success else 0.0)
        den[pid] += score.score
    scores = {}
    for pid in num:
        total = den[pid] + params.alpha
        s = (num[pid] + params.alpha * priors[pid]) / total if total > 0 else priors[pid]
        scores[pid] = min(1.0, max(0.0, s))
    return scores


def support_counts(reranked: Reranked) -> dict[str, int]:
    out: dict[str, int] = {}
    for hit, _ in reranked:
        out[hit.record.policy_id] = out.get(hit.record.policy_id, 0) + 1
    return out


def select_policy(
    scores: dict[str, float],
    pool: Sequence[PolicyDescriptor],
    reranked: Reranked = (),
    *,
    fallback: bool = False,
) -> RoutingDecision:
    """Argmax of ``scores``; ties go to the policy with more supporting
    records, then to the lexicographically smaller id."""
    if not pool:
        raise EmptyPoolError("policy pool is empty")
    support = support_counts(reranked)
    ids = [p.policy_id for p in pool]
    missing = [pid for pid in ids if pid not in scores]
    if missing:
        raise ValueError(f"scores missing for {missing}")
    chosen = min(ids, key=lambda pid: (-scores[pid], -support.get(pid, 0), pid))
    return RoutingDecision(
        chosen_policy=chosen,
        scores={pid: scores[pid] for pid in ids},
        evidence=tuple(hit.record.record_id for hit, _ in reranked),
        fallback=fallback,
    )


def retrieve(
    query: TaskRepresentation,
    snapshot: StoreSnapshot,
    pool: Sequence[PolicyDescriptor],
    params: RouterParams,
) -> list[RetrievalHit]:
    if params.per_policy:
        per = snapshot.top_k_per_policy(query, params.k, [p.policy_id for p in pool])
        hits = [h for p in pool for h in per[p.policy_id]]
        hits.sort(key=lambda h: (-h.similarity, h.record.created_at, h.record.record_id))
        return hits
    return snapshot.top_k(query, params.k)


class RouterBackend(Protocol):
    def decide(
        self,
        query: TaskRepresentation,
        reranked: Reranked,
        context: RouterContext,
        pool: Sequence[PolicyDescriptor],
    ) -> RoutingDecision: ...


class EstimatorBackend:
    def __init__(self, params: RouterParams = RouterParams()):
        self.params = params

    def decide(self, query, reranked, context, pool):
        scores = estimate_scores(query, reranked, context, pool, self.params)
        return select_policy(scores, pool, reranked)


class HttpRouterBackend:
    """POST {query, records[], context, pool} -> RoutingDecision JSON."""

    def __init__(self, url: str, client: httpx.Client | None = None):
        self.url = url
        self.client = client or httpx.Client(timeout=120.0)

    def decide(self, query, reranked, context, pool):
        body = {
            "query": to_jsonable(query),
            "records": [
                {"record": to_jsonable(h.record), "similarity": h.similarity, "rerank_score": s.score}
                for h, s in reranked
            ],
            "context": to_jsonable(context),
            "pool": to_jsonable(list(pool)),
        }
        resp = self.client.post(self.url, json=body)
        resp.raise_for_status()
        decision = from_jsonable(RoutingDecision, resp.json())
        if decision.chosen_policy not in {p.policy_id for p in pool}:
            raise ValueError(f"router backend chose unknown policy {decision.chosen_policy!r}")
        return decision


def route_task(
    task: TaskInstance,
    store: RecordStore | StoreSnapshot,
    context: RouterContext,
    pool: Sequence[PolicyDescriptor],
    params: RouterParams = RouterParams(),
    *,
    embedder=None,
    reranker: Reranker | None = None,
    backend: RouterBackend | None = None,
) -> tuple[TaskRepresentation, RoutingDecision]:
    """Full inference pipeline; returns the task representation alongside
    the decision so callers can write feedback against it."""
    if not pool:
        raise EmptyPoolError("policy pool is empty")
    t0 = time.perf_counter()
    embedder = embedder or HashingEmbedder(EmbedderConfig())
    meta = extract_metadata(task.scene)
    rep = embedder.embed(task.instruction, task.scene, meta, task.task_id)
    snapshot = store.snapshot() if isinstance(store, RecordStore) else store
    hits = retrieve(rep, snapshot, pool, params)
    reranked = rerank(rep, hits, reranker or ReferenceReranker())
    if backend is None:
        scores = estimate_scores(rep, reranked, context, pool, params)
        decision = select_policy(scores, pool, reranked, fallback=not hits)
    else:
        decision = backend.decide(rep, reranked, context, pool)
        if not hits:
            decision = replace(decision, fallback=True)
    latency = (time.perf_counter() - t0) * 1000.0
    return rep, replace(decision, routing_latency_ms=latency)


def route(task, store, context, pool, params: RouterParams = RouterParams(), **kwargs) -> RoutingDecision:
    return route_task(task, store, context, pool, params, **kwargs)[1]
