"""Write-back of execution outcomes and the itemized router context.

The context is a list of per-policy, per-neighborhood bullet items. An
update touches at most one item; near-duplicate items of the same policy
are merged periodically.
"""

from __future__ import annotations

import itertools
import os
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import (
    EvaluationReport,
    ExecutionRecord,
    RoutingDecision,
    TaskRepresentation,
    deserialize,
    serialize,
)
from .store import RecordStore

TAU_MATCH = 0.90
TAU_DUP = 0.92
NOTE_SEPARATOR = " | "


@dataclass(frozen=True)
class RouterContextItem:
    item_id: str
    policy_id: str
    cluster_id: str
    trials: int
    successes: int
    mean_progress: float
    note: str
    centroid: tuple[float, ...]
    updated_at: int

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0


@dataclass(frozen=True)
class RouterContext:
    items: tuple[RouterContextItem, ...] = ()
    version: int = 0
    # Onboarding cluster centroids by cluster id.
    clusters: dict[str, tuple[float, ...]] = field(default_factory=dict)
    next_item: int = 1

    def to_json(self) -> str:
        return serialize(self)

    @classmethod
    def from_json(cls, text: str | bytes) -> RouterContext:
        return deserialize(text, cls)

    def nearest_cluster(self, vector: Sequence[float]) -> str | None:
        """Cluster id whose centroid (or, lacking clusters, whose item) is
        most similar to ``vector``; ties by cluster id."""
        if self.clusters:
            ids = sorted(self.clusters)
            sims = np.asarray([self.clusters[c] for c in ids]) @ np.asarray(vector)
            return ids[int(np.argmax(sims))]
        if not self.items:
            return None
        sims = np.asarray([it.centroid for it in self.items]) @ np.asarray(vector)
        best = float(sims.max())
        return min(it.cluster_id for it, s in zip(self.items, sims) if s == best)

    def policy_prior(self, policy_id: str, cluster_id: str | None, binary: bool = False) -> float | None:
        """Trial-weighted mean progress (or success rate when ``binary``) of
        the policy's items in a cluster; ``None`` when there are none."""
        trials = 0
        total = 0.0
        for it in self.items:
            if it.policy_id == policy_id and it.cluster_id == cluster_id:
                trials += it.trials
                total += it.successes if binary else it.mean_progress * it.trials
        return total / trials if trials else None

    def export_bullets(self) -> str:
        lines = []
        for it in self.items:
            lines.append(
                f"- [{it.item_id}] {it.policy_id} @ {it.cluster_id}: "
                f"{it.successes}/{it.trials} succeeded, mean progress {it.mean_progress:.2f}"
                + (f"; {it.note}" if it.note else "")
            )
        return "\n".join(lines)


def _unit(v: np.ndarray) -> tuple[float, ...]:
    n = float(np.linalg.norm(v))
    return tuple(float(x) for x in (v / n if n > 0 else v))


def _now_ms() -> int:
    return int(time.time() * 1000)


_record_counter = itertools.count(1)


def new_record_id() -> str:
    return f"R{int(time.time() * 1000):x}-{next(_record_counter):06d}"


def write_back(
    rep: TaskRepresentation,
    decision: RoutingDecision,
    report: EvaluationReport,
    store: RecordStore,
    *,
    record_id: str | None = None,
    created_at: int | None = None,
    episode: Mapping | None = None,
) -> ExecutionRecord:
    record = ExecutionRecord(
        record_id=record_id or new_record_id(),
        representation=rep,
        policy_id=decision.chosen_policy,
        report=report,
        created_at=_now_ms() if created_at is None else created_at,
        episode=dict(episode or {}),
    )
    store.insert(record)
    return record


def update_context(
    ctx: RouterContext,
    rep: TaskRepresentation,
    policy_id: str,
    report: EvaluationReport,
    *,
    tau_match: float = TAU_MATCH,
    now: int | None = None,
) -> RouterContext:
    now = _now_ms() if now is None else now
    v = np.asarray(rep.vector, dtype=float)
    best_i, best_sim = None, tau_match
    for i, it in enumerate(ctx.items):
        if it.policy_id != policy_id:
            continue
        sim = float(np.dot(it.centroid, v))
        if sim >= best_sim:
            best_i, best_sim = i, sim
    items = list(ctx.items)
    if best_i is not None:
        it = items[best_i]
        trials = it.trials + 1
        items[best_i] = replace(
            it,
            trials=trials,
            successes=it.successes + int(report.success),
            mean_progress=(it.mean_progress * it.trials + report.progress) / trials,
            centroid=_unit(np.asarray(it.centroid) * it.trials + v),
            note=report.summary or it.note,
            updated_at=now,
        )
        return replace(ctx, items=tuple(items), version=ctx.version + 1)
    cluster = ctx.nearest_cluster(v) if ctx.clusters else None
    item = RouterContextItem(
        item_id=f"item-{ctx.next_item:06d}",
        policy_id=policy_id,
        cluster_id=cluster or f"c-{ctx.next_item:06d}",
        trials=1,
        successes=int(report.success),
        mean_progress=report.progress,
        note=report.summary,
        centroid=_unit(v),
        updated_at=now,
    )
    return replace(ctx, items=ctx.items + (item,), version=ctx.version + 1, next_item=ctx.next_item + 1)


def _merge(a: RouterContextItem, b: RouterContextItem) -> RouterContextItem:
    keep, other = (a, b) if a.item_id <= b.item_id else (b, a)
    trials = a.trials + b.trials
    centroid = np.asarray(a.centroid) * a.trials + np.asarray(b.centroid) * b.trials
    notes = [n for n in (keep.note, other.note) if n]
    return replace(
        keep,
        trials=trials,
        successes=a.successes + b.successes,
        mean_progress=(a.mean_progress * a.trials + b.mean_progress * b.trials) / trials if trials else 0.0,
        centroid=_unit(centroid),
        note=NOTE_SEPARATOR.join(notes),
        updated_at=max(a.updated_at, b.updated_at),
    )


def merge_duplicates(ctx: RouterContext, tau_dup: float = TAU_DUP) -> RouterContext:
    """Merge same-policy items whose centroids are within ``tau_dup`` until
    no such pair remains. Returns ``ctx`` itself when nothing merges."""
    items = list(ctx.items)
    merged_any = False
    changed = True
    while changed:
        changed = False
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                a, b = items[i], items[j]
                if a.policy_id != b.policy_id:
                    continue
                if float(np.dot(a.centroid, b.centroid)) >= tau_dup:
                    items[i] = _merge(a, b)
                    del items[j]
                    changed = merged_any = True
                    break
            if changed:
                break
    if not merged_any:
        return ctx
    return replace(ctx, items=tuple(items), version=ctx.version + 1)


def apply_review_delta(
    ctx: RouterContext,
    rep: TaskRepresentation,
    policy_id: str,
    old: EvaluationReport,
    new: EvaluationReport,
    *,
    now: int | None = None,
) -> RouterContext:
    """Re-interpret one counted trial: trial counts stay fixed, successes
    and mean progress shift by the difference between the two reports."""
    v = np.asarray(rep.vector, dtype=float)
    candidates = [(float(np.dot(it.centroid, v)), i) for i, it in enumerate(ctx.items) if it.policy_id == policy_id]
    if not candidates:
        return ctx
    _, i = max(candidates)
    it = ctx.items[i]
    successes = min(it.trials, max(0, it.successes + int(new.success) - int(old.success)))
    mp = it.mean_progress + (new.progress - old.progress) / it.trials
    items = list(ctx.items)
    items[i] = replace(
        it,
        successes=successes,
        mean_progress=min(1.0, max(0.0, mp)),
        note=new.summary or it.note,
        updated_at=_now_ms() if now is None else now,
    )
    return replace(ctx, items=tuple(items), version=ctx.version + 1)


class ContextHolder:
    """Single-writer cell for the current :class:`RouterContext`.

    Readers take :attr:`current` (an immutable value). Writers serialize
    through :meth:`mutate`; duplicate merging runs every ``dedup_every``
    updates.
    """

    def __init__(self, ctx: RouterContext | None = None, *, tau_dup: float = TAU_DUP, dedup_every: int = 50):
        self._ctx = ctx or RouterContext()
        self._lock = threading.Lock()
        self.tau_dup = tau_dup
        self.dedup_every = dedup_every
        self._since_dedup = 0

    @property
    def current(self) -> RouterContext:
        return self._ctx

    def mutate(self, fn: Callable[[RouterContext], RouterContext]) -> RouterContext:
        with self._lock:
            ctx = fn(self._ctx)
            self._since_dedup += 1
            if self.dedup_every and self._since_dedup >= self.dedup_every:
                ctx = merge_duplicates(ctx, self.tau_dup)
                self._since_dedup = 0
            self._ctx = ctx
            return ctx

    def set(self, ctx: RouterContext) -> None:
        with self._lock:
            self._ctx = ctx

    def save(self, path: str) -> None:
        with self._lock:
            self._ctx = merge_duplicates(self._ctx, self.tau_dup)
            text = self._ctx.to_json()
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str, **kwargs) -> ContextHolder:
        with open(path, encoding="utf-8") as fh:
            return cls(RouterContext.from_json(fh.read()), **kwargs)


def clusters_from_assignments(assignments: Iterable) -> dict[str, tuple[float, ...]]:
    return {a.cluster_id: tuple(a.centroid) for a in assignments}
