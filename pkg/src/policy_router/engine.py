"""Routing engine: the inference pipeline plus the online feedback loop.

One :class:`Engine` owns the record store, the router context and the
policy pool. Routing reads immutable snapshots; all writes (feedback,
onboarding, review) go through one lock, so readers never wait on the
feedback path beyond taking a snapshot.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import queue
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Mapping, Sequence

from .core import (
    EpisodeTrace,
    EvaluationReport,
    ExecutionRecord,
    PolicyDescriptor,
    RoutingDecision,
    Stage,
    TaskInstance,
    TaskRepresentation,
    from_jsonable,
    to_jsonable,
    validate_pool,
)
from .embedding import EmbedderConfig, HashingEmbedder, extract_metadata
from .evaluator import DEFAULT_PROGRESS, Evaluator, ToolManifest
from .onboarding import DuplicatePolicyError, evaluation_plan, register_policy
from .recorder import (
    TAU_DUP,
    TAU_MATCH,
    ContextHolder,
    RouterContext,
    apply_review_delta,
    clusters_from_assignments,
    new_record_id,
    update_context,
    write_back,
)
from .rerank import DEFAULT_BETA, ReferenceReranker
from .router import EmptyPoolError, RouterParams, route_task
from .store import RecordStore

log = logging.getLogger(__name__)

ENV_OVERRIDES = {
    "ROUTER_PORT": "port",
    "ROUTER_STORE_PATH": "store_path",
    "ROUTER_CONTEXT_PATH": "context_path",
    "ROUTER_POOL_PATH": "pool_path",
}
HUMAN_FLAG = "human-review"


class UnknownPolicyError(KeyError):
    pass


class UnknownDecisionError(KeyError):
    pass


class QueueFull(RuntimeError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    router: RouterParams = field(default_factory=RouterParams)
    rerank_beta: float = DEFAULT_BETA
    tau_match: float = TAU_MATCH
    tau_dup: float = TAU_DUP
    dedup_every: int = 50
    store_path: str | None = None
    context_path: str | None = None
    pool_path: str | None = None
    manifest_path: str | None = None
    port: int = 8080
    feedback_mode: str = "inline"
    queue_size: int = 1024
    decision_cache: int = 10_000

    def __post_init__(self):
        if not 0 < self.port < 65536:
            raise ValueError(f"port {self.port} out of range")
        if self.feedback_mode not in ("inline", "background"):
            raise ValueError("feedback_mode must be 'inline' or 'background'")
        for name in ("tau_match", "tau_dup"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1]")
        if self.rerank_beta < 0:
            raise ValueError("rerank_beta must be >= 0")
        if self.queue_size < 1 or self.decision_cache < 1:
            raise ValueError("queue_size and decision_cache must be >= 1")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], env: Mapping[str, str] | None = None) -> EngineConfig:
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for var, key in ENV_OVERRIDES.items():
            value = (os.environ if env is None else env).get(var)
            if value:
                data[key] = int(value) if key == "port" else value
        if "embedder" in data:
            data["embedder"] = EmbedderConfig(**data["embedder"])
        if "router" in data:
            data["router"] = RouterParams(**data["router"])
        return cls(**data)

    @classmethod
    def load(cls, path: str | None, env: Mapping[str, str] | None = None) -> EngineConfig:
        if path is None:
            return cls.from_dict({}, env)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), env)


class FeedbackWorker:
    """Single consumer of a bounded FIFO queue of feedback jobs."""

    def __init__(self, handler: Callable[..., Any], maxsize: int = 1024):
        self._handler = handler
        self._queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self.processed = 0
        self.failed = 0
        self._thread = threading.Thread(target=self._run, name="feedback-worker", daemon=True)
        self._thread.start()

    def submit(self, *args, **kwargs) -> None:
        try:
            self._queue.put_nowait((args, kwargs))
        except queue.Full:
            raise QueueFull("feedback queue is full") from None

    @property
    def pending(self) -> int:
        return self._queue.unfinished_tasks

    def drain(self, timeout: float | None = None) -> bool:
        """Block until every submitted job has been handled."""
        if timeout is None:
            self._queue.join()
            return True
        deadline = time.monotonic() + timeout
        while self._queue.unfinished_tasks:
            if time.monotonic() > deadline:
                return False
            time.sleep(0.001)
        return True

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                self._queue.task_done()
                return
            args, kwargs = item
            try:
                self._handler(*args, **kwargs)
                self.processed += 1
            except Exception:
                self.failed += 1
                log.exception("feedback job failed")
            finally:
                self._queue.task_done()

    def stop(self) -> None:
        self._queue.put(None)
        self._thread.join()


def _wall_ms() -> int:
    return int(time.time() * 1000)


class Engine:
    """Store + context + pool, with routing, feedback, onboarding and review."""

    def __init__(
        self,
        config: EngineConfig | None = None,
        *,
        pool: Sequence[PolicyDescriptor] = (),
        store: RecordStore | None = None,
        context: RouterContext | None = None,
        evaluator: Callable[[TaskInstance, EpisodeTrace], EvaluationReport] | None = None,
        embedder=None,
        reranker=None,
        backend=None,
        clock: Callable[[], int] | None = None,
        record_ids: Callable[[], str] | None = None,
    ):
        self.config = config = config or EngineConfig()
        self.embedder = embedder or HashingEmbedder(config.embedder)
        self.reranker = reranker or ReferenceReranker(config.rerank_beta)
        self.backend = backend
        self.clock = clock or _wall_ms
        self.record_ids = record_ids or new_record_id
        if evaluator is None:
            manifest = ToolManifest.load(config.manifest_path) if config.manifest_path else ToolManifest()
            evaluator = Evaluator(manifest)
        self.evaluator = evaluator
        if store is None:
            if config.store_path:
                store = RecordStore.open(config.store_path, self.embedder.dim, config.embedder.hash_seed)
            else:
                store = RecordStore(self.embedder.dim, config.embedder.hash_seed)
        self.store = store
        if context is None and config.context_path and os.path.exists(config.context_path):
            with open(config.context_path, encoding="utf-8") as fh:
                context = RouterContext.from_json(fh.read())
        self.context = ContextHolder(context, tau_dup=config.tau_dup, dedup_every=config.dedup_every)
        if not pool and config.pool_path and os.path.exists(config.pool_path):
            pool = load_pool(config.pool_path)
        problems = validate_pool(pool)
        if problems:
            raise ValueError("; ".join(problems))
        self._pool = tuple(pool)
        self._write = threading.RLock()
        self._decisions: OrderedDict[str, tuple[TaskInstance, TaskRepresentation, RoutingDecision]] = OrderedDict()
        self._decision_seq = itertools.count(1)
        self._cache_lock = threading.Lock()
        self.tasks: dict[str, TaskInstance] = {}
        self.worker: FeedbackWorker | None = None
        if config.feedback_mode == "background":
            self.worker = FeedbackWorker(self.process_feedback, config.queue_size)

    # -- reads -------------------------------------------------------------

    @property
    def pool(self) -> tuple[PolicyDescriptor, ...]:
        return self._pool

    def policy(self, policy_id: str) -> PolicyDescriptor:
        for p in self._pool:
            if p.policy_id == policy_id:
                return p
        raise UnknownPolicyError(policy_id)

    def embed(self, task: TaskInstance) -> TaskRepresentation:
        return self.embedder.embed(task.instruction, task.scene, extract_metadata(task.scene), task.task_id)

    def route(self, task: TaskInstance) -> RoutingDecision:
        pool = self._pool
        if not pool:
            raise EmptyPoolError("policy pool is empty")
        rep, decision = route_task(
            task,
            self.store.snapshot(),
            self.context.current,
            pool,
            self.config.router,
            embedder=self.embedder,
            reranker=self.reranker,
            backend=self.backend,
        )
        decision = replace(decision, decision_id=f"D{next(self._decision_seq):08d}")
        with self._cache_lock:
            self._decisions[decision.decision_id] = (task, rep, decision)
            while len(self._decisions) > self.config.decision_cache:
                self._decisions.popitem(last=False)
            if task.task_id:
                self.tasks.setdefault(task.task_id, task)
        return decision

    def lookup_decision(self, decision_id: str) -> tuple[TaskInstance, TaskRepresentation, RoutingDecision]:
        with self._cache_lock:
            try:
                return self._decisions[decision_id]
            except KeyError:
                raise UnknownDecisionError(decision_id) from None

    # -- feedback ----------------------------------------------------------

    def process_feedback(
        self,
        policy_id: str,
        trace: EpisodeTrace,
        *,
        task: TaskInstance | None = None,
        decision_id: str | None = None,
        rep: TaskRepresentation | None = None,
        episode: Mapping | None = None,
    ) -> ExecutionRecord:
        """evaluate -> write_back -> update_context, synchronously."""
        self.policy(policy_id)
        if decision_id is not None:
            task, rep, _ = self.lookup_decision(decision_id)
        if task is None:
            raise ValueError("feedback needs a decision_id or a task")
        rep = rep or self.embed(task)
        report = self.evaluator(task, trace)
        decision = RoutingDecision(chosen_policy=policy_id, scores={policy_id: 0.0}, decision_id=decision_id or "")
        with self._write:
            now = self.clock()
            record = write_back(
                rep,
                decision,
                report,
                self.store,
                record_id=self.record_ids(),
                created_at=now,
                episode=dict(episode or {"task_id": task.task_id}),
            )
            self.context.mutate(
                lambda ctx: update_context(ctx, rep, policy_id, report, tau_match=self.config.tau_match, now=now)
            )
        if task.task_id:
            with self._cache_lock:
                self.tasks.setdefault(task.task_id, task)
        return record

    def submit_feedback(self, policy_id: str, trace: EpisodeTrace, **kwargs) -> ExecutionRecord | None:
        """Inline mode processes now; background mode queues and returns None."""
        self.policy(policy_id)
        if self.worker is None:
            return self.process_feedback(policy_id, trace, **kwargs)
        if kwargs.get("decision_id") is not None:
            self.lookup_decision(kwargs["decision_id"])
        self.worker.submit(policy_id, trace, **kwargs)
        return None

    def drain(self, timeout: float | None = None) -> bool:
        return True if self.worker is None else self.worker.drain(timeout)

    # -- onboarding --------------------------------------------------------

    def onboard(
        self,
        policy: PolicyDescriptor,
        execute: Callable[[str, TaskInstance, int], EpisodeTrace],
        *,
        seen_tasks: Sequence[TaskInstance] | None = None,
        instance_for: Callable[[str, int], TaskInstance] | None = None,
        episode_for: Callable[[str, int], Mapping] | None = None,
        k: int | None = None,
        n_trials: int = 10,
        seed: int = 0,
    ):
        """Plan, execute and record onboarding trials, then publish the
        enlarged pool in one assignment.

        ``execute(policy_id, task, trial)`` runs one trial; ``instance_for``
        picks the task instance for each trial (default: the seen instance).
        """
        if any(p.policy_id == policy.policy_id for p in self._pool):
            raise DuplicatePolicyError(policy.policy_id)
        seen = list(seen_tasks) if seen_tasks is not None else [self.tasks[t] for t in sorted(self.tasks)]
        by_id = {t.task_id: t for t in seen}
        reps = [self.embed(by_id[t]) for t in sorted(by_id)]
        plan = evaluation_plan(policy, reps, k=k, n_trials=n_trials, seed=seed)
        results = []
        episodes = []
        for entry in plan.entries:
            for j in range(entry.n_trials):
                inst = instance_for(entry.task_id, j) if instance_for else by_id[entry.task_id]
                results.append((inst, execute(policy.policy_id, inst, j)))
                episodes.append(
                    dict(episode_for(entry.task_id, j)) if episode_for else {"task_id": entry.task_id, "onboarding": True}
                )
        with self._write:
            ctx = self.context.current
            if plan.clusters and not ctx.clusters:
                ctx = replace(ctx, clusters=clusters_from_assignments(plan.clusters))
            result = register_policy(
                policy,
                results,
                self.evaluator,
                self.store,
                ctx,
                self._pool,
                embedder=self.embedder,
                episodes=episodes,
                record_id=self.record_ids,
                clock=self.clock,
            )
            self.context.set(result.context)
            self._pool = result.pool
            for t in seen:
                self.tasks.setdefault(t.task_id, t)
        return plan, result

    def add_policy(self, policy: PolicyDescriptor) -> None:
        """Register without onboarding trials (routing falls back to priors)."""
        with self._write:
            if any(p.policy_id == policy.policy_id for p in self._pool):
                raise DuplicatePolicyError(policy.policy_id)
            self._pool = self._pool + (policy,)

    # -- human review ------------------------------------------------------

    def review(self, record_id: str, *, summary: str | None = None, stage: Stage | str | None = None) -> ExecutionRecord:
        """Human override of a record's summary and/or failure stage.

        The store keeps the old version in its log; the context shifts
        successes and progress without touching trial counts.
        """
        if summary is None and stage is None:
            raise ValueError("nothing to review: pass a summary and/or a stage")
        with self._write:
            old = self.store.get(record_id)
            report = old.report
            if stage is not None:
                stage = Stage(stage)
                progress = self.evaluator.progress if isinstance(self.evaluator, Evaluator) else DEFAULT_PROGRESS
                report = replace(report, failure_stage=stage, success=stage is Stage.NONE, progress=progress[stage])
            if summary is not None:
                report = replace(report, summary=summary)
            flags = old.flags if HUMAN_FLAG in old.flags else old.flags + (HUMAN_FLAG,)
            new = self.store.revise(replace(old, report=report, flags=flags))
            now = self.clock()
            self.context.set(
                apply_review_delta(self.context.current, old.representation, old.policy_id, old.report, report, now=now)
            )
        return new

    # -- persistence -------------------------------------------------------

    def save(self) -> None:
        if self.config.context_path:
            self.context.save(self.config.context_path)
        if self.config.pool_path:
            save_pool(self.config.pool_path, self._pool)

    def close(self) -> None:
        if self.worker is not None:
            self.worker.drain()
            self.worker.stop()
            self.worker = None
        self.save()
        self.store.close()


def load_pool(path: str) -> tuple[PolicyDescriptor, ...]:
    with open(path, encoding="utf-8") as fh:
        return tuple(from_jsonable(PolicyDescriptor, p) for p in json.load(fh))


def save_pool(path: str, pool: Sequence[PolicyDescriptor]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump([to_jsonable(p) for p in pool], fh, indent=1)
    os.replace(tmp, path)
