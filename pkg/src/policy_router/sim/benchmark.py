"""Benchmark runner: onboarding, warm-up and evaluation episodes through
a router, scored against the simulator's ground truth.

Every router sees the same episode stream (configs are drawn from the
benchmark seed before routing), and outcomes use common random numbers,
so two runs that differ only in the router differ only through routing.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from ..core import PolicyDescriptor, PolicyKind, RoutingDecision, TaskInstance, dumps
from ..embedding import EmbedderConfig
from ..engine import Engine, EngineConfig
from ..evaluator import Evaluator
from ..router import RouterParams
from .traces import execute_policy, tool_manifest
from .universe import (
    EpisodeConfig,
    Universe,
    expected_task_rate,
    nominal_config,
    oracle_best,
    sample_episode,
    task_instance,
    true_rate,
)

ROUTERS = ("engine", "oracle", "task_oracle", "single")
MODES = ("deterministic", "concurrent")
RATE_TOL = 1e-12


@dataclass(frozen=True)
class BenchmarkConfig:
    episodes_per_task: int = 100
    warmup_per_task: int = 10
    onboarding_trials: int = 10
    # None: one cluster per task
    onboarding_k: int | None = None
    seed: int = 7
    mode: str = "deterministic"
    feedback: bool = True
    router: str = "engine"
    single_policy: str | None = None
    k: int = 10
    alpha: float = 2.0
    prior_mode: str = "progress"
    text_only: bool = False
    tools_enabled: bool = True
    summary_enabled: bool = True

    def __post_init__(self):
        if self.router not in ROUTERS:
            raise ValueError(f"router must be one of {ROUTERS}")
        if self.router == "single" and not self.single_policy:
            raise ValueError("router 'single' needs single_policy")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.episodes_per_task < 1 or self.warmup_per_task < 0 or self.onboarding_trials < 1:
            raise ValueError("episode counts must be positive")


@dataclass(frozen=True)
class TaskResult:
    episodes: int
    success: float
    expected_success: float
    oracle_expected: float
    accuracy: float


@dataclass(frozen=True)
class BenchmarkReport:
    config: dict[str, Any]
    policies: tuple[str, ...]
    per_task: dict[str, TaskResult]
    # task -> policy -> task-level expected success (the profile row)
    profile: dict[str, dict[str, float]]
    avg_success: float
    avg_expected_success: float
    oracle_expected_success: float
    routing_accuracy: float
    regret: float
    selection_histogram: dict[str, int]
    episodes: int
    # timing is excluded from the deterministic payload
    mean_routing_latency_ms: float = 0.0
    median_routing_latency_ms: float = 0.0
    p99_routing_latency_ms: float = 0.0
    runtime_s: float = 0.0

    def payload(self, include_timing: bool = False) -> dict[str, Any]:
        data = asdict(self)
        if not include_timing:
            for key in ("mean_routing_latency_ms", "median_routing_latency_ms", "p99_routing_latency_ms", "runtime_s"):
                data.pop(key)
        return data

    def to_json(self, include_timing: bool = True) -> str:
        return dumps(self.payload(include_timing))

    def to_table(self) -> str:
        """Success rates (%) per task: profile columns, then the router."""
        cols = list(self.policies) + ["router"]
        width = max([len("Average")] + [len(t) for t in self.per_task]) + 2
        head = "Task".ljust(width) + "".join(c.rjust(9) for c in cols)
        lines = [head, "-" * len(head)]
        for tid, res in self.per_task.items():
            row = [self.profile[tid][p] * 100 for p in self.policies] + [res.success * 100]
            lines.append(tid.ljust(width) + "".join(f"{v:9.2f}" for v in row))
        n = len(self.per_task)
        avg = [sum(self.profile[t][p] for t in self.per_task) / n * 100 for p in self.policies]
        lines.append("-" * len(head))
        lines.append("Average".ljust(width) + "".join(f"{v:9.2f}" for v in avg + [self.avg_success * 100]))
        lines.append("")
        lines.append(f"routing accuracy {self.routing_accuracy * 100:.2f}%   expected success {self.avg_expected_success * 100:.2f}%   "
                     f"oracle {self.oracle_expected_success * 100:.2f}%   regret {self.regret * 100:.2f}")
        lines.append(f"mean routing latency {self.mean_routing_latency_ms:.3f} ms over {self.episodes} episodes")
        return "\n".join(lines)


def _episode_meta(config: EpisodeConfig, **extra) -> dict[str, Any]:
    return {"task_id": config.task_id, "values": dict(config.values), "seed": config.seed, **extra}


def episode_stream(universe: Universe, per_task: int, rng: np.random.Generator) -> list[EpisodeConfig]:
    """Round-robin over tasks so every task sees evidence accumulate evenly."""
    out = []
    for _ in range(per_task):
        for tid in universe.task_ids:
            out.append(sample_episode(universe, tid, rng)[1])
    return out


def build_engine(universe: Universe, cfg: BenchmarkConfig) -> Engine:
    emb = EmbedderConfig(use_scene=not cfg.text_only, use_metadata=not cfg.text_only)
    engine_cfg = EngineConfig(
        embedder=emb,
        router=RouterParams(k=cfg.k, alpha=cfg.alpha, prior_mode=cfg.prior_mode),
        feedback_mode="background" if cfg.mode == "concurrent" else "inline",
        queue_size=max(1024, len(universe.task_ids) * (cfg.episodes_per_task + cfg.warmup_per_task)),
    )
    evaluator = Evaluator(tool_manifest(universe), tools_enabled=cfg.tools_enabled, summary_enabled=cfg.summary_enabled)
    counter = iter(range(1, 1 << 62))
    ids = iter(range(1, 1 << 62))
    return Engine(
        engine_cfg,
        evaluator=evaluator,
        clock=lambda: next(counter),
        record_ids=lambda: f"R{next(ids):07d}",
    )


@dataclass
class SimHooks:
    """Executor callbacks that let :meth:`Engine.onboard` run trials in a
    universe. Trial j of a task uses the same config for every policy."""

    universe: Universe
    n_trials: int
    rng: np.random.Generator
    trials: dict[str, list[EpisodeConfig]] = field(default_factory=dict)

    def config(self, task_id: str, j: int) -> EpisodeConfig:
        if task_id not in self.trials:
            self.trials[task_id] = [sample_episode(self.universe, task_id, self.rng)[1] for _ in range(self.n_trials)]
        return self.trials[task_id][j]

    def execute(self, policy_id: str, inst: TaskInstance, j: int):
        return execute_policy(self.universe, policy_id, self.config(inst.task_id, j))

    def instance_for(self, task_id: str, j: int) -> TaskInstance:
        return task_instance(self.universe, self.config(task_id, j))

    def episode_for(self, task_id: str, j: int) -> dict[str, Any]:
        return _episode_meta(self.config(task_id, j), onboarding=True)

    def seen_tasks(self) -> list[TaskInstance]:
        return [task_instance(self.universe, nominal_config(self.universe, tid)) for tid in self.universe.task_ids]


def onboard_policy(
    engine: Engine, hooks: SimHooks, policy: PolicyDescriptor, *, k: int | None = None, seed: int = 0
):
    return engine.onboard(
        policy,
        hooks.execute,
        seen_tasks=hooks.seen_tasks(),
        instance_for=hooks.instance_for,
        episode_for=hooks.episode_for,
        k=k,
        n_trials=hooks.n_trials,
        seed=seed,
    )


def onboard_all(engine: Engine, universe: Universe, cfg: BenchmarkConfig, rng: np.random.Generator) -> None:
    """Onboard every universe policy on the same per-task trial configs."""
    hooks = SimHooks(universe, cfg.onboarding_trials, rng)
    for tid in universe.task_ids:
        hooks.config(tid, 0)
    k = cfg.onboarding_k or len(universe.task_ids)
    for pid in universe.policies:
        onboard_policy(engine, hooks, PolicyDescriptor(pid, PolicyKind.MULTI_TASK), k=k, seed=cfg.seed)


def _fixed_choice(universe: Universe, cfg: BenchmarkConfig):
    if cfg.router == "oracle":
        return lambda c: oracle_best(universe, c)
    if cfg.router == "single":
        if cfg.single_policy not in universe.policies:
            raise KeyError(f"unknown policy {cfg.single_policy!r}")
        return lambda c: cfg.single_policy
    # task-level oracle: best policy by expected success over the task's configs
    best = {}
    for tid in universe.task_ids:
        rates = {p: expected_task_rate(universe, p, tid) for p in universe.policies}
        best[tid] = min(universe.policies, key=lambda p: (-rates[p], p))
    return lambda c: best[c.task_id]


def _feedback(engine: Engine, universe: Universe, decision: RoutingDecision, config: EpisodeConfig) -> bool:
    trace = execute_policy(universe, decision.chosen_policy, config)
    engine.submit_feedback(
        decision.chosen_policy, trace, decision_id=decision.decision_id, episode=_episode_meta(config)
    )
    return trace.outcome


def run_benchmark(universe: Universe, cfg: BenchmarkConfig = BenchmarkConfig(), engine: Engine | None = None) -> BenchmarkReport:
    t_start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    onboarding_rng = np.random.default_rng([cfg.seed, 1])
    warmup = episode_stream(universe, cfg.warmup_per_task, np.random.default_rng([cfg.seed, 2]))
    evaluation = episode_stream(universe, cfg.episodes_per_task, rng)

    choose = None
    if cfg.router == "engine":
        engine = engine or build_engine(universe, cfg)
        onboard_all(engine, universe, cfg, onboarding_rng)
        for c in warmup:
            d = engine.route(task_instance(universe, c))
            if cfg.feedback:
                _feedback(engine, universe, d, c)
        engine.drain()
    else:
        choose = _fixed_choice(universe, cfg)

    stats = {tid: {"n": 0, "succ": 0, "exp": 0.0, "orc": 0.0, "hit": 0} for tid in universe.task_ids}
    hist = {p: 0 for p in universe.policies}
    latencies = []
    for c in evaluation:
        if choose is None:
            d = engine.route(task_instance(universe, c))
            latencies.append(d.routing_latency_ms)
            chosen = d.chosen_policy
        else:
            chosen = choose(c)
        best = oracle_best(universe, c)
        r_chosen = true_rate(universe, chosen, c)
        r_best = true_rate(universe, best, c)
        if choose is None and cfg.feedback:
            outcome = _feedback(engine, universe, d, c)
        else:
            outcome = execute_policy(universe, chosen, c).outcome
        s = stats[c.task_id]
        s["n"] += 1
        s["succ"] += int(outcome)
        s["exp"] += r_chosen
        s["orc"] += r_best
        # any policy tied with the oracle's rate counts as a correct choice
        s["hit"] += int(r_chosen >= r_best - RATE_TOL)
        hist[chosen] += 1
    if engine is not None:
        engine.drain()

    per_task = {
        tid: TaskResult(s["n"], s["succ"] / s["n"], s["exp"] / s["n"], s["orc"] / s["n"], s["hit"] / s["n"])
        for tid, s in stats.items()
    }
    n = len(evaluation)
    total = {key: sum(s[key] for s in stats.values()) for key in ("succ", "exp", "orc", "hit")}
    profile = {tid: {p: expected_task_rate(universe, p, tid) for p in universe.policies} for tid in universe.task_ids}
    cfg_dict = asdict(cfg)
    return BenchmarkReport(
        config=cfg_dict,
        policies=universe.policies,
        per_task=per_task,
        profile=profile,
        avg_success=total["succ"] / n,
        avg_expected_success=total["exp"] / n,
        oracle_expected_success=total["orc"] / n,
        routing_accuracy=total["hit"] / n,
        regret=(total["orc"] - total["exp"]) / n,
        selection_histogram=hist,
        episodes=n,
        mean_routing_latency_ms=statistics.fmean(latencies) if latencies else 0.0,
        median_routing_latency_ms=statistics.median(latencies) if latencies else 0.0,
        p99_routing_latency_ms=float(np.percentile(latencies, 99)) if latencies else 0.0,
        runtime_s=time.perf_counter() - t_start,
    )


def write_report(report: BenchmarkReport, prefix: str) -> tuple[str, str]:
    json_path, table_path = prefix + ".json", prefix + ".txt"
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_table() + "\n")
    return json_path, table_path


def dump_embeddings(engine: Engine, path: str) -> int:
    """Write one JSON row (task_id, chosen_policy, vector) per stored record."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in engine.store.records():
            task_id = rec.episode.get("task_id", rec.representation.source_task_id)
            row = {"task_id": task_id, "chosen_policy": rec.policy_id, "vector": list(rec.representation.vector)}
            fh.write(json.dumps(row) + "\n")
            n += 1
    return n


def rerun_episode(engine: Engine, universe: Universe, record_id: str, policy_id: str) -> None:
    """Queue a comparison episode: the configuration of ``record_id`` run
    with ``policy_id``, fed back like any other episode."""
    rec = engine.store.get(record_id)
    engine.policy(policy_id)
    ep = rec.episode
    if "task_id" not in ep or "seed" not in ep:
        raise ValueError(f"record {record_id} has no simulator episode to re-run")
    config = EpisodeConfig(ep["task_id"], {k: float(v) for k, v in ep.get("values", {}).items()}, int(ep["seed"]))
    task = task_instance(universe, config)
    trace = execute_policy(universe, policy_id, config)
    engine.submit_feedback(policy_id, trace, task=task, episode=_episode_meta(config, rerun_of=record_id))


def config_with(cfg: BenchmarkConfig, **changes: Any) -> BenchmarkConfig:
    return replace(cfg, **changes)


def load_config(data: Mapping[str, Any]) -> BenchmarkConfig:
    return BenchmarkConfig(**data)
