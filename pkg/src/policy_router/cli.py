"""Command line: route | bench | onboard | review | dump-embeddings | serve.

Engine state (store, context, pool) lives at the paths named in the JSON
config given by ``--config``; ROUTER_* environment variables override
them. Exit status is 0 on success and 1 with a message on stderr
otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .core import PolicyDescriptor, PolicyKind, SceneFeatures, Stage, TaskInstance, from_jsonable, to_jsonable
from .engine import Engine, EngineConfig
from .evaluator import Evaluator
from .sim.benchmark import (
    BenchmarkConfig,
    SimHooks,
    build_engine,
    dump_embeddings,
    onboard_policy,
    rerun_episode,
    run_benchmark,
    write_report,
)
from .sim.traces import tool_manifest
from .sim.universe import make_universe, with_crossover


class CliError(Exception):
    pass


def _engine(args, universe=None) -> Engine:
    cfg = EngineConfig.load(args.config)
    evaluator = Evaluator(tool_manifest(universe)) if universe is not None else None
    return Engine(cfg, evaluator=evaluator)


def _universe(args):
    u = make_universe(args.profile, seed=getattr(args, "universe_seed", 0))
    if getattr(args, "crossover", 0.0):
        u = with_crossover(u, args.crossover)
    return u


def cmd_route(args) -> int:
    with open(args.scene, encoding="utf-8") as fh:
        scene = from_jsonable(SceneFeatures, json.load(fh), "$.scene")
    engine = _engine(args)
    try:
        decision = engine.route(TaskInstance(args.task_id, args.instruction, scene))
    finally:
        engine.close()
    print(json.dumps(to_jsonable(decision), indent=2))
    return 0


def _bench_config(args) -> BenchmarkConfig:
    return BenchmarkConfig(
        episodes_per_task=args.episodes,
        warmup_per_task=args.warmup,
        onboarding_trials=args.onboarding_trials,
        seed=args.seed,
        mode=args.mode,
        feedback=not args.no_feedback,
        router=args.router,
        single_policy=args.policy,
        k=args.k,
        alpha=args.alpha,
        prior_mode=args.prior_mode,
        text_only=args.text_only,
    )


def cmd_bench(args) -> int:
    universe = _universe(args)
    report = run_benchmark(universe, _bench_config(args))
    json_path, table_path = write_report(report, args.out)
    print(report.to_table())
    print(f"wrote {json_path} and {table_path}")
    return 0


def cmd_onboard(args) -> int:
    universe = _universe(args)
    policy_id = args.policy
    if policy_id not in universe.policies:
        raise CliError(f"profile has no policy {policy_id!r} to simulate")
    kind = PolicyKind(args.kind)
    if kind is PolicyKind.SINGLE_TASK and not args.training_task:
        raise CliError("single_task policies need --training-task")
    engine = _engine(args, universe)
    try:
        hooks = SimHooks(universe, args.trials, np.random.default_rng(args.seed))
        plan, _ = onboard_policy(
            engine, hooks, PolicyDescriptor(policy_id, kind, args.training_task), k=args.k, seed=args.seed
        )
    finally:
        engine.close()
    print(f"onboarded {policy_id}: {plan.episodes} episodes over {len(plan.entries)} task(s); pool size {len(engine.pool)}")
    return 0


def cmd_review(args) -> int:
    universe = _universe(args) if args.profile else None
    engine = _engine(args, universe)
    try:
        if args.rerun:
            if universe is None:
                raise CliError("--rerun needs --profile to simulate the episode")
            if not args.policy:
                raise CliError("--rerun needs --policy")
            rerun_episode(engine, universe, args.record_id, args.policy)
            engine.drain()
            print(f"re-ran {args.record_id} with {args.policy}")
        else:
            rec = engine.review(args.record_id, summary=args.summary, stage=args.stage)
            print(json.dumps(to_jsonable(rec.report), indent=2))
    finally:
        engine.close()
    return 0


def cmd_dump(args) -> int:
    if args.from_bench:
        universe = _universe(args)
        cfg = _bench_config(args)
        engine = build_engine(universe, cfg)
        run_benchmark(universe, cfg, engine=engine)
    else:
        engine = _engine(args)
    n = dump_embeddings(engine, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    universe = _universe(args) if args.profile else None
    engine = _engine(args, universe)
    hooks = SimHooks(universe, 10, np.random.default_rng(args.seed)) if universe is not None else None
    try:
        serve(engine, host=args.host, port=args.port, onboarding_hooks=hooks)
    finally:
        engine.close()
    return 0


def _add_bench_flags(p: argparse.ArgumentParser, profile_required: bool) -> None:
    p.add_argument("--profile", required=profile_required, default=None, help="universe profile JSON (default: bundled table)")
    p.add_argument("--episodes", type=int, default=100, help="evaluation episodes per task")
    p.add_argument("--warmup", type=int, default=10, help="warm-up feedback episodes per task")
    p.add_argument("--onboarding-trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--crossover", type=float, default=0.0, help="crossover sensitivity strength (0 = task-level profiles)")
    p.add_argument("--router", choices=["engine", "oracle", "task_oracle", "single"], default="engine")
    p.add_argument("--policy", default=None, help="policy for --router single")
    p.add_argument("--mode", choices=["deterministic", "concurrent"], default="deterministic")
    p.add_argument("--no-feedback", action="store_true")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--prior-mode", choices=["progress", "binary"], default="progress")
    p.add_argument("--text-only", action="store_true", help="embed the instruction only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policy-router", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="engine config JSON")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("route", help="route one task and print the decision")
    p.add_argument("--instruction", required=True)
    p.add_argument("--scene", required=True, help="SceneFeatures JSON file")
    p.add_argument("--task-id", default="")
    p.set_defaults(fn=cmd_route)

    p = sub.add_parser("bench", help="run the simulated benchmark and write report files")
    _add_bench_flags(p, profile_required=False)
    p.add_argument("--out", default="bench_report", help="output prefix for .json and .txt")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("onboard", help="onboard a simulated policy into the configured engine")
    p.add_argument("--policy", required=True)
    p.add_argument("--kind", choices=[k.value for k in PolicyKind], default="multi_task")
    p.add_argument("--training-task", default=None)
    p.add_argument("--profile", default=None)
    p.add_argument("--crossover", type=float, default=0.0)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--k", type=int, default=None, help="cluster count (default ceil(sqrt(#tasks)))")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_onboard)

    p = sub.add_parser("review", help="correct a stored report, or re-run its episode with another policy")
    p.add_argument("record_id")
    p.add_argument("--summary", default=None)
    p.add_argument("--stage", choices=[s.value for s in Stage], default=None)
    p.add_argument("--rerun", action="store_true")
    p.add_argument("--policy", default=None)
    p.add_argument("--profile", default=None)
    p.add_argument("--crossover", type=float, default=0.0)
    p.set_defaults(fn=cmd_review)

    p = sub.add_parser("dump-embeddings", help="write (task_id, chosen_policy, vector) rows as JSON lines")
    p.add_argument("--out", required=True)
    p.add_argument("--from-bench", action="store_true", help="dump a fresh benchmark run instead of the configured store")
    _add_bench_flags(p, profile_required=False)
    p.set_defaults(fn=cmd_dump)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--profile", default=None, help="simulate onboarding trials in this universe")
    p.add_argument("--crossover", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except (CliError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
