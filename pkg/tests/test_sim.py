from __future__ import annotations

import json

import numpy as np
import pytest

from policy_router.core import Stage, validate
from policy_router.embedding import HashingEmbedder, cosine, extract_metadata
from policy_router.evaluator import Evaluator
from policy_router.sim.benchmark import (
    BenchmarkConfig,
    config_with,
    episode_stream,
    load_config,
    run_benchmark,
    write_report,
)
from policy_router.sim.traces import execute_policy, tool_manifest
from policy_router.sim.universe import (
    EpisodeConfig,
    ProfileError,
    expected_task_rate,
    make_universe,
    nominal_config,
    oracle_best,
    sample_episode,
    stage_distribution,
    task_instance,
    true_rate,
    with_crossover,
    without_sensitivity,
)

SMALL = BenchmarkConfig(episodes_per_task=3, warmup_per_task=1, onboarding_trials=3)


def _one_task(rates, **extra):
    entry = {"task_id": "t", "base_rates": rates, **extra}
    return make_universe({"tasks": [entry]})


def test_table1_profile():
    u = make_universe()
    assert len(u.task_ids) == 20 and u.policies == ("act", "dp", "dp3", "rdt", "pi0", "cap")
    assert u.task("adjust_bottle").base_rates["act"] == 0.98
    means = {p: np.mean([u.task(t).base_rates[p] for t in u.task_ids]) for p in u.policies}
    assert max(means.values()) == pytest.approx(0.7645)
    assert np.mean([max(u.task(t).base_rates.values()) for t in u.task_ids]) == pytest.approx(0.789)


def test_profile_errors(tmp_path):
    with pytest.raises(ProfileError):
        make_universe({"tasks": []})
    with pytest.raises(ProfileError):
        make_universe({"tasks": [{"task_id": "t", "base_rates": {"A": 1.5}}]})
    with pytest.raises(ProfileError):
        make_universe({"policies": ["A", "B"], "tasks": [{"task_id": "t", "base_rates": {"A": 0.5}}]})
    with pytest.raises(ProfileError):
        make_universe({"tasks": [{"task_id": "t", "base_rates": {"A": 0.5}}] * 2})
    with pytest.raises(ProfileError):
        _one_task({"A": 0.5}, axes=[{"name": "x", "low": 1, "high": 0}])
    with pytest.raises(ProfileError):
        make_universe({"tasks": [{"task_id": "t", "base_rates": {"A": 0.5}}]}, {"stage_preset": "chaos"})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ProfileError):
        make_universe(str(bad))


def test_rate_one_always_succeeds_and_zero_always_fails():
    for rate, want in ((1.0, True), (0.0, False)):
        u = _one_task({"A": rate})
        rng = np.random.default_rng(0)
        ev = Evaluator(tool_manifest(u))
        stages = set()
        for _ in range(40):
            inst, cfg = sample_episode(u, "t", rng)
            trace = execute_policy(u, "A", cfg)
            rep = ev(inst, trace)
            assert trace.outcome is want and rep.success is want
            stages.add(rep.failure_stage)
        assert stages == ({Stage.NONE} if want else {Stage.GRASP, Stage.TRANSPORT, Stage.PLACEMENT, Stage.TIMEOUT})


def test_sampled_episodes_differ_and_are_reproducible():
    u = make_universe()
    rng = np.random.default_rng(1)
    a, _ = sample_episode(u, "lift_pot", rng)
    b, _ = sample_episode(u, "lift_pot", rng)
    assert a.scene != b.scene
    emb = HashingEmbedder()
    za, zb = (emb.embed(t.instruction, t.scene, extract_metadata(t.scene)).vector for t in (a, b))
    assert cosine(za, zb) < 1.0
    s1 = [c for c in episode_stream(u, 2, np.random.default_rng(5))]
    s2 = [c for c in episode_stream(u, 2, np.random.default_rng(5))]
    assert s1 == s2 and len(s1) == 40


def test_zero_width_axes_give_identical_configs():
    u = _one_task({"A": 0.5}, axes=[{"name": "obj_x", "low": 0.0, "high": 0.0}])
    rng = np.random.default_rng(0)
    a, ca = sample_episode(u, "t", rng)
    b, cb = sample_episode(u, "t", rng)
    assert ca.values == cb.values and a.scene == b.scene


def test_true_rate_examples():
    u = _one_task({"A": 0.5, "B": 0.9}, sensitivity={"A": {"obj_x": 0.3}, "B": {"obj_x": 0.3}})
    lo, hi = u.task("t").axes[0].low, u.task("t").axes[0].high
    at = lambda x: EpisodeConfig("t", {"obj_x": x, "obj_y": 0.0}, 0)
    assert true_rate(u, "A", at(hi)) == pytest.approx(0.8)
    assert true_rate(u, "A", at(lo)) == pytest.approx(0.2)
    assert true_rate(u, "B", at(hi)) == 1.0  # clamped
    flat = without_sensitivity(u)
    assert true_rate(flat, "A", at(hi)) == 0.5


def test_oracle_examples():
    u = _one_task({"A": 0.9, "B": 0.3})
    assert oracle_best(u, nominal_config(u, "t")) == "A"
    tied = _one_task({"B": 0.5, "A": 0.5})
    assert oracle_best(tied, nominal_config(tied, "t")) == "A"
    cross = with_crossover(_one_task({"A": 0.6, "B": 0.5}), 0.2)
    hi = cross.task("t").axes[0].high
    assert oracle_best(cross, nominal_config(cross, "t")) == "A"
    assert oracle_best(cross, EpisodeConfig("t", {"obj_x": hi, "obj_y": 0.0}, 0)) == "B"


def test_expected_task_rate_integrates_axes():
    u = with_crossover(_one_task({"A": 0.95, "B": 0.5}), 0.2)
    # A's rate is 0.95 - 0.2 x on x in [-1, 1], clamped at 1 for x < -0.25
    want = (0.75 * 1.0 + (1.0 + 0.75) / 2 * 1.25) / 2
    assert expected_task_rate(u, "A", "t") == pytest.approx(want, abs=1e-4)
    assert expected_task_rate(u, "B", "t") == pytest.approx(0.5, abs=1e-9)


def test_empirical_rate_within_binomial_bound():
    u = _one_task({"A": 0.7})
    rng = np.random.default_rng(11)
    wins = sum(execute_policy(u, "A", sample_episode(u, "t", rng)[1]).outcome for _ in range(10_000))
    assert abs(wins / 10_000 - 0.7) <= 0.015


def test_common_random_numbers_couple_policies():
    u = _one_task({"A": 0.4, "B": 0.8})
    rng = np.random.default_rng(3)
    for _ in range(300):
        cfg = sample_episode(u, "t", rng)[1]
        # the weaker policy never succeeds where the stronger one fails
        assert execute_policy(u, "A", cfg).outcome <= execute_policy(u, "B", cfg).outcome


def test_forced_stage_and_stage_distribution():
    u = make_universe()
    cfg = nominal_config(u, "beat_block_hammer")
    trace = execute_policy(u, "dp", cfg, force_stage=Stage.GRASP)
    rep = Evaluator(tool_manifest(u))(task_instance(u, cfg), trace)
    assert rep.failure_stage is Stage.GRASP and validate(trace) == []
    d = stage_distribution(u, "cap", "beat_block_hammer")
    assert sum(d.values()) == pytest.approx(1.0)
    weak = stage_distribution(u, "cap", "beat_block_hammer")
    strong = stage_distribution(u, "act", "adjust_bottle")
    assert weak[Stage.GRASP] > strong[Stage.GRASP] and weak[Stage.PLACEMENT] < strong[Stage.PLACEMENT]
    explicit = make_universe(None, {"stage_weights": {"act": {"transport": 1}}})
    assert stage_distribution(explicit, "act", "adjust_bottle")[Stage.TRANSPORT] == 1.0
    with pytest.raises(KeyError):
        execute_policy(u, "nobody", cfg)


def test_pool_of_one_has_full_accuracy():
    u = make_universe({"tasks": [{"task_id": "a", "base_rates": {"X": 0.4}}, {"task_id": "b", "base_rates": {"X": 0.9}}]})
    r = run_benchmark(u, SMALL)
    assert r.routing_accuracy == 1.0 and r.selection_histogram == {"X": 6} and r.regret == 0.0


def test_benchmark_is_bit_identical_for_fixed_seed():
    u = with_crossover(make_universe(), 0.2)
    a = run_benchmark(u, SMALL)
    b = run_benchmark(u, SMALL)
    assert json.dumps(a.payload(), sort_keys=True) == json.dumps(b.payload(), sort_keys=True)
    c = run_benchmark(u, config_with(SMALL, seed=8))
    assert c.payload() != a.payload()


def test_regret_non_negative_for_every_router():
    u = with_crossover(make_universe(), 0.2)
    for router, extra in (("engine", {}), ("oracle", {}), ("task_oracle", {}), ("single", {"single_policy": "rdt"})):
        r = run_benchmark(u, config_with(SMALL, router=router, **extra))
        assert r.regret >= -1e-12 and r.avg_expected_success <= r.oracle_expected_success + 1e-12
        assert sum(r.selection_histogram.values()) == r.episodes == 60
    oracle = run_benchmark(u, config_with(SMALL, router="oracle"))
    assert oracle.routing_accuracy == 1.0 and oracle.regret == 0.0


def test_concurrent_mode_runs_to_completion():
    u = make_universe()
    r = run_benchmark(u, config_with(SMALL, mode="concurrent"))
    assert r.episodes == 60 and 0.0 <= r.routing_accuracy <= 1.0


def test_report_outputs(tmp_path):
    u = make_universe()
    r = run_benchmark(u, config_with(SMALL, router="oracle"))
    json_path, table_path = write_report(r, str(tmp_path / "rep"))
    data = json.loads(open(json_path).read())
    assert data["episodes"] == 60 and "runtime_s" in data and "runtime_s" not in r.payload()
    table = open(table_path).read().splitlines()
    assert table[0].split() == ["Task", "act", "dp", "dp3", "rdt", "pi0", "cap", "router"]
    avg = next(line for line in table if line.startswith("Average")).split()
    assert avg[1:7] == ["55.90", "51.05", "76.45", "60.35", "69.90", "54.45"]


def test_benchmark_config_validation():
    with pytest.raises(ValueError):
        BenchmarkConfig(router="coin")
    with pytest.raises(ValueError):
        BenchmarkConfig(router="single")
    with pytest.raises(ValueError):
        BenchmarkConfig(mode="fast")
    with pytest.raises(ValueError):
        BenchmarkConfig(episodes_per_task=0)
    assert load_config({"seed": 3}).seed == 3
