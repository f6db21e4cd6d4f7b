"""End-to-end acceptance criteria.

Each test records one PASS/FAIL line (printed and repeated in the terminal
summary). Numbers are also written to ``acceptance_results.json`` in the
repository root, or to ``$DYNSLEUTH_ACCEPTANCE_OUT``. Set ``DYNSLEUTH_JOBS``
to spread the work over several processes. Skip the whole module with
``-m "not acceptance"``.
"""
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from dynsleuth.baseline_attacks import RlSearchConfig, random_search, rl_search
from dynsleuth.env_families import GridEnv, builtin_candidate_set
from dynsleuth.ga_attack import (
    BlackBoxPolicy,
    FitnessConfig,
    FitnessEvaluator,
    GaConfig,
    MapSpace,
    enumerate_valid_maps,
    ga_attack,
    ga_search,
    recovery_rate,
)
from dynsleuth.gridworld import parse_map, random_map
from dynsleuth.shadow_inference import run_inference_experiment
from dynsleuth.trainers import grid_goal_rate, train_dqn, train_pg

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
OUT = Path(os.environ.get("DYNSLEUTH_ACCEPTANCE_OUT", ROOT / "acceptance_results.json"))
JOBS = max(1, int(os.environ.get("DYNSLEUTH_JOBS", os.cpu_count() or 1)))

BENCH_MAPS = 10
MAP_SEED = 2024
GOAL = 6  # top-right of 7x7
GA_SEEDS = range(8)
RL_MAPS = 3  # RL search is reported only, on the first maps of each kind

# thresholds
PG_RECOVERY = 0.85
DQN_RECOVERY = 0.78
GA_OVER_RANDOM = 0.10
EXHAUSTIVE_HITS = 18
EXHAUSTIVE_SECONDS = 120.0
POINTBOT6_ACC = 0.70
EXTREME_ACC = 1.0
SLIPGRID6_ACC = 0.60
INFERENCE_SECONDS = 45 * 60
GOAL_RATE = 0.95
CONVERGENCE_MAPS = 5


def _save(key, value):
    data = json.loads(OUT.read_text()) if OUT.exists() else {}
    data[key] = value
    OUT.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _pmap(fn, jobs):
    if JOBS > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(JOBS, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def bench_map(i):
    return random_map(7, 7, GOAL, 0.3, np.random.default_rng([MAP_SEED, i]))


def _attack_one_map(job):
    kind, i = job
    truth = bench_map(i)
    env = GridEnv(truth)
    t0 = time.perf_counter()
    policy = train_dqn(env, seed=i) if kind == "dqn" else train_pg(env, seed=i)
    out = {"kind": kind, "map": i, "train_seconds": time.perf_counter() - t0,
           "goal_rate": grid_goal_rate(policy, env)}
    target = BlackBoxPolicy(policy)
    fit = FitnessConfig.for_agent(kind)
    space = MapSpace.of(truth)
    truth_score = FitnessEvaluator(target, fit, space)(truth.cells)

    t0 = time.perf_counter()
    best, runs = ga_attack(target, GaConfig(), fit, space, seeds=GA_SEEDS, truth=truth)
    budget = int(sum(r.evaluations for r in runs))
    out.update(ga_recovery=recovery_rate(best.best_map, truth), ga_score=best.best_score,
               ga_seconds=time.perf_counter() - t0, budget=budget, truth_score=truth_score)

    rnd = random_search(target, fit, space, max_evaluations=budget, seed=i)
    out.update(random_recovery=recovery_rate(rnd.best_map, truth), random_score=rnd.best_score,
               random_seconds=rnd.seconds)

    if i < RL_MAPS:
        rl = rl_search(target, fit, space, RlSearchConfig(seed=i), max_evaluations=budget)
        out.update(rl_recovery=recovery_rate(rl.best_map, truth), rl_score=rl.best_score,
                   rl_seconds=rl.seconds, rl_evaluations=rl.evaluations)
    print(f"  {kind} map {i}: ga {out['ga_recovery']:.3f} random {out['random_recovery']:.3f}"
          f" budget {budget}", flush=True)
    return out


@pytest.fixture(scope="session")
def grid_bench():
    t0 = time.perf_counter()
    jobs = [(kind, i) for kind in ("pg", "dqn") for i in range(BENCH_MAPS)]
    rows = _pmap(_attack_one_map, jobs)
    _save("grid_benchmark", {"rows": rows, "seconds": time.perf_counter() - t0, "jobs": JOBS})
    return {kind: [r for r in rows if r["kind"] == kind] for kind in ("pg", "dqn")}


def _mean(rows, key):
    return float(np.mean([r[key] for r in rows if key in r]))


def test_criterion_1_ga_recovery_pg(grid_bench, criterion):
    rows = grid_bench["pg"]
    rec = _mean(rows, "ga_recovery")
    secs = sum(r["ga_seconds"] + r["train_seconds"] for r in rows)
    ok = criterion(1, "GA recovery on PG targets", rec >= PG_RECOVERY,
                   f"mean {rec:.4f} over {len(rows)} maps (need >= {PG_RECOVERY}); {secs:.0f} s")
    assert ok


def test_criterion_2_ga_recovery_dqn(grid_bench, criterion):
    rows = grid_bench["dqn"]
    rec = _mean(rows, "ga_recovery")
    secs = sum(r["ga_seconds"] + r["train_seconds"] for r in rows)
    ok = criterion(2, "GA recovery on DQN targets", rec >= DQN_RECOVERY,
                   f"mean {rec:.4f} over {len(rows)} maps (need >= {DQN_RECOVERY}); {secs:.0f} s")
    assert ok


def test_criterion_3_ga_beats_random(grid_bench, criterion):
    parts, ok = [], True
    for kind in ("pg", "dqn"):
        rows = grid_bench[kind]
        ga, rnd = _mean(rows, "ga_recovery"), _mean(rows, "random_recovery")
        ok &= ga - rnd >= GA_OVER_RANDOM
        rl_rows = [r for r in rows if "rl_recovery" in r]
        parts.append(f"{kind}: GA {ga:.4f} random {rnd:.4f} gap {100 * (ga - rnd):.2f} pts; "
                     f"RL {_mean(rl_rows, 'rl_recovery'):.4f} (GA {_mean(rl_rows, 'ga_recovery'):.4f}) "
                     f"on {len(rl_rows)} maps")
    criterion(3, "GA vs random at equal evaluation budgets", ok,
              f"need gap >= {100 * GA_OVER_RANDOM:.0f} pts; " + " | ".join(parts))
    assert ok


def test_criterion_4_exhaustive_3x3(criterion):
    truth = parse_map("..G\n.#.\n...")
    space = MapSpace.of(truth)
    maps = enumerate_valid_maps(space)
    hits, elapsed = {}, 0.0
    for kind, train in (("dqn", train_dqn), ("pg", train_pg)):
        target = BlackBoxPolicy(train(GridEnv(truth), seed=0))
        fit = FitnessConfig.for_agent(kind)
        t0 = time.perf_counter()
        ev = FitnessEvaluator(target, fit, space)
        global_max = max(ev(m.cells) for m in maps)
        hits[kind] = sum(
            ga_search(target, GaConfig(32, 8, 20, seed=s), fit, space).best_score == global_max
            for s in range(20)
        )
        elapsed += time.perf_counter() - t0
    ok = all(h >= EXHAUSTIVE_HITS for h in hits.values()) and elapsed < EXHAUSTIVE_SECONDS
    _save("exhaustive_3x3", {"hits": hits, "seconds": elapsed, "valid_maps": len(maps)})
    criterion(4, "GA reaches the brute-force optimum on 3x3", ok,
              f"hits {hits} of 20 (need >= {EXHAUSTIVE_HITS}) over {len(maps)} valid maps; "
              f"{elapsed:.1f} s (need < {EXHAUSTIVE_SECONDS:.0f})")
    assert ok


def test_criterion_5_candidate_inference(criterion):
    results, t0 = {}, time.perf_counter()
    for name in ("pointbot6", "pointbot_extreme", "slipgrid6"):
        report, _, _ = run_inference_experiment(builtin_candidate_set(name), m=32, train_seed_count=8, k=20,
                                                seed=0, jobs=JOBS)
        results[name] = report
    elapsed = time.perf_counter() - t0
    acc = {k: v["macro_accuracy"] for k, v in results.items()}
    ok = (acc["pointbot6"] >= POINTBOT6_ACC and acc["pointbot_extreme"] >= EXTREME_ACC
          and acc["slipgrid6"] >= SLIPGRID6_ACC and elapsed <= INFERENCE_SECONDS)
    _save("inference", {k: {kk: v[kk] for kk in ("labels", "per_candidate_accuracy", "macro_accuracy",
                                                 "confusion_matrix", "raw_features", "seconds")}
                        for k, v in results.items()})
    criterion(5, "candidate inference", ok,
              f"pointbot6 {acc['pointbot6']:.4f} (>= {POINTBOT6_ACC}), pointbot_extreme "
              f"{acc['pointbot_extreme']:.4f} (= 1), slipgrid6 {acc['slipgrid6']:.4f} (>= {SLIPGRID6_ACC}); "
              f"{elapsed / 60:.1f} min")
    assert ok


def test_criterion_6_trainer_convergence(grid_bench, criterion):
    rates = {kind: [r["goal_rate"] for r in grid_bench[kind] if r["map"] < CONVERGENCE_MAPS]
             for kind in ("dqn", "pg")}
    ok = all(rate >= GOAL_RATE for rs in rates.values() for rate in rs)
    criterion(6, "DQN and PG convergence", ok,
              "goal rates " + ", ".join(f"{k} {[round(x, 3) for x in v]}" for k, v in rates.items())
              + f" (need >= {GOAL_RATE} on {CONVERGENCE_MAPS} maps)")
    assert ok


PROPERTY_SUITES = [
    "tests/test_gridworld.py::test_lidar_matches_ray_march_on_20_maps",
    "tests/test_gridworld.py::test_validator_matches_brute_force_on_1000_grids",
    "tests/test_gridworld.py::test_vi_greedy_follows_bfs_shortest_paths",
    "tests/test_neuralnet.py::test_gradcheck_mse",
    "tests/test_neuralnet.py::test_gradcheck_cross_entropy",
    "tests/test_neuralnet.py::test_gradcheck_input",
    "tests/test_ga_attack.py::test_mutation_binomial_statistics",
    "tests/test_ga_attack.py::test_crossover_preserves_positions_10000_trials",
    "tests/test_ga_attack.py::test_ga_invariants_on_7x7",
    "tests/test_shadow_inference.py::test_svm_separable_blobs_perfect",
    "tests/test_shadow_inference.py::test_feature_layout_and_recomputation",
    "tests/test_shadow_inference.py::test_split_hygiene_detects_leaks",
    "tests/test_gridworld.py::test_round_trip_random_grids",
    "tests/test_gridworld.py::test_round_trip_generated_maps",
    "tests/test_neuralnet.py::test_policy_bytes_round_trip",
    "tests/test_neuralnet.py::test_policy_file_round_trip",
    "tests/test_shadow_inference.py::test_feature_table_round_trip",
    "tests/test_shadow_inference.py::test_model_round_trip",
    "tests/test_cli.py::test_report_file_round_trip_bit_exact",
]


def test_criterion_7_property_suites(criterion):
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_SUITES],
                          cwd=ROOT, capture_output=True, text=True)
    last = (proc.stdout.strip().splitlines() or ["no output"])[-1]
    ok = criterion(7, "property suites", proc.returncode == 0, f"{len(PROPERTY_SUITES)} suites: {last}")
    assert ok, proc.stdout[-3000:]
