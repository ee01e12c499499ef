"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one PASS/FAIL line; the lines are repeated in the
terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from helpers import FIXTURES, gt, load_near_duplicate, pred, record_criterion
from oracles import mc_riou
from rotal.cli import main
from rotal.diversity import PrototypeStore, init_prototypes, inter_class_diversity
from rotal.geometry import RotatedBox, angular_deviation, riou
from rotal.observation import (
    AbilityVector,
    InstancePrediction,
    ability_vector,
    average_precision,
    final_score,
    mso_weights,
)
from rotal.selector import greedy_select, score_candidate
from rotal.serialization import write_json
from rotal.simulator import SimConfig, run_experiment
from rotal.uncertainty import classification_uncertainty

SEEDS = [0, 1, 2, 3, 4]
PI = math.pi


def random_box(rng, near=None):
    w, h = math.exp(rng.uniform(0, 2.5)), math.exp(rng.uniform(0, 2.5))
    if near is None:
        cx, cy = rng.uniform(-100, 100, 2)
    else:
        scale = 0.5 * (near.w + near.h)
        cx, cy = near.cx + rng.normal(0, 0.3 * scale), near.cy + rng.normal(0, 0.3 * scale)
    return RotatedBox(cx, cy, w, h, rng.uniform(-PI / 2, PI / 2))


@pytest.fixture(scope="module")
def experiment():
    start = time.perf_counter()
    cfg = SimConfig()
    reports = {s: run_experiment(s, SEEDS, cfg) for s in ("active", "random")}
    return reports, time.perf_counter() - start


def test_riou_matches_monte_carlo():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, overlapping = 0.0, 0
    for _ in range(1000):
        a = random_box(rng)
        b = random_box(rng, near=a)
        got = riou(a, b)
        overlapping += got > 0
        worst = max(worst, abs(got - mc_riou(a.to_list(), b.to_list())))
    elapsed = time.perf_counter() - start
    ok = worst <= 5e-3 and elapsed < 60
    record_criterion("RIoU vs Monte-Carlo (1000 pairs, 1e6 samples)", ok,
                     f"max |diff| = {worst:.2e} (tol 5e-3), {overlapping} overlapping, {elapsed:.1f}s (limit 60s)")
    assert ok


def test_elongated_rotation_claim():
    rng = np.random.default_rng(14)
    values = []
    for _ in range(100):
        h = math.exp(rng.uniform(0, 3))
        b = RotatedBox(*rng.uniform(0, 1000, 2), 5 * h, h, rng.uniform(-PI / 2, PI / 2))
        values.append(riou(b, RotatedBox(b.cx, b.cy, b.w, b.h, b.theta + math.radians(14))))
    ok = min(values) > 0.5
    record_criterion("5:1 boxes rotated 14 degrees keep RIoU > 0.5", ok,
                     f"{sum(v > 0.5 for v in values)}/100 pass, min {min(values):.6f}")
    assert ok


def test_edge_swap_and_boundary():
    rng = np.random.default_rng(90)
    worst = 0.0
    for _ in range(10_000):
        b = random_box(rng)
        worst = max(worst, angular_deviation(b, b.swap90()))
    boundary = angular_deviation(RotatedBox(0, 0, 4, 2, -PI / 2 + 0.01), RotatedBox(0, 0, 4, 2, PI / 2 - 0.01))
    ok = worst <= 1e-9 and abs(boundary - 0.02) <= 1e-9
    record_criterion("edge-swap invariance and angle boundary", ok,
                     f"max swap deviation {worst:.1e} (tol 1e-9), boundary {boundary:.12f} (want 0.02)")
    assert ok


def test_formula_fixtures():
    checks = {}
    checks["entropy uniform C=15"] = abs(classification_uncertainty(np.full(15, 1 / 15)) - 2.70805) <= 1e-5
    checks["inter n=0"] = abs(inter_class_diversity(0, 0.01) - 0.731059) <= 1e-6
    checks["inter n=100"] = abs(inter_class_diversity(100, 0.01) - 0.5) <= 1e-12
    store = init_prototypes([(0, [1.0, 0.0])], 2, alpha=0.9)
    store.update(0, [0.0, 1.0])
    checks["EMA step"] = np.max(np.abs(store.prototype(0) - [0.9, 0.1])) <= 1e-12
    rng = np.random.default_rng(12)
    checks["weights sum"] = all(abs(math.fsum(mso_weights(AbilityVector(*a))) - 1) <= 1e-12 for a in rng.random((1000, 4)))
    w = mso_weights(AbilityVector(1.0, 0.0, 0.5, 0.5))
    checks["weights derived"] = np.max(np.abs(np.subtract(w, (0.1425, 0.3875, 0.2350, 0.2350)))) <= 1e-4
    s_values = rng.random(1000)
    checks["final identity"] = all(abs(final_score(s, 1.0) - s) <= 1e-12 for s in s_values)
    checks["final reflection"] = all(abs(final_score(s, 0.0) - (1 - s)) <= 1e-12 for s in s_values)
    checks["final constancy"] = all(abs(final_score(s, 0.5) - 0.5) <= 1e-12 for s in s_values)
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion("formula fixtures", ok, f"{sum(checks.values())}/{len(checks)} hold" + (f", failed {failed}" if failed else ""))
    assert ok


def test_ranking_regimes():
    rng = np.random.default_rng(13)
    store = PrototypeStore(6)
    for c in range(6):
        store.prototypes[c] = rng.normal(0, 1, 8)
        store.counts[c] = int(rng.integers(0, 200))
    bad = 0
    for _ in range(1000):
        a = AbilityVector(*rng.random(4))
        cands = [InstancePrediction("img", f"c{k:02d}", RotatedBox(0, 0, 4, 2, 0), rng.dirichlet(np.ones(6)),
                                    rng.normal(0, 1, 8), float(rng.random())) for k in range(20)]
        scores = [score_candidate(p, store, a) for p in cands]
        by_final = sorted(range(20), key=lambda i: -scores[i].s_final)
        by_s = sorted(range(20), key=lambda i: -scores[i].s)
        expected = by_s if a.a_bar > 0.5 else by_s[::-1]
        bad += by_final != expected
    ok = bad == 0
    record_criterion("S_final ordering follows S above 0.5 and reverses below", ok, f"{1000 - bad}/1000 sets agree")
    assert ok


def test_greedy_diversity():
    cands, store, ability, budget, golden = load_near_duplicate()
    greedy, _ = greedy_select(cands, store, ability, budget, "greedy")
    static, _ = greedy_select(cands, store, ability, budget, "static")
    g = sum(r.breakdown.pseudo_category != 0 for r in greedy)
    s = sum(r.breakdown.pseudo_category != 0 for r in static)
    ok = g == golden["greedy_minority"] and s == golden["static_minority"] and g > s
    record_criterion("greedy picks more minority candidates than static top-K", ok,
                     f"greedy {g} vs static {s} of K={budget} (golden {golden['greedy_minority']} vs {golden['static_minority']})")
    assert ok


def test_ap_and_perfect_detector():
    gts = [gt("g1", 0, (0, 0, 4, 2, 0)), gt("g2", 0, (20, 0, 4, 2, 0))]
    preds = [pred("p1", 0, (0, 0, 4, 2, 0), 0.9), pred("p2", 0, (50, 50, 4, 2, 0), 0.8),
             pred("p3", 0, (20, 0, 4, 2, 0), 0.7)]
    ap = average_precision(preds, gts, 0)
    boxes = [(i * 30, 0, 6, 2, 0.3 * i - 1) for i in range(9)]
    a = ability_vector([pred(f"p{i}", i % 3, b, 1.0) for i, b in enumerate(boxes)],
                       [gt(f"g{i}", i % 3, b) for i, b in enumerate(boxes)], {0: 9, 1: 3, 2: 1})
    worst = max(abs(v - 1) for v in a.as_tuple())
    ok = abs(ap - 0.8333) <= 1e-4 and worst <= 1e-9
    record_criterion("AP oracle and perfect detector", ok, f"AP {ap:.6f} (want 0.8333), ability {a.as_tuple()}")
    assert ok


@pytest.mark.slow
def test_active_beats_random(experiment):
    reports, elapsed = experiment
    act, rnd = reports["active"], reports["random"]
    gap = act["mean_map50"] - rnd["mean_map50"]
    ok = gap >= 0.03 and act["var_map50"] < rnd["var_map50"] and elapsed < 300
    record_criterion("end-to-end active vs random (5 seeds, 2 rounds, 1%)", ok,
                     f"mAP50 {act['mean_map50']:.4f} vs {rnd['mean_map50']:.4f} (gap {gap:+.4f}, need >= 0.03); "
                     f"var {act['var_map50']:.2e} vs {rnd['var_map50']:.2e}; {elapsed:.0f}s for both")
    assert ok


@pytest.mark.slow
def test_determinism(experiment, tmp_path, capsys):
    reports, _ = experiment
    write_json(tmp_path / "cached.json", reports["active"])
    mixed, select = FIXTURES / "mixed", FIXTURES / "select200"
    small = tmp_path / "sim.json"
    small.write_text(json.dumps({"num_instances": 600, "num_test": 100, "num_heldout": 10, "budget": 20}))
    data = tmp_path / "data"
    assert main(["generate", "--config", str(small), "--seed", "0", "--out-dir", str(data)]) == 0
    commands = {
        "observe": lambda o: ["observe", "--predictions", str(mixed / "predictions.jsonl"), "--gt",
                              str(mixed / "gt.jsonl"), "--state", str(mixed / "state.json"), "--out", str(o / "a.json")],
        "evaluate": lambda o: ["evaluate", "--predictions", str(mixed / "predictions.jsonl"), "--gt",
                               str(mixed / "gt.jsonl"), "--out", str(o / "m.json")],
        "select": lambda o: ["select", "--predictions", str(select / "candidates.jsonl"), "--state",
                             str(select / "state.json"), "--budget", "20", "--out", str(o / "sel.jsonl"),
                             "--state-out", str(o / "state.json")],
        "generate": lambda o: ["generate", "--config", str(small), "--seed", "3", "--out-dir", str(o / "gen")],
        "init": lambda o: ["init", "--gt", str(data / "gt.jsonl"), "--predictions", str(data / "eval_predictions.jsonl"),
                           "--labeled", str(data / "labeled.txt"), "--out", str(o / "init.json")],
        "simulate": lambda o: ["simulate", "--config", str(small), "--strategy", "active", "--seeds", "0,1",
                               "--out", str(o / "r.json"), "--csv", str(o / "r.csv")],
    }
    mismatched = []
    for name, argv in commands.items():
        runs = []
        for k in range(2):
            out = tmp_path / f"{name}{k}"
            out.mkdir()
            assert main(argv(out)) == 0, name
            runs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
        if runs[0] != runs[1]:
            mismatched.append(name)
    printed = []
    for _ in range(2):
        main(["riou", "--a", "3,4,10,2,0.2", "--b", "3.5,4,10,2,0.45"])
        printed.append(capsys.readouterr().out)
    if printed[0] != printed[1]:
        mismatched.append("riou")
    full = tmp_path / "full.json"
    assert main(["simulate", "--strategy", "active", "--seeds", ",".join(map(str, SEEDS)), "--out", str(full)]) == 0
    if full.read_bytes() != (tmp_path / "cached.json").read_bytes():
        mismatched.append("full simulation")
    ok = not mismatched
    record_criterion("byte-identical reruns", ok,
                     f"{len(commands) + 2 - len(mismatched)}/{len(commands) + 2} commands identical"
                     + (f", differing: {mismatched}" if mismatched else ""))
    assert ok


@pytest.mark.slow
def test_easy_to_hard_trend(experiment):
    reports, _ = experiment
    trajectories = [s["a_bar_trajectory"] for s in reports["active"]["per_seed"]]
    rising = sum(all(x <= y for x, y in zip(t, t[1:])) for t in trajectories)
    ok = rising >= 4
    record_criterion("a_bar non-decreasing under active selection", ok,
                     f"{rising}/5 seeds (need >= 4): " + "; ".join(" -> ".join(f"{x:.3f}" for x in t) for t in trajectories))
    assert ok


@pytest.mark.slow
def test_active_spreads_labels(experiment):
    reports, _ = experiment
    pairs = [(a["gini"], r["gini"]) for a, r in zip(reports["active"]["per_seed"], reports["random"]["per_seed"])]
    assert all(a < r for a, r in pairs), pairs
