"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 assert robustness phenomena on the default synthetic
benchmark that its geometry does not admit: every defense, including no
defense at all, holds Recall@1 = 1.0 under the prescribed test attack.
The measurements and the capacity analysis are recorded in
expected_results.json (known_red_criteria). The assertions are kept at
their stated thresholds rather than loosened, so those tests fail
honestly against the recorded reality.
"""

import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from dmlrob.attacks import AttackConfig, pgd_ensemble, pgd_single
from dmlrob.config import ExperimentConfig, build_datasets
from dmlrob.defenses import TrainConfig, train
from dmlrob.evaluation import evaluate, nmi, pairwise_f1, recall_at_k
from dmlrob.gradcheck import finite_diff_grad, max_rel_error
from dmlrob.losses import embed_divergence, init_proxies, pal_loss, triplet_loss, TripletConfig
from dmlrob.model import backward, forward, init_model
from dmlrob.rng import Rng

SEEDS = (0, 1, 2, 3, 4)
KS = (1, 2, 4, 8)
TEST_ATTACK = AttackConfig(epsilon=8 / 255, steps=10)
EXPECTED = json.load(open(os.path.join(os.path.dirname(__file__), "..", "expected_results.json")))


def _announce(num, ok, detail):
    print(f"ACCEPTANCE {num} {'PASS' if ok else 'FAIL'}: {detail}")


def _train_eval(defense, seed, epochs=60, **kw):
    cfg = ExperimentConfig(seed=seed)
    train_ds, test_ds = build_datasets(cfg)
    result = train(train_ds, TrainConfig(defense=defense, epochs=epochs, **kw), Rng(seed).split("train"))
    clean = evaluate(result.ensemble, test_ds, None, KS, Rng(seed).split("eval"))
    attacked = evaluate(result.ensemble, test_ds, TEST_ATTACK, KS, Rng(seed).split("eval"))
    return result.ensemble, test_ds, clean, attacked


@pytest.fixture(scope="module")
def benchmark_grid():
    grid = {}
    for defense in ("none", "at", "mixup", "eat"):
        grid[defense] = [_train_eval(defense, s) for s in SEEDS]
    return grid


@pytest.fixture(scope="module")
def ablation_grid(benchmark_grid):
    grid = {"eat_split": benchmark_grid["eat"]}
    grid["eat_no_split"] = [_train_eval("eat", s, eat_split=False) for s in SEEDS]
    grid["naive_ensemble"] = [_train_eval("naive_ensemble", s) for s in SEEDS]
    return grid


def _mean_recall(entries, mode_index, k=1):
    return float(np.mean([entry[mode_index].recall_at[k] for entry in entries]))


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    worst = 0.0
    for trial in range(20):
        rng = Rng(9000 + trial)
        model = init_model([5, 16, 4], True, rng.split("model"))
        x = rng.split("x").uniform(0.1, 0.9, size=(6, 5))
        labels = np.array([0, 0, 1, 1, 2, 2])
        proxies = init_proxies(labels, 4, rng.split("prox"))
        ref = rng.split("ref").uniform(0.1, 0.9, size=(6, 5))
        e_ref = forward(model, ref)[0]

        losses = {
            "triplet": lambda e: triplet_loss(e, labels, TripletConfig(0.5)),
            "pal": lambda e: pal_loss(e, labels, proxies)[:2],
            "divergence": lambda e: embed_divergence(e, e_ref),
        }
        for name, loss_fn in losses.items():
            e, trace = forward(model, x)
            _, d_e = loss_fn(e)
            _, d_x = backward(model, trace, d_e)

            def composed(xv):
                ev, _ = forward(model, xv)
                return loss_fn(ev)[0]

            num = finite_diff_grad(composed, x, h=1e-5)
            worst = max(worst, max_rel_error(d_x, num, floor=1e-7))
    took = time.time() - t0
    ok = worst <= 1e-4 and took < 30
    _announce(1, ok, f"max rel error {worst:.2e} over 20x3 instances in {took:.1f}s")
    assert worst <= 1e-4
    assert took < 30


def test_criterion_2_attack_constraints():
    t0 = time.time()
    rows = 0
    trial = 0
    while rows < 500:
        rng = Rng(8000 + trial)
        model = init_model([6, 12, 4], True, rng.split("m"))
        n = int(rng.split("n").integers(5, 30))
        x = rng.split("x").uniform(0.0, 1.0, size=(n, 6))
        eps = float(rng.split("e").uniform(0.0, 0.2))
        steps = int(rng.split("s").integers(0, 12))
        adv = pgd_single(model, x, AttackConfig(epsilon=eps, steps=steps))
        assert np.max(np.abs(adv.x_adv - adv.x_clean)) <= eps + 1e-12
        assert adv.x_adv.min() >= 0.0 and adv.x_adv.max() <= 1.0
        rows += n
        trial += 1
    took = time.time() - t0
    ok = took < 30
    _announce(2, ok, f"{rows} fuzzed rows satisfied budget and domain in {took:.1f}s")
    assert took < 30


def test_criterion_3_attack_degenerations():
    rng = Rng(7000)
    model = init_model([5, 16, 4], True, rng.split("m"))
    x = rng.split("x").uniform(0.1, 0.9, size=(10, 5))
    cfg = AttackConfig(epsilon=0.08, steps=10)

    single = pgd_single(model, x, cfg)
    as_ensemble = pgd_ensemble(x, [model], cfg)
    identical = pgd_ensemble(x, [model, model, model], cfg)
    ok = (
        np.array_equal(single.x_adv, as_ensemble.x_adv)
        and np.array_equal(single.x_adv, identical.x_adv)
        and np.array_equal(pgd_single(model, x, AttackConfig(epsilon=0.08, steps=0)).x_adv, x)
        and np.array_equal(pgd_single(model, x, AttackConfig(epsilon=0.0, steps=10)).x_adv, x)
    )
    _announce(3, ok, "N=1 and identical-member ensembles bit-equal single; T=0 and eps=0 are identities")
    assert ok


def test_criterion_4_metric_oracles():
    from itertools import combinations

    t0 = time.time()
    rng = Rng(6000)
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        ids = rng.integers(0, 4, size=n)
        labels = rng.integers(0, 3, size=n)

        tp = fp = fn = 0
        for i, j in combinations(range(n), 2):
            sc, sl = ids[i] == ids[j], labels[i] == labels[j]
            tp += sc and sl
            fp += sc and not sl
            fn += (not sc) and sl
        denom = 2 * tp + fn + fp
        expected_f1 = 1.0 if denom == 0 else 2 * tp / denom
        assert pairwise_f1(ids, labels) == expected_f1

        if n >= 3:
            e = rng.normal(size=(n, 3))
            k = int(rng.integers(1, n))
            hits = 0
            for q in range(n):
                d = np.linalg.norm(e - e[q], axis=1)
                order = sorted((float(d[j]), j) for j in range(n) if j != q)
                hits += any(labels[j] == labels[q] for _, j in order[:k])
            assert recall_at_k(e, labels, k, metric="euclidean") == hits / n

    labels = np.array([0, 0, 1, 2, 2, 2])
    assert nmi((labels * 13 + 7) % 31, labels) == 1.0
    assert nmi(labels, labels) == 1.0
    took = time.time() - t0
    ok = took < 60
    _announce(4, ok, f"1000 oracle instances exact; NMI invariances exact; {took:.1f}s")
    assert took < 60


def test_criterion_5_vulnerability_reproduction(benchmark_grid):
    clean = _mean_recall(benchmark_grid["none"], 2)
    attacked = _mean_recall(benchmark_grid["none"], 3)
    drop = (clean - attacked) * 100
    ok = drop >= 30.0
    _announce(
        5, ok,
        f"baseline clean R@1 {clean:.3f}, PGD-10 R@1 {attacked:.3f}, drop {drop:.1f} pts (need >= 30)",
    )
    assert drop >= 30.0, (
        f"seed-averaged Recall@1 drop {drop:.1f} < 30 points; the benchmark's blob geometry "
        "is attack-immune for smooth models (see expected_results.json known_red_criteria)"
    )


def test_criterion_6_defense_ordering(benchmark_grid):
    atk = {d: _mean_recall(benchmark_grid[d], 3) for d in ("none", "at", "mixup", "eat")}
    clean_eat = _mean_recall(benchmark_grid["eat"], 2)
    clean_none = _mean_recall(benchmark_grid["none"], 2)
    gap = (atk["eat"] - atk["at"]) * 100
    ordering = atk["eat"] > atk["at"] > max(atk["mixup"], atk["none"])
    clean_ok = clean_eat >= clean_none - 0.10
    ok = ordering and gap >= 3.0 and clean_ok
    _announce(
        6, ok,
        f"attacked R@1 eat={atk['eat']:.3f} at={atk['at']:.3f} mixup={atk['mixup']:.3f} "
        f"none={atk['none']:.3f}; eat-at gap {gap:.1f} pts (need >= 3); "
        f"clean eat {clean_eat:.3f} vs baseline {clean_none:.3f}",
    )
    assert clean_ok
    assert ordering and gap >= 3.0, (
        "defense ordering not observable: the test attack leaves every model at "
        "saturated Recall@1 on this benchmark (see expected_results.json known_red_criteria)"
    )


def test_criterion_7_ablation_ordering(ablation_grid):
    atk = {v: _mean_recall(ablation_grid[v], 3) for v in ablation_grid}
    ordered = atk["eat_split"] >= atk["eat_no_split"] >= atk["naive_ensemble"]
    gap = (atk["eat_split"] - atk["naive_ensemble"]) * 100
    ok = ordered and gap > 0.0
    _announce(
        7, ok,
        f"attacked R@1 split={atk['eat_split']:.3f} no-split={atk['eat_no_split']:.3f} "
        f"naive={atk['naive_ensemble']:.3f}; split-naive gap {gap:.2f} pts (need > 0)",
    )
    assert ordered
    assert gap > 0.0, (
        "split-vs-naive gap is zero: all variants saturate under the test attack "
        "on this benchmark (see expected_results.json known_red_criteria)"
    )


def _allow_one_small_inversion(values, tol=0.01):
    inversions = [max(0.0, b - a) for a, b in zip(values, values[1:])]
    big = [v for v in inversions if v > 1e-12]
    return len(big) <= 1 and all(v <= tol + 1e-12 for v in big)


def test_criterion_8_sweep_trends(benchmark_grid):
    eps_curve = []
    for eps_num in (8, 16, 24, 32):
        vals = []
        for seed, (ensemble, test_ds, _, _) in zip(SEEDS, benchmark_grid["eat"]):
            atk = AttackConfig(epsilon=eps_num / 255, steps=10)
            vals.append(evaluate(ensemble, test_ds, atk, (1,), Rng(seed).split("eval")).recall_at[1])
        eps_curve.append(float(np.mean(vals)))
    iter_curve = []
    for steps in (1, 5, 10, 20):
        vals = []
        for seed, (ensemble, test_ds, _, _) in zip(SEEDS, benchmark_grid["eat"]):
            atk = AttackConfig(epsilon=8 / 255, steps=steps)
            vals.append(evaluate(ensemble, test_ds, atk, (1,), Rng(seed).split("eval")).recall_at[1])
        iter_curve.append(float(np.mean(vals)))
    ok = _allow_one_small_inversion(eps_curve) and _allow_one_small_inversion(iter_curve)
    _announce(8, ok, f"eps curve {eps_curve}, iteration curve {iter_curve}")
    assert _allow_one_small_inversion(eps_curve), eps_curve
    assert _allow_one_small_inversion(iter_curve), iter_curve


def test_criterion_9_determinism_closure():
    runs = []
    for _ in range(2):
        cfg = ExperimentConfig(seed=0)
        train_ds, test_ds = build_datasets(cfg)
        result = train(train_ds, TrainConfig(defense="at", epochs=10), Rng(0).split("train"))
        clean = evaluate(result.ensemble, test_ds, None, KS, Rng(0).split("eval"))
        attacked = evaluate(result.ensemble, test_ds, TEST_ATTACK, KS, Rng(0).split("eval"))
        runs.append((clean.to_dict(), attacked.to_dict()))
    ok = runs[0] == runs[1]
    _announce(9, ok, "train + clean/attacked evaluation reproduced bit-exactly from the seed")
    assert ok


def test_pilot_thresholds_from_expected_results(benchmark_grid):
    # thresholds recorded from the pilot runs in expected_results.json
    clean_r1 = _mean_recall(benchmark_grid["none"], 2)
    clean_nmi = float(np.mean([e[2].nmi for e in benchmark_grid["none"]]))
    assert clean_r1 >= EXPECTED["thresholds"]["baseline_clean_recall_at_1_min"]
    assert clean_nmi >= EXPECTED["thresholds"]["baseline_clean_nmi_min"]
