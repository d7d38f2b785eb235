"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (visible with or
without ``-s``). The synthetic-benchmark criteria (4-7) share one poisoning run
per seed.
"""

import time
import warnings

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from backtime import pipeline
from backtime.bilevel import attack_loss, poison_tensor, tgr_loss
from backtime.baselines import manhattan_trigger
from backtime.cli import main
from backtime.config import load_config
from backtime.data import WindowSpec
from backtime.evaluation import stealth_eval, vulnerability_experiment
from backtime.forecasters import build_model
from backtime.generator import TriggerGenerator, build_generator, normalization_loss
from backtime.threat import (
    AttackConfig, PoisonPlan, ShortfallWarning, inject, make_pattern, select_timestamps,
    soft_identification,
)

SEEDS = (0, 1, 2)
SPEC = WindowSpec(12, 12)


def report(capsys, number, ok, detail, started):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {detail} "
              f"({time.perf_counter() - started:.1f}s)")


# -- 1. budget invariant -----------------------------------------------------------------

def test_c01_trigger_budget(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    gen = TriggerGenerator(rng.normal(size=(4, 40)), pre_window=6, trigger_len=4, budget=0.2)
    params = list(gen.parameters())
    worst = 0.0
    for _ in range(1000):
        scale = 10 ** rng.uniform(-2, 2)
        with torch.no_grad():
            for p in params:
                p.copy_(torch.as_tensor(rng.normal(scale=scale, size=p.shape)))
            slab = torch.as_tensor(rng.normal(scale=10 ** rng.uniform(-1, 2), size=(6, 4)))
            worst = max(worst, gen(slab).abs().max().item())
    elapsed = time.perf_counter() - start
    ok = worst <= 0.2 and elapsed < 10
    report(capsys, 1, ok, f"max |g| = {worst!r} over 1000 states (budget 0.2)", start)
    assert ok


# -- 2. soft identification -------------------------------------------------------------

def test_c02_soft_identification(capsys):
    start = time.perf_counter()
    cfg = AttackConfig(trigger_len=4, pattern_len=7)
    checked = mismatches = 0
    for t in range(20, 40):
        plan = PoisonPlan([t], [0])
        for t_i in range(0, 80):
            full = t_i - 12 <= t - 4 and t <= t_i
            expect = max(0, t + 7 - t_i) / 7 if full else 0.0
            checked += 1
            mismatches += soft_identification(t_i, plan, cfg, SPEC) != expect
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 1
    report(capsys, 2, ok, f"{checked} windows, {mismatches} mismatches", start)
    assert ok


# -- 3. gradient correctness ------------------------------------------------------------

def _fd_relative_error(seed, samples=8, h=1e-6):
    rng = np.random.default_rng(seed)
    X = torch.as_tensor(rng.normal(size=(200, 4)))
    cfg = AttackConfig(norm_weight=1.0)
    pattern = make_pattern("cone", 7, 0.4)
    S = tuple(sorted(rng.choice(4, 2, replace=False).tolist()))
    plan = PoisonPlan([40, 80, 120, 160], S)
    gen = build_generator(X.numpy(), S, cfg, seed=seed, hidden=16)
    surrogate = build_model("mlp", SPEC, 4, seed=seed, hidden=16)
    surrogate.requires_grad_(False)
    gen.zero_grad()
    tgr_loss(gen, surrogate, X, plan, pattern, cfg, SPEC).backward()
    params = [p for p in gen.parameters() if p.grad is not None]
    worst = 0.0
    for _ in range(samples):
        p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = tgr_loss(gen, surrogate, X, plan, pattern, cfg, SPEC).item()
            p[idx] = orig - h
            down = tgr_loss(gen, surrogate, X, plan, pattern, cfg, SPEC).item()
            p[idx] = orig
        fd, an = (up - down) / (2 * h), p.grad[idx].item()
        if max(abs(fd), abs(an)) > 1e-8:
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    return worst


def test_c03_gradient_check(capsys):
    start = time.perf_counter()
    errors = [_fd_relative_error(s) for s in SEEDS]
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 60
    report(capsys, 3, ok, "max relative errors " + ", ".join(f"{e:.2e}" for e in errors), start)
    assert ok


# -- 4-7. synthetic benchmark -----------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    """Per seed: clean / BackTime / Random reports and the stealth report."""
    out = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        cfg = load_config(None, [f"seed={seed}"])
        outcome = pipeline.run_poison(cfg)
        res = outcome.result
        artifacts = pipeline.PoisonArtifacts(res.poisoned.values, res.poisoned.poison_mask,
                                             res.plan, res.generator)
        reports, _ = pipeline.attack_evaluation(cfg, outcome.prepared, artifacts,
                                                baselines=("random",))
        t1 = time.perf_counter()
        prep = outcome.prepared
        stealth = stealth_eval(res.poisoned.values, res.poisoned.poison_mask, prep.train_range,
                               prep.test_range, cfg.dataset.window, arch=cfg.eval.detector_arch,
                               epochs=cfg.eval.detector_epochs, seed=seed,
                               clean_values=prep.data.values)
        t2 = time.perf_counter()
        out[seed] = {"reports": reports, "stealth": stealth, "attack_time": t1 - t0,
                     "stealth_time": t2 - t1}
    return out


def test_c04_attack_effectiveness(benchmark, capsys):
    start = time.perf_counter()
    ratios = [b["reports"]["backtime"].average.mae_attack / b["reports"]["clean"].average.mae_attack
              for b in benchmark.values()]
    elapsed = sum(b["attack_time"] for b in benchmark.values())
    ok = sum(r <= 0.7 for r in ratios) >= 2 and elapsed < 600
    report(capsys, 4, ok, "MAE_A poisoned/clean " + ", ".join(f"{r:.3f}" for r in ratios)
           + f" (need <= 0.7 in 2/3; pipeline {elapsed:.0f}s)", start)
    assert ok


def test_c05_clean_fidelity(benchmark, capsys):
    start = time.perf_counter()
    ratios = [b["reports"]["backtime"].average.mae_clean / b["reports"]["clean"].average.mae_clean
              for b in benchmark.values()]
    ok = all(r <= 1.25 for r in ratios)
    report(capsys, 5, ok, "MAE_C poisoned/clean " + ", ".join(f"{r:.3f}" for r in ratios)
           + " (need <= 1.25 every seed)", start)
    assert ok


def test_c06_beats_random(benchmark, capsys):
    start = time.perf_counter()
    pairs = [(b["reports"]["backtime"].average.mae_attack,
              b["reports"]["random"].average.mae_attack) for b in benchmark.values()]
    elapsed = sum(b["attack_time"] for b in benchmark.values())
    ok = sum(bt < rd for bt, rd in pairs) >= 2 and elapsed < 900
    report(capsys, 6, ok, "MAE_A BackTime vs Random "
           + ", ".join(f"{bt:.3f}<{rd:.3f}" if bt < rd else f"{bt:.3f}>={rd:.3f}"
                       for bt, rd in pairs), start)
    assert ok


def test_c07_stealth(benchmark, capsys):
    start = time.perf_counter()
    aucs = [b["stealth"].auc for b in benchmark.values()]
    elapsed = sum(b["stealth_time"] for b in benchmark.values())
    ok = all(0.35 <= a <= 0.70 for a in aucs) and elapsed < 300
    report(capsys, 7, ok, "detector AUC " + ", ".join(f"{a:.3f}" for a in aucs)
           + " (need within [0.35, 0.70])", start)
    assert ok


# -- 8. oracle equivalences -------------------------------------------------------------

def _greedy_oracle(errors, spacing, quota, lo, hi):
    kept = []
    for t in sorted((t for t in errors if lo <= t <= hi), key=lambda t: (-errors[t], t)):
        if len(kept) == quota:
            break
        if all(abs(t - k) >= spacing for k in kept):
            kept.append(t)
    return sorted(kept)


def _manhattan_oracle(X, p, t_tgr, S):
    cols = []
    for v in S:
        x = X[:, v]
        best_s, best_d = None, None
        for s in range(t_tgr + 1, len(x) - len(p) + 1):
            d = sum(abs(x[s + k] - x[s - t_tgr - 1] - p[k]) for k in range(len(p)))
            if best_d is None or d < best_d:
                best_s, best_d = s, d
        cols.append([x[best_s - t_tgr + k] - x[best_s - t_tgr - 1] for k in range(t_tgr)])
    return np.array(cols).T


def _inject_oracle(X, t, S, g, p):
    out = X.copy()
    for j, v in enumerate(S):
        b = X[t - len(g) - 1, v]
        for k in range(len(g)):
            out[t - len(g) + k, v] = b + g[k, j]
        for k in range(len(p)):
            out[t + k, v] = b + p[k]
    return out


def test_c08_oracles(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    cfg = AttackConfig()
    pattern = make_pattern("cone", 7, 0.4)
    failures = []

    for trial in range(20):
        errors = {t: float(e) for t, e in enumerate(rng.integers(0, 50, 1000))}
        quota = int(rng.integers(1, 90))
        lo, hi = cfg.poison_bounds(1000)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ShortfallWarning)
            got = select_timestamps(errors, cfg, (0, 1000), quota=quota)
        if got != _greedy_oracle(errors, cfg.spacing, quota, lo, hi):
            failures.append(f"select_timestamps trial {trial}")

    for trial in range(3):
        X = rng.normal(size=(300, 6))
        S = sorted(rng.choice(6, 3, replace=False).tolist())
        diff = np.abs(manhattan_trigger(X, pattern, cfg, S) - _manhattan_oracle(
            X, pattern.values, 4, S)).max()
        if diff > 1e-9:
            failures.append(f"manhattan_trigger trial {trial}: {diff}")

    X = rng.normal(size=(1000, 6))
    for trial in range(200):
        t = int(rng.integers(5, 994))
        S = sorted(rng.choice(6, int(rng.integers(1, 7)), replace=False).tolist())
        g = rng.uniform(-0.2, 0.2, size=(4, len(S)))
        p = rng.uniform(-0.4, 0.4, size=7)
        if not np.array_equal(inject(X, t, S, g, p)[0], _inject_oracle(X, t, S, g, p)):
            failures.append(f"inject trial {trial}")

    for trial in range(50):
        g = rng.normal(size=(int(rng.integers(1, 9)), int(rng.integers(1, 7))))
        oracle = sum(abs(sum(g[:, j])) for j in range(g.shape[1])) / g.shape[1]
        if abs(normalization_loss(g) - oracle) > 1e-9:
            failures.append(f"normalization_loss trial {trial}")

    X = torch.as_tensor(rng.normal(size=(400, 6)))
    S = (0, 3, 5)
    plan = PoisonPlan([60, 150, 260], S)
    gen = build_generator(X.numpy(), S, cfg, seed=1, hidden=16)
    surrogate = build_model("mlp", SPEC, 6, seed=1, hidden=16)
    with torch.no_grad():
        X_atk, _ = poison_tensor(X, plan, gen, pattern, cfg)
        got = attack_loss(surrogate, X_atk, plan, cfg, SPEC).item()
        total = 0.0
        for t in plan.timestamps:
            for t_i in range(t, t + 7):
                w = soft_identification(t_i, PoisonPlan([t], S), cfg, SPEC)
                pred = surrogate(X_atk[None, t_i - 12:t_i])[0][:, list(S)]
                total += w * ((pred - X_atk[t_i:t_i + 12, list(S)]) ** 2).mean().item()
    if abs(got - total / 3) > 1e-9:
        failures.append(f"attack loss weighting: {got} vs {total / 3}")

    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    report(capsys, 8, ok, "all oracles agree" if not failures else "; ".join(failures[:5]),
           start)
    assert ok


# -- 9. vulnerability trend -------------------------------------------------------------

def test_c09_vulnerability_trend(capsys):
    start = time.perf_counter()
    rhos = []
    for seed in SEEDS:
        cfg = load_config(None, [f"seed={seed}", "eval.groups=5"])
        prep = pipeline.prepare(cfg)
        res = vulnerability_experiment(prep.data, cfg.attack_config, cfg.dataset.window,
                                       cfg.dataset.split_spec, groups=cfg.eval.groups,
                                       pattern=pipeline.target_pattern(cfg),
                                       arch=cfg.model.victims[0], epochs=cfg.model.epochs,
                                       seed=seed, step_size=cfg.model.step_size)
        rho = spearmanr(res.percentiles, res.mae_difference).statistic
        assert abs(rho - res.spearman) < 1e-12
        rhos.append(rho)
    elapsed = time.perf_counter() - start
    ok = sum(r < 0 for r in rhos) >= 2 and elapsed < 1200
    report(capsys, 9, ok, "Spearman " + ", ".join(f"{r:.2f}" for r in rhos)
           + " (need < 0 in 2/3, 5 groups)", start)
    assert ok


# -- 10. determinism ----------------------------------------------------------------------

def test_c10_determinism(tmp_path, capsys):
    start = time.perf_counter()
    dirs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["poison", "--run-dir", str(d)]) for d in dirs]
    names = ("poisoned.csv", "poison_mask.csv", "poison_metrics.jsonl", "train_log.jsonl",
             "plan.json", "triggers.json")
    same = {n: (dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes() for n in names}
    elapsed = time.perf_counter() - start
    ok = codes == [0, 0] and all(same.values()) and elapsed < 600
    detail = "identical " + ", ".join(names) if all(same.values()) else \
        "differs: " + ", ".join(n for n, s in same.items() if not s)
    report(capsys, 10, ok, detail, start)
    assert ok
