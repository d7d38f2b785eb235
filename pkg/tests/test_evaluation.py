import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from backtime.data import MtsDataset, WindowSpec, generate_synthetic, valid_timestamps
from backtime.errors import SplitSizeError, UndefinedMetricError
from backtime.evaluation import (
    MetricsReport, MetricsRow, attack_points, detection_scores, evaluate_attack, evaluate_clean,
    fixed_source, generator_source, stealth_eval, triggered_inputs, vulnerability_experiment,
)
from backtime.forecasters import DTYPE, build_model, evaluate, forward
from backtime.generator import build_generator
from backtime.threat import AttackConfig, make_pattern

SPEC = WindowSpec(12, 12)
CFG = AttackConfig()
PATTERN = make_pattern("cone", 7, 0.4)


class Shifted(torch.nn.Module):
    """Outputs the true future (looked up by history) plus ``offset``."""

    def __init__(self, values, offset=0.0):
        super().__init__()
        self.values = torch.as_tensor(values, dtype=DTYPE)
        self.offset = offset

    def forward(self, x):
        rows = []
        for h in x:
            t = next(t for t in range(12, len(self.values) - 11)
                     if torch.equal(self.values[t - 12:t], h))
            rows.append(self.values[t:t + 12] + self.offset)
        return torch.stack(rows)


class TargetOracle(torch.nn.Module):
    """Predicts base + p on the first rows of every column, base = row t - t_tgr - 1."""

    def forward(self, x):
        base = x[:, 12 - CFG.trigger_len - 1]
        out = base[:, None, :].repeat(1, 12, 1)
        out[:, :7] += torch.as_tensor(PATTERN.values)[None, :, None]
        return out


def test_evaluate_clean_identity_and_offset(rng):
    X = rng.normal(size=(80, 2))
    assert evaluate_clean(Shifted(X), X, (0, 80), SPEC) == (0.0, 0.0)
    mae, rmse = evaluate_clean(Shifted(X, 1.0), X, (0, 80), SPEC)
    assert abs(mae - 1) < 1e-12 and abs(rmse - 1) < 1e-12


def test_attack_points_rules():
    pts = attack_points((100, 400), CFG, SPEC, 20, seed=1)
    assert len(pts) == 20 and pts == sorted(pts)
    assert all(b - a >= CFG.spacing for a, b in zip(pts, pts[1:]))
    assert min(pts) >= 112 and max(pts) <= 388
    assert pts == attack_points((100, 400), CFG, SPEC, 20, seed=1)
    with pytest.raises(SplitSizeError):
        attack_points((0, 20), CFG, SPEC, 5)


def test_triggered_inputs_write_base_plus_g(rng):
    X = rng.normal(size=(100, 3))
    g = rng.uniform(-0.2, 0.2, size=(4, 2))
    H, B = triggered_inputs(X, [50], fixed_source(g), [0, 2], CFG, SPEC)
    np.testing.assert_array_equal(B[0], X[45, [0, 2]])
    np.testing.assert_array_equal(H[0][8:, [0, 2]], X[45, [0, 2]] + g)
    np.testing.assert_array_equal(H[0][:, 1], X[38:50, 1])
    np.testing.assert_array_equal(H[0][:8], X[38:46])


def test_evaluate_attack_oracle_is_zero(rng):
    X = rng.normal(size=(200, 3))
    pts = attack_points((0, 200), CFG, SPEC, 8)
    g = random_g(rng)
    assert evaluate_attack(TargetOracle(), X, pts, fixed_source(g), PATTERN, [0, 1], CFG,
                           SPEC) == (0.0, 0.0)


def random_g(rng, S=2):
    return rng.uniform(-0.2, 0.2, size=(4, S))


class TriggerBlind(torch.nn.Module):
    """Perfect forecaster that only reads the history rows before the trigger region."""

    def __init__(self, values):
        super().__init__()
        self.values = torch.as_tensor(values, dtype=DTYPE)

    def forward(self, x):
        keep = 12 - CFG.trigger_len
        rows = []
        for h in x:
            t = next(t for t in range(12, len(self.values) - 11)
                     if torch.equal(self.values[t - 12:t - CFG.trigger_len], h[:keep]))
            rows.append(self.values[t:t + 12])
        return torch.stack(rows)


def test_evaluate_attack_degenerate_truth(rng):
    # the future already equals base + p, so a trigger-blind perfect model scores 0
    X = rng.normal(size=(200, 1))
    t = 100
    X[t:t + 7, 0] = X[t - 5, 0] + PATTERN.values
    g = random_g(rng, 1)
    mae, rmse = evaluate_attack(TriggerBlind(X), X, [t], fixed_source(g), PATTERN, [0],
                                CFG, SPEC)
    assert mae == 0.0 and rmse == 0.0


def test_evaluate_attack_brute_force(rng):
    X = rng.normal(size=(300, 4))
    model = build_model("mlp", SPEC, 4, seed=9)
    gen = build_generator(X, (1, 3), CFG, seed=2)
    source = generator_source(gen, CFG)
    pts = attack_points((100, 300), CFG, SPEC, 5, seed=3)
    mae, rmse = evaluate_attack(model, X, pts, source, PATTERN, (1, 3), CFG, SPEC)
    errs = []
    for t in pts:
        h = X[t - 12:t].copy()
        b = X[t - 5, [1, 3]]
        with torch.no_grad():
            g = gen(torch.as_tensor(X[t - 10:t - 4][:, [1, 3]])).numpy()
        h[8:, [1, 3]] = b + g
        pred = forward(model, h)[:7][:, [1, 3]]
        errs.append(pred - (b[None, :] + PATTERN.values[:, None]))
    errs = np.stack(errs)
    assert abs(mae - np.abs(errs).mean()) < 1e-12
    assert abs(rmse - np.sqrt((errs ** 2).mean())) < 1e-12


def test_zero_trigger_zero_pattern_equals_clean_restricted():
    # each column is constant around the attack points, so writing b + 0 changes nothing
    rng = np.random.default_rng(5)
    X = np.repeat(rng.normal(size=(1, 3)), 200, axis=0)
    X[:, 2] = np.sin(np.arange(200))  # a column outside S may vary freely
    model = build_model("mlp", SPEC, 3, seed=1)
    pts = [60, 90, 120]
    mae, _ = evaluate_attack(model, X, pts, fixed_source(np.zeros((4, 2))), np.zeros(7),
                             [0, 1], CFG, SPEC)
    clean = evaluate(model, X, pts, SPEC, variables=[0, 1], horizon=7)
    assert abs(mae - np.mean(list(clean.values()))) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mae_not_above_rmse(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, 2))
    model = build_model("mlp", SPEC, 2, seed=seed % 7)
    mae, rmse = evaluate_clean(model, X, (0, 120), SPEC)
    assert mae <= rmse + 1e-15
    pts = attack_points((0, 120), CFG, SPEC, 4, seed)
    mae, rmse = evaluate_attack(model, X, pts, fixed_source(random_g(rng)), PATTERN, [0, 1],
                                CFG, SPEC)
    assert mae <= rmse + 1e-15


def test_detector_anchors():
    labels = np.array([0, 0, 1, 1, 0, 1], dtype=bool)
    auc, f1, _ = detection_scores(labels.astype(float), labels)
    assert auc == 1.0 and f1 == 1.0
    assert detection_scores(np.ones(6), labels)[0] == 0.5
    with pytest.raises(UndefinedMetricError):
        detection_scores(np.arange(6.0), np.zeros(6, dtype=bool))


def test_random_scores_auc_near_half():
    aucs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        labels = rng.random(2000) < 0.2
        aucs.append(detection_scores(rng.random(2000), labels)[0])
    assert abs(np.mean(aucs) - 0.5) < 0.05


def test_stealth_eval_degenerate_mask():
    X = np.random.default_rng(0).normal(size=(200, 2))
    with pytest.raises(UndefinedMetricError):
        stealth_eval(X, np.zeros_like(X, dtype=bool), (0, 120), (160, 200), SPEC, epochs=1)


def test_stealth_eval_flags_large_spikes():
    rng = np.random.default_rng(0)
    t = np.arange(600)[:, None]
    X = np.sin(2 * np.pi * t / 24 + np.array([0.0, 1.0])) + 0.05 * rng.normal(size=(600, 2))
    mask = np.zeros_like(X, dtype=bool)
    for s in range(50, 350, 40):
        X[s:s + 3, 0] += 5.0
        mask[s:s + 3, 0] = True
    report = stealth_eval(X, mask, (0, 360), (480, 600), SPEC, epochs=30, step_size=1e-2)
    assert report.auc > 0.7 and 0 < report.f1 <= 1


def test_metrics_report_average():
    rows = [MetricsRow("a", 1, 2, 3, 4), MetricsRow("b", 3, 4, 5, 6)]
    report = MetricsReport(rows, seed=1, config_hash="h", strategy="s")
    assert report.average.values() == [2, 3, 4, 5]
    recs = report.records()
    assert recs[-1]["name"] == "average" and recs[0]["strategy"] == "s"
    assert "average" in report.table()


def test_vulnerability_identical_models_zero_difference():
    ds = MtsDataset(generate_synthetic(3, 600, seed=0).values)
    model = build_model("mlp", SPEC, 3, seed=0)
    res = vulnerability_experiment(ds, CFG, SPEC, groups=4, clean_model=model,
                                   attacked_model_fn=lambda _: model)
    assert res.mae_difference == [0.0] * 4
    assert res.percentiles == [0.125, 0.375, 0.625, 0.875]
    assert all(c > 0 for c in res.poisoned_counts)
    assert np.isnan(res.spearman)


def test_vulnerability_too_many_groups():
    ds = MtsDataset(generate_synthetic(2, 500, seed=0).values)
    model = build_model("mlp", SPEC, 2)
    with pytest.raises(SplitSizeError):
        vulnerability_experiment(ds, CFG, SPEC, groups=10_000, clean_model=model,
                                 attacked_model_fn=lambda _: model)
