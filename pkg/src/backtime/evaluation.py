"""Clean/attack metrics, residual-based stealth detection and the experiment drivers."""

import bisect
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from scipy.stats import spearmanr
from sklearn.metrics import precision_recall_curve, roc_auc_score

from .data import SplitSpec, WindowSpec, split, valid_timestamps
from .errors import SplitSizeError, UndefinedMetricError
from .forecasters import as_tensor, evaluate, make_train_state, predict, train_epoch, windows
from .generator import TriggerGenerator
from .threat import (
    AttackConfig, PoisonPlan, ShortfallWarning, build_poisoned_dataset, make_pattern,
    select_timestamps,
)

log = logging.getLogger(__name__)

VULNERABILITY_TRIGGER = np.array([-0.05, 0.05, -0.05, 0.05])


@dataclass
class MetricsRow:
    name: str
    mae_clean: float
    rmse_clean: float
    mae_attack: float
    rmse_attack: float

    def values(self):
        return [self.mae_clean, self.rmse_clean, self.mae_attack, self.rmse_attack]


@dataclass
class MetricsReport:
    rows: list
    seed: int = 0
    config_hash: str = ""
    strategy: str = ""

    @property
    def average(self) -> MetricsRow:
        vals = np.mean([r.values() for r in self.rows], axis=0)
        return MetricsRow("average", *map(float, vals))

    def records(self) -> list:
        meta = {"seed": self.seed, "config_hash": self.config_hash, "strategy": self.strategy}
        return [dict(meta, **asdict(r)) for r in self.rows + [self.average]]

    def table(self) -> str:
        head = f"{'model':<16}{'MAE_C':>10}{'RMSE_C':>10}{'MAE_A':>10}{'RMSE_A':>10}"
        lines = [head, "-" * len(head)]
        for r in self.rows + [self.average]:
            lines.append(f"{r.name:<16}" + "".join(f"{v:>10.4f}" for v in r.values()))
        return "\n".join(lines)


@dataclass
class StealthReport:
    f1: float
    auc: float
    detector: str
    threshold: float


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _mae_rmse(diff: torch.Tensor):
    diff = diff.reshape(-1)
    return float(diff.abs().mean()), float(diff.pow(2).mean().sqrt())


def evaluate_clean(model, values, test_range, spec: WindowSpec):
    """(MAE_C, RMSE_C) over every origin of the test range and every variable."""
    ts = valid_timestamps(*test_range, spec)
    H, F = windows(values, ts, spec)
    return _mae_rmse(predict(model, H) - F)


# -- trigger sources -----------------------------------------------------------

def generator_source(generator: TriggerGenerator, cfg: AttackConfig):
    """Trigger for point ``t`` from the (clean) rows preceding its trigger region."""
    def source(values, t, variables):
        lo = t - cfg.pre_window - cfg.trigger_len
        slab = as_tensor(values[lo:t - cfg.trigger_len][:, list(variables)])
        with torch.no_grad():
            return generator(slab).numpy()
    return source


def fixed_source(trigger):
    trigger = np.asarray(trigger, dtype=np.float64)

    def source(values, t, variables):
        return trigger
    return source


def attack_points(test_range, cfg: AttackConfig, spec: WindowSpec, num: int, seed: int = 0):
    """Random evaluation points inside the test range, at least ``cfg.spacing`` apart."""
    start, stop = test_range
    lo = start + max(spec.input_len, cfg.pre_window + cfg.trigger_len, cfg.trigger_len + 1)
    hi = stop - max(spec.output_len, cfg.pattern_len)
    if hi < lo:
        raise SplitSizeError(f"test range {test_range} too short for attack evaluation")
    order = np.random.default_rng(seed).permutation(np.arange(lo, hi + 1))
    chosen = []
    for t in order.tolist():
        if len(chosen) >= num:
            break
        pos = bisect.bisect_left(chosen, t)
        if pos > 0 and t - chosen[pos - 1] < cfg.spacing:
            continue
        if pos < len(chosen) and chosen[pos] - t < cfg.spacing:
            continue
        chosen.insert(pos, t)
    return chosen


def triggered_inputs(values, points, source, variables, cfg: AttackConfig, spec: WindowSpec):
    """Histories with the trigger written into rows [t - t_tgr, t) as ``b + g``.

    Returns (histories, bases) where bases[k] = values[t_k - t_tgr - 1, S].
    """
    values = np.asarray(values, dtype=np.float64)
    S = list(variables)
    hist, bases = [], []
    for t in points:
        h = values[t - spec.input_len:t].copy()
        b = values[t - cfg.trigger_len - 1, S]
        g = source(values, t, S)
        h[spec.input_len - cfg.trigger_len:, S] = b[None, :] + g
        hist.append(h)
        bases.append(b)
    return np.stack(hist), np.stack(bases)


def evaluate_attack(model, values, points, source, pattern, variables, cfg: AttackConfig,
                    spec: WindowSpec):
    """(MAE_A, RMSE_A): forecasts of rows [t, t + t_ptn) at S against ``b + p``."""
    p = np.asarray(getattr(pattern, "values", pattern), dtype=np.float64)
    H, B = triggered_inputs(values, points, source, variables, cfg, spec)
    P = predict(model, H)[:, :len(p)][..., list(variables)]
    target = as_tensor(B[:, None, :] + p[None, :, None])
    return _mae_rmse(P - target)


# -- stealthiness ----------------------------------------------------------------

def residual_scores(model, values, start, stop, spec: WindowSpec) -> tuple:
    """One-step-ahead absolute residual per row, averaged over variables.

    Returns (rows, scores) for rows ``[max(start, t_in), stop)``.
    """
    rows = np.arange(max(start, spec.input_len), stop)
    v = as_tensor(values)
    idx = rows[:, None] + np.arange(-spec.input_len, 0)[None, :]
    pred = predict(model, v[idx])[:, 0]
    return rows, (pred - v[rows]).abs().mean(dim=1).numpy()


def detection_scores(scores, labels):
    """(AUC, best F1, threshold at best F1) for per-row anomaly scores."""
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise UndefinedMetricError("AUC is undefined when every row has the same label")
    auc = float(roc_auc_score(labels, scores))
    prec, rec, thr = precision_recall_curve(labels, scores)
    f1 = np.where(prec + rec > 0, 2 * prec * rec / np.maximum(prec + rec, 1e-300), 0.0)[:-1]
    best = int(np.argmax(f1))
    return auc, float(f1[best]), float(thr[best])


def stealth_eval(poisoned_values, mask, train_range, test_range, spec: WindowSpec,
                 arch: str = "mlp", epochs: int = 20, seed: int = 0, step_size: float = 1e-3,
                 clean_values=None) -> StealthReport:
    """Train a forecaster on the clean test split and flag poisoned training rows by
    its residuals; a row is positive when any of its cells was poisoned."""
    clean_values = poisoned_values if clean_values is None else clean_values
    N = np.asarray(poisoned_values).shape[1]
    state = make_train_state(arch, spec, N, seed=seed, step_size=step_size)
    test_windows = windows(clean_values, valid_timestamps(*test_range, spec), spec)
    for _ in range(epochs):
        train_epoch(state, test_windows)
    rows, scores = residual_scores(state.model, poisoned_values, *train_range, spec)
    labels = np.asarray(mask)[rows].any(axis=1)
    auc, f1, thr = detection_scores(scores, labels)
    return StealthReport(f1=f1, auc=auc, detector=f"residual-{arch}", threshold=thr)


# -- victims -----------------------------------------------------------------------

def train_victim(values, train_range, spec: WindowSpec, arch: str = "mlp", epochs: int = 30,
                 seed: int = 0, step_size: float = 1e-3, batch_size: int = 64, shuffle=True,
                 hidden: int | None = None):
    state = make_train_state(arch, spec, np.asarray(values).shape[1], seed=seed,
                             step_size=step_size, batch_size=batch_size, shuffle=shuffle,
                             hidden=hidden)
    ws = windows(values, valid_timestamps(*train_range, spec), spec)
    losses = [train_epoch(state, ws) for _ in range(epochs)]
    return state.model, losses


# -- timestamp vulnerability -----------------------------------------------------------

@dataclass
class VulnerabilityResult:
    percentiles: list
    mae_difference: list
    poisoned_counts: list
    spearman: float = field(default=float("nan"))


def vulnerability_experiment(ds, cfg: AttackConfig, spec: WindowSpec = WindowSpec(),
                             split_spec: SplitSpec = SplitSpec(), groups: int = 10,
                             trigger=None, pattern=None, arch: str = "mlp", epochs: int = 20,
                             seed: int = 0, step_size: float = 1e-3, clean_model=None,
                             attacked_model_fn=None) -> VulnerabilityResult:
    """Poison one error-percentile group at a time and measure how much easier the
    poisoned windows become for the attacked model than for the clean one.

    Timestamps of the clean training windows are sorted by clean-model MAE and cut
    into ``groups`` equal groups. Each group (thinned by the spacing rule) is
    poisoned on every variable with the fixed trigger and the pattern; a fresh model
    is trained on it, and the reported value is the mean over poisoned ``t`` of
    MAE(attacked) - MAE(clean) on the poisoned window at ``t``.

    ``attacked_model_fn(poisoned_values) -> model`` overrides victim training.
    """
    train_range = split(ds, split_spec, spec)[0]
    stop = train_range[1]
    values = np.asarray(ds.values[:stop])
    N = values.shape[1]
    g1 = VULNERABILITY_TRIGGER if trigger is None else np.asarray(trigger)
    if g1.ndim == 1:
        g1 = np.repeat(g1[:, None], N, axis=1)
    if pattern is None:
        pattern = make_pattern("cone", cfg.pattern_len, cfg.pattern_budget)
    cfg = replace(cfg, trigger_len=g1.shape[0])

    if clean_model is None:
        clean_model, _ = train_victim(values, train_range, spec, arch, epochs, seed, step_size)
    lo, hi = cfg.poison_bounds(stop)
    ts = [t for t in valid_timestamps(0, stop, spec) if lo <= t <= hi]
    errs = evaluate(clean_model, values, ts, spec, "mae")
    order = sorted(ts, key=lambda t: (errs[t], t))
    chunks = np.array_split(np.asarray(order), groups)
    if min(len(c) for c in chunks) < 1:
        raise SplitSizeError(f"{len(order)} timestamps cannot form {groups} groups")

    percentiles, diffs, counts = [], [], []
    S = tuple(range(N))
    for gi, chunk in enumerate(chunks):
        # spacing filter within the group, earliest timestamps first
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ShortfallWarning)
            chosen = select_timestamps({int(t): 0.0 for t in chunk}, cfg, train_range,
                                       quota=len(chunk))
        plan = PoisonPlan(chosen, S)
        poisoned = build_poisoned_dataset(values, plan, g1, pattern, cfg).values
        if attacked_model_fn is not None:
            attacked = attacked_model_fn(poisoned)
        else:
            attacked, _ = train_victim(poisoned, train_range, spec, arch, epochs, seed, step_size)
        atk = evaluate(attacked, poisoned, chosen, spec, "mae")
        cln = evaluate(clean_model, poisoned, chosen, spec, "mae")
        diffs.append(float(np.mean([atk[t] - cln[t] for t in chosen])))
        percentiles.append((gi + 0.5) / groups)
        counts.append(len(chosen))
        log.info("group %d/%d: %d timestamps, MAE difference %.4f", gi + 1, groups,
                 len(chosen), diffs[-1])
    rho = spearmanr(percentiles, diffs).statistic if len(set(diffs)) > 1 else float("nan")
    return VulnerabilityResult(percentiles, diffs, counts, float(rho))
