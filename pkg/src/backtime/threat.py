"""Attacker model: poison plans, trigger/pattern injection, budgets and soft identification.

Triggers and patterns are *relative offsets*. For a poisoned timestamp ``t`` and
target columns ``S`` the base row is ``b = X[t - t_tgr - 1, S]``; the trigger
rows ``[t - t_tgr, t)`` become ``b + g`` and the pattern rows ``[t, t + t_ptn)``
become ``b + p[j]`` (the same scalar for every column in ``S``).
"""

import bisect
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import WindowSpec
from .errors import BudgetError, ConfigError, InjectionError

ETA_FUNCTIONS = {
    "identity": lambda x: x,
    "square": lambda x: x * x,
}


class ShortfallWarning(UserWarning):
    """select_timestamps could not reach its quota under the spacing rule."""


def rate_count(rate: float, total: int) -> int:
    # the epsilon keeps 0.05 * 1200 == 60.000000000000007 from rounding up to 61
    return max(0, math.ceil(rate * total - 1e-9))


@dataclass(frozen=True)
class AttackConfig:
    trigger_len: int = 4
    pattern_len: int = 7
    pre_window: int = 6
    temporal_rate: float = 0.03
    spatial_rate: float = 0.3
    trigger_budget: float = 0.2
    pattern_budget: float = 0.4
    norm_weight: float = 5.0
    freq_keep: int = 200
    eta: str = "identity"
    pattern_shape: str = "cone"

    def problems(self, window: WindowSpec | None = None) -> list:
        """Every violated invariant as (field, message); empty when valid."""
        out = []
        if self.trigger_len < 1:
            out.append(("trigger_len", "must be >= 1"))
        if self.pattern_len < 1:
            out.append(("pattern_len", "must be >= 1"))
        if self.pre_window < 0:
            out.append(("pre_window", "must be >= 0"))
        if not 0.0 < self.temporal_rate < 1.0:
            out.append(("temporal_rate", "must lie in (0, 1)"))
        if not 0.0 < self.spatial_rate <= 1.0:
            out.append(("spatial_rate", "must lie in (0, 1]"))
        if not self.trigger_budget > 0:
            out.append(("trigger_budget", "must be > 0"))
        if not self.pattern_budget > 0:
            out.append(("pattern_budget", "must be > 0"))
        if self.norm_weight < 0:
            out.append(("norm_weight", "must be >= 0"))
        if self.freq_keep < 1:
            out.append(("freq_keep", "must be >= 1"))
        if self.eta not in ETA_FUNCTIONS:
            out.append(("eta", f"unknown eta {self.eta!r}; choose from {sorted(ETA_FUNCTIONS)}"))
        if self.pattern_shape not in PATTERN_SHAPES and self.pattern_shape != "custom":
            out.append(("pattern_shape", f"unknown shape {self.pattern_shape!r}"))
        if window is not None and window.input_len - self.trigger_len < 0:
            out.append(("trigger_len", f"trigger longer than input window {window.input_len}"))
        return out

    def validate(self, window: WindowSpec | None = None) -> "AttackConfig":
        problems = self.problems(window)
        if problems:
            raise ConfigError("; ".join(f"attack.{f}: {m}" for f, m in problems),
                              fields=[f"attack.{f}" for f, _ in problems])
        return self

    @property
    def spacing(self) -> int:
        return self.trigger_len + self.pattern_len

    @property
    def eta_fn(self):
        return ETA_FUNCTIONS[self.eta]

    def poison_bounds(self, stop: int) -> tuple:
        """Inclusive [lo, hi] of admissible poison timestamps in rows [0, stop)."""
        # base row t - t_tgr - 1 must exist even when pre_window == 0
        return self.trigger_len + max(self.pre_window, 1), stop - self.pattern_len


# -- target patterns ---------------------------------------------------------

def _cone(n):
    if n == 1:
        return np.ones(1)
    c = (n - 1) / 2
    return 1.0 - np.abs(np.arange(n) - c) / c


def _upward(n):
    return np.arange(n) / max(n - 1, 1)


def _up_and_down(n):
    return np.sin(1.5 * np.pi * np.arange(n) / max(n - 1, 1))


PATTERN_SHAPES = {"cone": _cone, "upward_trend": _upward, "up_and_down": _up_and_down}


@dataclass(frozen=True, eq=False)
class TargetPattern:
    values: np.ndarray
    shape_tag: str = "custom"
    budget: float | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        if self.budget is not None:
            report = check_budgets(None, values, pattern_budget=self.budget)
            if not report.pattern_ok:
                raise BudgetError(report.describe())

    def __len__(self):
        return len(self.values)


def make_pattern(shape: str, length: int, budget: float) -> TargetPattern:
    """Named pattern scaled so its peak magnitude equals ``budget``.

    cone returns to its start, upward_trend ends above it, up_and_down ends below it.
    """
    if shape not in PATTERN_SHAPES:
        raise ConfigError(f"unknown pattern shape {shape!r}", fields=["attack.pattern_shape"])
    unit = PATTERN_SHAPES[shape](length)
    values = np.clip(budget * unit, -budget, budget)
    return TargetPattern(values, shape, budget)


# -- plans -------------------------------------------------------------------

@dataclass(frozen=True)
class PoisonPlan:
    timestamps: tuple
    target_variables: tuple

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(sorted(int(t) for t in self.timestamps)))
        object.__setattr__(self, "target_variables", tuple(int(v) for v in self.target_variables))

    def validate(self, cfg: AttackConfig, stop: int, num_variables: int) -> "PoisonPlan":
        lo, hi = cfg.poison_bounds(stop)
        for t in self.timestamps:
            if not lo <= t <= hi:
                raise InjectionError(f"poison timestamp {t} outside [{lo}, {hi}]")
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if b - a < cfg.spacing:
                raise InjectionError(f"timestamps {a} and {b} closer than {cfg.spacing}")
        S = self.target_variables
        if len(set(S)) != len(S) or any(not 0 <= v < num_variables for v in S):
            raise InjectionError(f"bad target variables {S} for N={num_variables}")
        if len(S) < rate_count(cfg.spatial_rate, num_variables):
            raise InjectionError(f"|S|={len(S)} below spatial rate {cfg.spatial_rate}")
        return self


@dataclass(eq=False)
class PoisonedDataset:
    values: np.ndarray
    poison_mask: np.ndarray
    plan: PoisonPlan
    triggers: np.ndarray = field(default=None)


def select_timestamps(errors: dict, cfg: AttackConfig, train_range, quota: int | None = None):
    """Greedy top-MAE selection under the spacing rule.

    Candidates are the keys of ``errors`` that are admissible poison timestamps in
    ``train_range``. They are visited by descending error (ties: smaller timestamp
    first) and accepted when at least ``cfg.spacing`` away from every accepted one.
    Returns the accepted timestamps sorted ascending.
    """
    start, stop = train_range
    lo, hi = cfg.poison_bounds(stop)
    lo = max(lo, start + cfg.trigger_len + max(cfg.pre_window, 1))
    candidates = [(float(e), int(t)) for t, e in errors.items() if lo <= t <= hi]
    if quota is None:
        quota = rate_count(cfg.temporal_rate, len(candidates))
    candidates.sort(key=lambda et: (-et[0], et[1]))
    chosen = []
    for _, t in candidates:
        if len(chosen) >= quota:
            break
        pos = bisect.bisect_left(chosen, t)
        if pos > 0 and t - chosen[pos - 1] < cfg.spacing:
            continue
        if pos < len(chosen) and chosen[pos] - t < cfg.spacing:
            continue
        chosen.insert(pos, t)
    if len(chosen) < quota:
        warnings.warn(f"only {len(chosen)} of {quota} timestamps satisfy the spacing rule",
                      ShortfallWarning, stacklevel=2)
    return chosen


def random_timestamps(cfg: AttackConfig, train_range, spec: WindowSpec, seed: int,
                      quota: int | None = None):
    """Uniformly random admissible timestamps (used by the non-learned baselines)."""
    rng = np.random.default_rng(seed)
    start, stop = train_range
    lo, hi = cfg.poison_bounds(stop)
    lo = max(lo, start + spec.input_len)
    hi = min(hi, stop - spec.output_len)
    candidates = np.arange(lo, hi + 1)
    errors = dict(zip(candidates.tolist(), rng.random(len(candidates)).tolist()))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ShortfallWarning)
        return select_timestamps(errors, cfg, train_range, quota)


def select_variables(num_variables: int, cfg: AttackConfig, mode: str = "random",
                     seed: int = 0, given=None) -> tuple:
    need = rate_count(cfg.spatial_rate, num_variables)
    if need > num_variables:
        raise ConfigError(f"spatial rate {cfg.spatial_rate} needs {need} > N={num_variables}")
    if mode == "given":
        S = tuple(int(v) for v in given)
        if len(set(S)) != len(S) or any(not 0 <= v < num_variables for v in S):
            raise ConfigError(f"invalid target variables {S} for N={num_variables}")
        if len(S) / num_variables < cfg.spatial_rate - 1e-12:
            raise ConfigError(
                f"{len(S)}/{num_variables} target variables is below spatial rate {cfg.spatial_rate}",
                fields=["attack.spatial_rate"])
        return S
    if mode == "random":
        rng = np.random.default_rng(seed)
        return tuple(sorted(rng.choice(num_variables, size=need, replace=False).tolist()))
    raise ConfigError(f"unknown variable selection mode {mode!r}")


# -- injection ---------------------------------------------------------------

def _check_region(T, t, t_tgr, t_ptn):
    if t - t_tgr - 1 < 0 or t + t_ptn > T:
        raise InjectionError(
            f"cannot inject at t={t}: need {t_tgr + 1} rows before and {t_ptn} rows from t (T={T})")


def inject(values, t: int, variables, trigger, pattern, out=None):
    """Write ``b + g`` and ``b + p`` around ``t``.

    Returns ``(poisoned, mask_delta)``; ``poisoned`` is ``out`` when given
    (modified in place) otherwise a fresh copy of ``values``.
    """
    g = np.asarray(trigger, dtype=np.float64)
    p = np.asarray(getattr(pattern, "values", pattern), dtype=np.float64)
    S = np.asarray(variables, dtype=np.int64)
    t_tgr, t_ptn = g.shape[0], p.shape[0]
    if g.ndim != 2 or g.shape[1] != len(S):
        raise InjectionError(f"trigger shape {g.shape} does not match |S|={len(S)}")
    _check_region(values.shape[0], t, t_tgr, t_ptn)
    X = np.array(values, dtype=np.float64, copy=True) if out is None else out
    base = X[t - t_tgr - 1, S].copy()
    X[np.ix_(np.arange(t - t_tgr, t), S)] = base[None, :] + g
    X[np.ix_(np.arange(t, t + t_ptn), S)] = base[None, :] + p[:, None]
    mask = np.zeros(X.shape, dtype=bool)
    mask[np.ix_(np.arange(t - t_tgr, t + t_ptn), S)] = True
    return X, mask


def inject_torch(X: torch.Tensor, t: int, S: torch.Tensor, g: torch.Tensor, p: torch.Tensor):
    """Differentiable in-place counterpart of :func:`inject` on a (non-leaf) tensor."""
    t_tgr, t_ptn = g.shape[0], p.shape[0]
    _check_region(X.shape[0], t, t_tgr, t_ptn)
    base = X[t - t_tgr - 1, S]
    rows = torch.arange(t - t_tgr, t + t_ptn)
    block = torch.cat([base[None, :] + g, base[None, :] + p[:, None].expand(t_ptn, len(S))])
    X[rows[:, None], S[None, :]] = block
    return X


def poison_mask(shape, plan: PoisonPlan, cfg: AttackConfig) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    S = np.asarray(plan.target_variables, dtype=np.int64)
    for t in plan.timestamps:
        mask[np.ix_(np.arange(t - cfg.trigger_len, t + cfg.pattern_len), S)] = True
    return mask


def build_poisoned_dataset(clean, plan: PoisonPlan, triggers, pattern, cfg: AttackConfig):
    """Inject every planned timestamp (ascending) into a copy of ``clean``.

    ``triggers`` is one (t_tgr x |S|) array per planned timestamp, or a single
    array reused everywhere.
    """
    values = clean.values if hasattr(clean, "values") else clean
    X = np.array(values, dtype=np.float64, copy=True)
    triggers = np.asarray(triggers, dtype=np.float64)
    if triggers.ndim == 2:
        triggers = np.broadcast_to(triggers, (len(plan.timestamps),) + triggers.shape)
    if len(triggers) != len(plan.timestamps):
        raise InjectionError(f"{len(triggers)} triggers for {len(plan.timestamps)} timestamps")
    mask = np.zeros(X.shape, dtype=bool)
    for t, g in zip(plan.timestamps, triggers):
        _, delta = inject(X, t, plan.target_variables, g, pattern, out=X)
        mask |= delta
    return PoisonedDataset(X, mask, plan, np.array(triggers))


# -- soft identification and budgets -----------------------------------------

def _overlap(a0, a1, b0, b1):
    return max(0, min(a1, b1) - max(a0, b0))


def soft_identification(t_i: int, plan: PoisonPlan, cfg: AttackConfig, spec: WindowSpec) -> float:
    """Poisoning degree of the window at origin ``t_i``.

    For each planted ``t``: ``eta(c_ptn / t_ptn)`` if all ``t_tgr`` trigger rows lie
    in the history ``[t_i - t_in, t_i)``, else 0; ``c_ptn`` counts pattern rows in
    the future ``[t_i, t_i + t_out)``. The largest value over planted timestamps wins.
    """
    eta = cfg.eta_fn
    beta = 0.0
    for t in plan.timestamps:
        c_tgr = _overlap(t - cfg.trigger_len, t, t_i - spec.input_len, t_i)
        if c_tgr != cfg.trigger_len:
            continue
        c_ptn = _overlap(t, t + cfg.pattern_len, t_i, t_i + spec.output_len)
        beta = max(beta, eta(c_ptn / cfg.pattern_len))
    return beta


def attack_offsets(cfg: AttackConfig, spec: WindowSpec):
    """Offsets ``d = t_i - t`` summed in the attack loss, with their weights.

    ``d`` runs over ``[0, min(t_ptn, t_in - t_tgr))`` so every summed window holds the
    whole trigger; the weight is ``eta((t_ptn - d) / t_ptn)``.
    """
    span = min(cfg.pattern_len, spec.input_len - cfg.trigger_len)
    if span < 1:
        raise ConfigError("attack loss has no admissible offsets (t_in < t_tgr)")
    offsets = np.arange(span)
    weights = np.array([cfg.eta_fn((cfg.pattern_len - d) / cfg.pattern_len) for d in offsets])
    return offsets, weights


@dataclass(frozen=True)
class BudgetReport:
    trigger_max: float | None
    pattern_max: float | None
    trigger_ok: bool
    pattern_ok: bool
    trigger_worst: tuple | None = None
    pattern_worst: int | None = None

    @property
    def ok(self) -> bool:
        return self.trigger_ok and self.pattern_ok

    def describe(self) -> str:
        parts = []
        if self.trigger_max is not None:
            parts.append(f"trigger max |g|={self.trigger_max:.6g} at {self.trigger_worst} "
                         f"({'ok' if self.trigger_ok else 'VIOLATION'})")
        if self.pattern_max is not None:
            parts.append(f"pattern max |p|={self.pattern_max:.6g} at index {self.pattern_worst} "
                         f"({'ok' if self.pattern_ok else 'VIOLATION'})")
        return "; ".join(parts)


def check_budgets(g, p, cfg: AttackConfig | None = None, *, trigger_budget=None,
                  pattern_budget=None) -> BudgetReport:
    """L-infinity budget check (closed inequality). ``g`` or ``p`` may be None."""
    if cfg is not None:
        trigger_budget = cfg.trigger_budget if trigger_budget is None else trigger_budget
        pattern_budget = cfg.pattern_budget if pattern_budget is None else pattern_budget
    tmax = tworst = pmax = pworst = None
    t_ok = p_ok = True
    if g is not None:
        g = np.abs(np.asarray(g, dtype=np.float64))
        if g.size:
            tworst = tuple(int(i) for i in np.unravel_index(np.argmax(g), g.shape))
            tmax = float(g.max())
            t_ok = tmax <= trigger_budget
    if p is not None:
        p = np.abs(np.asarray(getattr(p, "values", p), dtype=np.float64))
        if p.size:
            pworst = int(np.argmax(p))
            pmax = float(p.max())
            p_ok = pmax <= pattern_budget
    return BudgetReport(tmax, pmax, t_ok, p_ok, tworst, pworst)
