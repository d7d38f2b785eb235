"""Non-learned trigger baselines: Random, Inverse and Manhattan.

Each returns one (t_tgr x |S|) trigger that is reused at every poisoned timestamp
and injected through the same path as learned triggers. Inverse and Manhattan
triggers are not clipped to the budget; callers report violations with
``check_budgets``.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import WindowSpec, valid_timestamps
from .errors import ConfigError, SearchError
from .forecasters import predict, make_train_state, train_epoch, windows
from .threat import AttackConfig

KINDS = ("random", "inverse", "manhattan")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str = "random"
    seed: int = 0
    surrogate_arch: str = "tiny_attention"  # inverse: reversed-time forecaster
    inverse_epochs: int = 20
    inverse_step_size: float = 1e-3
    max_candidates: int | None = None  # manhattan: scan only the first n segments

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown baseline {self.kind!r}; choose from {KINDS}",
                              fields=["baseline.kind"])
        if self.max_candidates is not None and self.max_candidates < 1:
            raise ConfigError("max_candidates must be >= 1", fields=["baseline.max_candidates"])


def random_trigger(cfg: AttackConfig, num_targets: int, seed: int = 0) -> np.ndarray:
    """One Uniform(-budget, budget) draw of shape (t_tgr, |S|)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-cfg.trigger_budget, cfg.trigger_budget,
                       size=(cfg.trigger_len, num_targets))


def inverse_trigger(values, pattern, cfg: AttackConfig, variables, arch: str = "tiny_attention",
                    epochs: int = 20, seed: int = 0, step_size: float = 1e-3) -> np.ndarray:
    """Forecast the ``t_tgr`` steps that precede the pattern with a time-reversed model.

    The model reads ``t_ptn`` reversed rows and predicts the next ``t_tgr`` reversed
    rows. Its input is the pattern (base 0, so ``0 + p``) on the target columns and
    zeros elsewhere; the reversed output at S is the trigger.
    """
    values = np.asarray(values, dtype=np.float64)
    p = np.asarray(getattr(pattern, "values", pattern), dtype=np.float64)
    S = list(variables)
    spec = WindowSpec(input_len=len(p), output_len=cfg.trigger_len)
    flipped = values[::-1].copy()
    state = make_train_state(arch, spec, values.shape[1], seed=seed, step_size=step_size,
                             shuffle=True)
    ws = windows(flipped, valid_timestamps(0, len(flipped), spec), spec)
    for _ in range(epochs):
        train_epoch(state, ws)
    query = np.zeros((len(p), values.shape[1]))
    query[:, S] = p[::-1, None]
    out = predict(state.model, query[None])[0].numpy()
    return out[::-1][:, S].copy()


def manhattan_search(series, pattern, trigger_len: int, max_candidates: int | None = None):
    """Best segment start ``s`` for one series and its distance.

    Distance of start ``s`` is ``sum_k |x[s + k] - (x[s - t_tgr - 1] + p[k])|`` for
    every ``s`` with ``t_tgr + 1 <= s <= T - t_ptn``; ties go to the earliest ``s``.
    """
    x = np.asarray(series, dtype=np.float64)
    p = np.asarray(getattr(pattern, "values", pattern), dtype=np.float64)
    first, last = trigger_len + 1, len(x) - len(p)
    if last < first:
        raise SearchError(f"series of length {len(x)} has no candidate segment")
    segs = sliding_window_view(x, len(p))[first:last + 1]
    bases = x[first - trigger_len - 1:last - trigger_len]
    if max_candidates is not None:
        segs, bases = segs[:max_candidates], bases[:max_candidates]
    dist = np.abs(segs - bases[:, None] - p[None, :]).sum(axis=1)
    k = int(np.argmin(dist))
    return first + k, float(dist[k])


def manhattan_trigger(values, pattern, cfg: AttackConfig, variables,
                      max_candidates: int | None = None, return_info: bool = False):
    """Per target column, the trigger-length run before its best-matching segment,
    expressed as offsets from that segment's base row."""
    values = np.asarray(values, dtype=np.float64)
    cols, info = [], []
    for v in variables:
        x = values[:, v]
        s, d = manhattan_search(x, pattern, cfg.trigger_len, max_candidates)
        base = x[s - cfg.trigger_len - 1]
        cols.append(x[s - cfg.trigger_len:s] - base)
        info.append((s, d))
    trigger = np.stack(cols, axis=1)
    return (trigger, info) if return_info else trigger


def baseline_trigger(spec: BaselineSpec, train_values, pattern, cfg: AttackConfig,
                     variables) -> np.ndarray:
    if spec.kind == "random":
        return random_trigger(cfg, len(variables), spec.seed)
    if spec.kind == "inverse":
        return inverse_trigger(train_values, pattern, cfg, variables, spec.surrogate_arch,
                               spec.inverse_epochs, spec.seed, spec.inverse_step_size)
    return manhattan_trigger(train_values, pattern, cfg, variables, spec.max_candidates)
