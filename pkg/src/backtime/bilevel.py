"""Alternating surrogate / trigger-generator optimization that produces the poisoned dataset."""

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import SplitSpec, WindowSpec, split, valid_timestamps
from .errors import BacktimeError, ConfigError, DivergenceError, StageError
from .forecasters import (
    TrainState, as_tensor, evaluate, make_train_state, smooth_l1, train_epoch, windows,
)
from .generator import TriggerGenerator, build_generator, normalization_loss, propagation_matrix
from .threat import (
    AttackConfig, PoisonedDataset, PoisonPlan, attack_offsets, check_budgets, make_pattern,
    poison_mask, select_timestamps, select_variables,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BilevelSchedule:
    warmup_epochs: int = 10
    train_epochs: int = 30
    surrogate_step_size: float = 1e-3
    generator_step_size: float = 1e-2
    generator_steps: int = 1
    batch_size: int = 64
    seed: int = 0
    surrogate_arch: str = "tiny_attention"

    def problems(self) -> list:
        out = []
        if self.warmup_epochs < 1:
            out.append(("warmup_epochs", "must be >= 1"))
        if self.train_epochs < 1:
            out.append(("train_epochs", "must be >= 1"))
        if self.generator_steps < 1:
            out.append(("generator_steps", "must be >= 1"))
        if self.batch_size < 1:
            out.append(("batch_size", "must be >= 1"))
        if self.surrogate_step_size < 0 or self.generator_step_size < 0:
            out.append(("step_size", "must be >= 0"))
        return out

    def validate(self) -> "BilevelSchedule":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(f"schedule.{f}: {m}" for f, m in problems),
                              fields=[f"schedule.{f}" for f, _ in problems])
        return self


def attack_loss_weights(cfg: AttackConfig, spec: WindowSpec) -> np.ndarray:
    """Weight of offset ``t_i - t = d``: ``(t_ptn - d) / t_ptn`` under eta = identity."""
    return attack_offsets(cfg, spec)[1]


@contextmanager
def frozen(module: torch.nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def poison_tensor(clean: torch.Tensor, plan: PoisonPlan, generator: TriggerGenerator,
                  pattern, cfg: AttackConfig):
    """Regenerate every trigger and inject in ascending time order.

    Each trigger is generated from the current poisoned rows
    ``[t - t_bef - t_tgr, t - t_tgr)``, so earlier injections are visible to later
    ones. Gradients flow to the generator unless called under ``torch.no_grad``.
    Returns ``(X_atk, triggers)`` with triggers of shape (|T_atk|, t_tgr, |S|).
    """
    X = clean.clone()
    S = torch.as_tensor(plan.target_variables, dtype=torch.long)
    p = as_tensor(getattr(pattern, "values", pattern))
    t_tgr, t_ptn, t_bef = cfg.trigger_len, len(p), cfg.pre_window
    if not plan.timestamps:
        return X, clean.new_zeros((0, t_tgr, len(S)))
    P = propagation_matrix(generator.graph())
    triggers = []
    for t in plan.timestamps:
        g = generator(X[t - t_bef - t_tgr:t - t_tgr][:, S], P)
        base = X[t - t_tgr - 1, S]
        block = torch.cat([base[None, :] + g, base[None, :] + p[:, None].expand(t_ptn, len(S))])
        rows = torch.arange(t - t_tgr, t + t_ptn)
        X = X.index_put((rows[:, None], S[None, :]), block)
        triggers.append(g)
    return X, torch.stack(triggers)


def warmup(state: TrainState, window_set, schedule: BilevelSchedule) -> list:
    if schedule.warmup_epochs < 1:
        raise ConfigError("warmup_epochs must be >= 1", fields=["schedule.warmup_epochs"])
    return [train_epoch(state, window_set) for _ in range(schedule.warmup_epochs)]


def surrogate_step(state: TrainState, poisoned_values, timestamps, spec: WindowSpec) -> float:
    """One smooth-L1 epoch of the surrogate over every origin (clean and poisoned)."""
    X = as_tensor(poisoned_values).detach()
    return train_epoch(state, windows(X, timestamps, spec), loss=smooth_l1)


def attack_loss(surrogate, X_atk: torch.Tensor, plan: PoisonPlan, cfg: AttackConfig,
                spec: WindowSpec) -> torch.Tensor:
    """Weighted MSE between surrogate forecasts and poisoned futures on the target columns.

    For each planted ``t`` the origins ``t + d`` (see ``attack_offsets``) contribute
    ``w(d) * MSE`` over the full horizon and the target columns; terms are summed per
    ``t`` and averaged over planted timestamps.
    """
    if not plan.timestamps:
        return X_atk.new_zeros(())
    offsets, weights = attack_offsets(cfg, spec)
    origins = (np.asarray(plan.timestamps)[:, None] + offsets[None, :]).reshape(-1)
    w = as_tensor(np.tile(weights, len(plan.timestamps)))
    H, F = windows(X_atk, origins, spec)
    S = torch.as_tensor(plan.target_variables, dtype=torch.long)
    pred = surrogate(H)[..., S]
    per_window = ((pred - F[..., S]) ** 2).mean(dim=(1, 2))
    return (per_window * w).sum() / len(plan.timestamps)


def generator_step(generator: TriggerGenerator, optimizer, surrogate, clean: torch.Tensor,
                   plan: PoisonPlan, pattern, cfg: AttackConfig, spec: WindowSpec) -> dict:
    """One optimizer step on ``l_atk + lambda * l_norm``; surrogate parameters stay fixed."""
    with frozen(surrogate):
        surrogate.eval()
        optimizer.zero_grad(set_to_none=True)
        X_atk, g = poison_tensor(clean, plan, generator, pattern, cfg)
        l_atk = attack_loss(surrogate, X_atk, plan, cfg, spec)
        l_norm = normalization_loss(g) if len(g) else l_atk.new_zeros(())
        l_tgr = l_atk + cfg.norm_weight * l_norm
        if not torch.isfinite(l_tgr):
            raise DivergenceError(f"non-finite generator loss (l_atk={l_atk.item()}, "
                                  f"l_norm={l_norm.item()})")
        l_tgr.backward()
        optimizer.step()
    return {"l_atk": l_atk.item(), "l_norm": l_norm.item(), "l_tgr": l_tgr.item()}


def tgr_loss(generator, surrogate, clean, plan, pattern, cfg, spec) -> torch.Tensor:
    """Differentiable ``l_tgr`` without an optimizer step (used for gradient checks)."""
    X_atk, g = poison_tensor(clean, plan, generator, pattern, cfg)
    return attack_loss(surrogate, X_atk, plan, cfg, spec) + cfg.norm_weight * normalization_loss(g)


@dataclass
class BacktimeResult:
    poisoned: PoisonedDataset
    generator: TriggerGenerator
    surrogate: torch.nn.Module
    plan: PoisonPlan
    train_range: tuple
    log: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)


def _stage(name, epoch, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (BacktimeError, RuntimeError, FloatingPointError) as exc:
        raise StageError(name, epoch, exc) from exc


def run_backtime(ds, cfg: AttackConfig, schedule: BilevelSchedule, pattern=None,
                 window: WindowSpec = WindowSpec(), split_spec: SplitSpec = SplitSpec(),
                 variables=None, log_path=None) -> BacktimeResult:
    """Warm up a surrogate, pick high-error timestamps, then alternate surrogate and
    generator updates for ``schedule.train_epochs`` epochs.

    ``ds`` is a standardized dataset; only its train split is poisoned. The returned
    ``poisoned.values`` has the full length of ``ds``.
    """
    cfg.validate(window)
    schedule.validate()
    if pattern is None:
        pattern = make_pattern(cfg.pattern_shape, cfg.pattern_len, cfg.pattern_budget)
    report = check_budgets(None, pattern, cfg)
    if not report.ok:
        raise ConfigError(f"target pattern over budget: {report.describe()}")

    train_range = split(ds, split_spec, window)[0]
    stop = train_range[1]
    clean_np = ds.values[:stop]
    clean = as_tensor(clean_np)
    N = ds.num_variables
    if variables is None:
        S = select_variables(N, cfg, "random", seed=schedule.seed)
    else:
        S = select_variables(N, cfg, "given", given=variables)

    origins = valid_timestamps(0, stop, window)
    surrogate_state = make_train_state(schedule.surrogate_arch, window, N, seed=schedule.seed,
                                       step_size=schedule.surrogate_step_size,
                                       batch_size=schedule.batch_size)
    warm = _stage("warmup", 0, warmup, surrogate_state, windows(clean, origins, window), schedule)
    log.info("warm-up losses: %s", warm)

    scores = evaluate(surrogate_state.model, clean_np, origins, window, "mae")
    span = len(attack_offsets(cfg, window)[0])
    # every summed attack-loss window t + d must still fit in the train split
    last = stop - window.output_len - (span - 1)
    eligible = {t: e for t, e in scores.items() if t <= last}
    chosen = select_timestamps(eligible, cfg, train_range,
                               quota=None if eligible else 0)
    plan = PoisonPlan(chosen, S).validate(cfg, stop, N)

    generator = build_generator(clean_np, S, cfg, seed=schedule.seed)
    optimizer = torch.optim.Adam(generator.parameters(), lr=schedule.generator_step_size)

    records = []
    for epoch in range(1, schedule.train_epochs + 1):
        with torch.no_grad():
            X_atk, g = poison_tensor(clean, plan, generator, pattern, cfg)
        l_cln = _stage("surrogate", epoch, surrogate_step, surrogate_state, X_atk, origins, window)
        for _ in range(schedule.generator_steps):
            losses = _stage("generator", epoch, generator_step, generator, optimizer,
                            surrogate_state.model, clean, plan, pattern, cfg, window)
        if not check_budgets(g.numpy(), None, cfg).trigger_ok:
            raise StageError("generator", epoch, "trigger budget violated")
        rec = {"epoch": epoch, "l_cln": l_cln, **losses}
        records.append(rec)
        log.debug("epoch %d %s", epoch, rec)

    with torch.no_grad():
        X_atk, g = poison_tensor(clean, plan, generator, pattern, cfg)
    full = np.array(ds.values, dtype=np.float64, copy=True)
    full[:stop] = X_atk.numpy()
    mask = poison_mask(full.shape, plan, cfg)
    poisoned = PoisonedDataset(full, mask, plan, g.numpy())

    if log_path is not None:
        with Path(log_path).open("w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return BacktimeResult(poisoned, generator, surrogate_state.model, plan, train_range,
                          records, scores)
