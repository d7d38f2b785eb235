"""End-to-end runs driven by an :class:`ExperimentConfig`, with on-disk artifacts.

A run directory holds::

    config.yaml  poisoned.csv  poison_mask.csv  plan.json  triggers.json
    generator.npz  graph_edges.txt  train_log.jsonl  poison_metrics.jsonl
    victims/  metrics.jsonl  metrics.txt  stealth.json  fig2.json  sweep.jsonl  *.png
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .baselines import BaselineSpec, baseline_trigger
from .bilevel import BacktimeResult, run_backtime
from .config import ExperimentConfig, dump_config
from .data import (
    MtsDataset, fit_standardize, generate_synthetic, load_csv, load_mask, save_csv, save_mask,
    split,
)
from .errors import BacktimeError, ConfigError
from .evaluation import (
    MetricsReport, MetricsRow, attack_points, evaluate_attack, evaluate_clean, fixed_source,
    generator_source, stealth_eval, train_victim, triggered_inputs, vulnerability_experiment,
)
from .forecasters import load_checkpoint, predict, save_checkpoint
from .generator import load_generator, normalization_loss, save_generator, save_graph_edges
from .io import (
    load_plan, read_json, read_records, save_plan, save_triggers, write_json, write_records,
)
from .threat import (
    PoisonPlan, build_poisoned_dataset, check_budgets, make_pattern, random_timestamps,
)

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    raw: MtsDataset
    data: MtsDataset  # standardized with train-split statistics
    stats: object
    ranges: tuple

    @property
    def train_range(self):
        return self.ranges[0]

    @property
    def test_range(self):
        return self.ranges[2]


def load_dataset(cfg: ExperimentConfig) -> MtsDataset:
    d = cfg.dataset
    if d.source == "csv":
        return load_csv(d.path)
    return generate_synthetic(d.num_variables, d.span, cfg.seed, d.recipe)


def prepare(cfg: ExperimentConfig) -> Prepared:
    raw = load_dataset(cfg)
    ranges = split(raw, cfg.dataset.split_spec, cfg.dataset.window)
    data, stats = fit_standardize(raw, ranges[0])
    return Prepared(raw, data, stats, ranges)


def target_pattern(cfg: ExperimentConfig):
    a = cfg.attack
    return make_pattern(a.pattern_shape, a.pattern_len, a.pattern_budget)


# -- poisoning -------------------------------------------------------------------

@dataclass
class PoisonOutcome:
    prepared: Prepared
    result: BacktimeResult
    pattern: object
    summary: dict


def poison_summary(cfg: ExperimentConfig, result: BacktimeResult, pattern) -> dict:
    trig = result.poisoned.triggers
    budget = check_budgets(trig, pattern, cfg.attack_config)
    final = result.log[-1] if result.log else {}
    return {
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "poisoned_timestamps": len(result.plan.timestamps),
        "target_variables": list(result.plan.target_variables),
        "poisoned_cells": int(result.poisoned.poison_mask.sum()),
        "trigger_max_abs": budget.trigger_max,
        "pattern_max_abs": budget.pattern_max,
        "budget_ok": budget.ok,
        "normalization_loss": normalization_loss(trig) if len(trig) else 0.0,
        **{f"final_{k}": v for k, v in final.items()},
    }


def run_poison(cfg: ExperimentConfig, out_dir=None) -> PoisonOutcome:
    prep = prepare(cfg)
    pattern = target_pattern(cfg)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
    result = run_backtime(prep.data, cfg.attack_config, cfg.bilevel_schedule, pattern,
                          cfg.dataset.window, cfg.dataset.split_spec,
                          variables=cfg.attack.target_variables, log_path=log_path)
    summary = poison_summary(cfg, result, pattern)
    if out_dir is not None:
        names = prep.data.variable_names
        dump_config(cfg, out_dir / "config.yaml")
        save_csv(prep.data.with_values(result.poisoned.values), out_dir / "poisoned.csv")
        save_mask(result.poisoned.poison_mask, out_dir / "poison_mask.csv")
        save_plan(result.plan, out_dir / "plan.json", names)
        save_triggers(result.poisoned.triggers, out_dir / "triggers.json")
        save_generator(result.generator, result.plan.target_variables, out_dir / "generator.npz")
        save_graph_edges(result.generator.graph().detach().numpy(),
                         [names[v] for v in result.plan.target_variables],
                         out_dir / "graph_edges.txt")
        write_records([summary], out_dir / "poison_metrics.jsonl")
        plotting.plot_trigger_pattern(result.poisoned.triggers, pattern,
                                      out_dir / "trigger_pattern.png",
                                      [names[v] for v in result.plan.target_variables])
    return PoisonOutcome(prep, result, pattern, summary)


@dataclass
class PoisonArtifacts:
    poisoned: np.ndarray
    mask: np.ndarray
    plan: PoisonPlan
    generator: object


def load_poison_artifacts(run_dir) -> PoisonArtifacts:
    run_dir = Path(run_dir)
    missing = [n for n in ("poisoned.csv", "poison_mask.csv", "plan.json", "generator.npz")
               if not (run_dir / n).exists()]
    if missing:
        raise ConfigError(f"{run_dir} lacks {', '.join(missing)}; run `poison` first")
    poisoned = load_csv(run_dir / "poisoned.csv", reject_constant=False).values
    generator, _ = load_generator(run_dir / "generator.npz")
    return PoisonArtifacts(poisoned, load_mask(run_dir / "poison_mask.csv"),
                           load_plan(run_dir / "plan.json"), generator)


def ensure_poisoned(cfg: ExperimentConfig, run_dir) -> PoisonArtifacts:
    if not (Path(run_dir) / "plan.json").exists():
        run_poison(cfg, run_dir)
    return load_poison_artifacts(run_dir)


# -- victims and attack metrics ------------------------------------------------------

def train_victims(cfg: ExperimentConfig, values, train_range) -> dict:
    m = cfg.model
    return {arch: train_victim(values, train_range, cfg.dataset.window, arch, m.epochs,
                               cfg.seed, m.step_size, m.batch_size,
                               hidden=m.hidden)[0]
            for arch in m.victims}


def metrics_report(cfg, prep: Prepared, models: dict, points, source, pattern, variables,
                   strategy: str) -> MetricsReport:
    window, acfg = cfg.dataset.window, cfg.attack_config
    rows = []
    for arch, model in models.items():
        mae_c, rmse_c = evaluate_clean(model, prep.data.values, prep.test_range, window)
        mae_a, rmse_a = evaluate_attack(model, prep.data.values, points, source, pattern,
                                        variables, acfg, window)
        rows.append(MetricsRow(arch, mae_c, rmse_c, mae_a, rmse_a))
    return MetricsReport(rows, cfg.seed, cfg.hash(), strategy)


def baseline_report(kind: str, cfg, prep: Prepared, plan: PoisonPlan, points, pattern):
    acfg, window = cfg.attack_config, cfg.dataset.window
    S = plan.target_variables
    stop = prep.train_range[1]
    spec = BaselineSpec(kind=kind, seed=cfg.seed, surrogate_arch=cfg.schedule.surrogate_arch)
    trigger = baseline_trigger(spec, prep.data.values[:stop], pattern, acfg, S)
    budget = check_budgets(trigger, None, acfg)
    if not budget.trigger_ok:
        log.warning("%s baseline trigger exceeds the budget: %s", kind, budget.describe())
    timestamps = random_timestamps(acfg, prep.train_range, window, cfg.seed,
                                   quota=len(plan.timestamps))
    poisoned = build_poisoned_dataset(prep.data.values, PoisonPlan(timestamps, S), trigger,
                                      pattern, acfg)
    models = train_victims(cfg, poisoned.values, prep.train_range)
    return metrics_report(cfg, prep, models, points, fixed_source(trigger), pattern, S, kind)


def attack_evaluation(cfg: ExperimentConfig, prep: Prepared, artifacts: PoisonArtifacts,
                      baselines=None):
    """Reports keyed by strategy: ``clean`` (clean-trained victims on BackTime-triggered
    inputs), ``backtime`` and one entry per baseline.

    Returns ``(reports, victims)``; ``victims`` maps ``clean``/``backtime`` to the
    trained models by architecture.
    """
    acfg, window = cfg.attack_config, cfg.dataset.window
    pattern = target_pattern(cfg)
    S = artifacts.plan.target_variables
    points = attack_points(prep.test_range, acfg, window, cfg.eval.attack_points, cfg.seed)
    source = generator_source(artifacts.generator, acfg)
    victims = {"clean": train_victims(cfg, prep.data.values, prep.train_range),
               "backtime": train_victims(cfg, artifacts.poisoned, prep.train_range)}
    reports = {name: metrics_report(cfg, prep, models, points, source, pattern, S, name)
               for name, models in victims.items()}
    for kind in cfg.eval.baselines if baselines is None else baselines:
        reports[kind] = baseline_report(kind, cfg, prep, artifacts.plan, points, pattern)
    return reports, victims


def run_eval(cfg: ExperimentConfig, run_dir) -> dict:
    run_dir = Path(run_dir)
    artifacts = ensure_poisoned(cfg, run_dir)
    prep = prepare(cfg)
    reports, victims = attack_evaluation(cfg, prep, artifacts)
    write_records([r for rep in reports.values() for r in rep.records()],
                  run_dir / "metrics.jsonl")
    (run_dir / "metrics.txt").write_text(render_reports(reports) + "\n")
    _plot_example(cfg, prep, artifacts, victims["backtime"][cfg.model.victims[0]], run_dir)
    return reports


def _plot_example(cfg, prep, artifacts, model, run_dir):
    acfg, window = cfg.attack_config, cfg.dataset.window
    S = artifacts.plan.target_variables
    points = attack_points(prep.test_range, acfg, window, 1, cfg.seed)
    H, B = triggered_inputs(prep.data.values, points, generator_source(artifacts.generator, acfg),
                            S, acfg, window)
    pred = predict(model, H)[0].numpy()
    p = target_pattern(cfg).values
    v = S[0]
    plotting.plot_predictions(H[0][:, v], pred[:len(p), v], B[0][0] + p,
                              run_dir / "prediction_example.png",
                              f"{prep.data.variable_names[v]} at t={points[0]}")


def render_reports(reports: dict) -> str:
    return "\n\n".join(f"[{name}]\n{rep.table()}" for name, rep in reports.items())


def run_train_victims(cfg: ExperimentConfig, run_dir, clean: bool = False) -> dict:
    run_dir = Path(run_dir)
    prep = prepare(cfg)
    values = prep.data.values if clean else ensure_poisoned(cfg, run_dir).poisoned
    models = train_victims(cfg, values, prep.train_range)
    out = run_dir / "victims"
    out.mkdir(parents=True, exist_ok=True)
    tag = "clean" if clean else "poisoned"
    paths = {}
    for arch, model in models.items():
        paths[arch] = out / f"{tag}_{arch}.npz"
        save_checkpoint(model, paths[arch])
    return paths


def load_victims(run_dir, tag: str = "poisoned") -> dict:
    return {p.stem.split("_", 1)[1]: load_checkpoint(p)
            for p in sorted((Path(run_dir) / "victims").glob(f"{tag}_*.npz"))}


# -- stealth, vulnerability, sweep -------------------------------------------------------

def run_stealth(cfg: ExperimentConfig, run_dir):
    run_dir = Path(run_dir)
    artifacts = ensure_poisoned(cfg, run_dir)
    prep = prepare(cfg)
    report = stealth_eval(artifacts.poisoned, artifacts.mask, prep.train_range, prep.test_range,
                          cfg.dataset.window, arch=cfg.eval.detector_arch,
                          epochs=cfg.eval.detector_epochs, seed=cfg.seed,
                          clean_values=prep.data.values)
    write_json(dataclasses.asdict(report), run_dir / "stealth.json")
    return report


def run_fig2(cfg: ExperimentConfig, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    prep = prepare(cfg)
    m = cfg.model
    result = vulnerability_experiment(prep.data, cfg.attack_config, cfg.dataset.window,
                                      cfg.dataset.split_spec, groups=cfg.eval.groups,
                                      pattern=target_pattern(cfg), arch=m.victims[0],
                                      epochs=m.epochs, seed=cfg.seed, step_size=m.step_size)
    write_json(dataclasses.asdict(result), run_dir / "fig2.json")
    lines = [f"{'percentile':>10}{'poisoned':>10}{'MAE diff':>12}"]
    for q, n, d in zip(result.percentiles, result.poisoned_counts, result.mae_difference):
        lines.append(f"{q:>10.2f}{n:>10d}{d:>12.4f}")
    lines.append(f"spearman {result.spearman:.4f}")
    (run_dir / "fig2.txt").write_text("\n".join(lines) + "\n")
    plotting.plot_deciles(result.percentiles, result.mae_difference, run_dir / "fig2.png")
    return result


def sweep_row(cfg: ExperimentConfig) -> dict:
    """Standalone run: poison, then clean-trained and BackTime victims (no baselines).

    Returns the averaged BackTime row plus the clean-trained victims' MAE_A.
    """
    outcome = run_poison(cfg)
    res = outcome.result
    artifacts = PoisonArtifacts(res.poisoned.values, res.poisoned.poison_mask, res.plan,
                                res.generator)
    reports, _ = attack_evaluation(cfg, outcome.prepared, artifacts, baselines=())
    avg = reports["backtime"].average
    return {**dataclasses.asdict(avg), "clean_mae_attack": reports["clean"].average.mae_attack}


def ablation_sweep(axis: str, values, base: ExperimentConfig, run_dir=None) -> list:
    """Rerun the pipeline for each value of ``attack.<axis>``; a failed run is recorded
    with its error and the sweep continues."""
    if axis not in ("temporal_rate", "spatial_rate"):
        raise ConfigError(f"cannot sweep {axis!r}", fields=["eval.sweep_axis"])
    bad = [v for v in values if not 0 < v <= 1]
    if bad:
        raise ConfigError(f"sweep values must lie in (0, 1], got {bad}", fields=["eval.sweep_values"])
    rows = []
    for v in values:
        cfg = dataclasses.replace(base, attack=dataclasses.replace(base.attack, **{axis: v}))
        try:
            cfg.validate()
            row = {"axis": axis, "value": v, "status": "ok", **sweep_row(cfg)}
        except (BacktimeError, ValueError, RuntimeError) as exc:
            log.warning("sweep %s=%s failed: %s", axis, v, exc)
            row = {"axis": axis, "value": v, "status": "failed",
                   "error": f"{type(exc).__name__}: {exc}"}
        rows.append(row)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_records(rows, run_dir / "sweep.jsonl")
        (run_dir / "sweep.txt").write_text(render_sweep(rows) + "\n")
        plotting.plot_sweep(axis, [r["value"] for r in rows],
                            [r if r["status"] == "ok" else None for r in rows],
                            run_dir / "sweep.png")
    return rows


def render_sweep(rows) -> str:
    head = f"{'value':>8}{'MAE_C':>10}{'RMSE_C':>10}{'MAE_A':>10}{'RMSE_A':>10}{'clean MAE_A':>13}"
    lines = [head, "-" * len(head)]
    for r in rows:
        if r["status"] != "ok":
            lines.append(f"{r['value']:>8}  failed: {r['error']}")
            continue
        lines.append(f"{r['value']:>8}" + "".join(
            f"{r[k]:>10.4f}" for k in ("mae_clean", "rmse_clean", "mae_attack", "rmse_attack"))
            + f"{r['clean_mae_attack']:>13.4f}")
    return "\n".join(lines)


# -- report ------------------------------------------------------------------------------

def build_reports(records) -> dict:
    """Regroup metric records by strategy, dropping stored averages (recomputed)."""
    reports = {}
    for rec in records:
        if rec["name"] == "average":
            continue
        rep = reports.setdefault(rec["strategy"], MetricsReport(
            [], rec.get("seed", 0), rec.get("config_hash", ""), rec["strategy"]))
        rep.rows.append(MetricsRow(rec["name"], rec["mae_clean"], rec["rmse_clean"],
                                   rec["mae_attack"], rec["rmse_attack"]))
    return reports


def run_report(run_dir) -> str:
    run_dir = Path(run_dir)
    path = run_dir / "metrics.jsonl"
    if not path.exists():
        raise ConfigError(f"{path} not found; run `eval` first")
    records = read_records(path)
    reports = build_reports(records)
    stored = {r["strategy"]: r for r in records if r["name"] == "average"}
    for name, rep in reports.items():
        if name in stored:
            diff = np.abs(np.array(rep.average.values()) - np.array(
                [stored[name][k] for k in ("mae_clean", "rmse_clean", "mae_attack",
                                           "rmse_attack")])).max()
            if diff > 1e-9:
                log.warning("stored average for %s differs from recomputed by %g", name, diff)
    text = render_reports(reports)
    extras = []
    if (run_dir / "stealth.json").exists():
        st = read_json(run_dir / "stealth.json")
        extras.append(f"stealth ({st['detector']}): AUC {st['auc']:.4f}  F1 {st['f1']:.4f}")
    if (run_dir / "fig2.json").exists():
        extras.append(f"vulnerability spearman: {read_json(run_dir / 'fig2.json')['spearman']:.4f}")
    return "\n\n".join([text] + extras)
