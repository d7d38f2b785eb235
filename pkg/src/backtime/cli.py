"""Command-line entry point: ``backtime <subcommand> [--config FILE] [--set key=value ...]``."""

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ARTIFACT_ENV, artifact_root, load_config
from .errors import BacktimeError

EXIT_CODES = {
    "config": 3,
    "parse": 4, "data": 4, "shape": 4, "input": 4, "boundary": 4,
    "budget": 5, "injection": 5, "search": 5,
    "divergence": 6, "stage": 6,
    "metric": 7,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backtime",
        description="Poison a multivariate series with learned backdoor triggers and "
                    "evaluate forecasters trained on it.",
        epilog=f"Artifacts go to --run-dir, or under ${ARTIFACT_ENV} (default ./artifacts).")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="YAML config file (defaults when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key, e.g. attack.norm_weight=5")
        p.add_argument("--run-dir", type=Path, help="artifact directory for this run")
        return p

    add("poison", "run the bi-level attack and write the poisoned dataset")
    tv = add("train-victim", "train victim forecasters and save checkpoints")
    tv.add_argument("--clean", action="store_true", help="train on the clean series instead")
    add("eval", "clean and attack metrics for clean-trained, poisoned and baseline victims")
    add("stealth", "residual-detector F1 / ROC-AUC on the poisoned training split")
    add("experiment-fig2", "timestamp vulnerability by clean-model error percentile")
    add("sweep", "injection-rate ablation over eval.sweep_axis / eval.sweep_values")
    add("report", "print the metrics tables of a finished run")
    return parser


def default_run_dir(cfg) -> Path:
    return artifact_root() / f"seed{cfg.seed}-{cfg.poison_hash()}"


def dispatch(args) -> str:
    cfg = load_config(args.config, args.overrides)
    run_dir = args.run_dir or default_run_dir(cfg)
    if args.command == "poison":
        outcome = pipeline.run_poison(cfg, run_dir)
        s = outcome.summary
        return (f"poisoned {s['poisoned_timestamps']} timestamps on variables "
                f"{s['target_variables']}; max |g| {s['trigger_max_abs']:.4f}\n"
                f"artifacts in {run_dir}")
    if args.command == "train-victim":
        paths = pipeline.run_train_victims(cfg, run_dir, clean=args.clean)
        return "\n".join(f"{arch}: {path}" for arch, path in paths.items())
    if args.command == "eval":
        return pipeline.render_reports(pipeline.run_eval(cfg, run_dir))
    if args.command == "stealth":
        r = pipeline.run_stealth(cfg, run_dir)
        return f"detector {r.detector}: ROC-AUC {r.auc:.4f}  best F1 {r.f1:.4f}"
    if args.command == "experiment-fig2":
        pipeline.run_fig2(cfg, run_dir)
        return (Path(run_dir) / "fig2.txt").read_text().rstrip()
    if args.command == "sweep":
        rows = pipeline.ablation_sweep(cfg.eval.sweep_axis, cfg.eval.sweep_values, cfg, run_dir)
        return pipeline.render_sweep(rows)
    return pipeline.run_report(run_dir)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        print(dispatch(args))
    except BacktimeError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 8
    return 0


if __name__ == "__main__":
    sys.exit(main())
