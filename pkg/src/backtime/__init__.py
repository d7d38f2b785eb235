"""Backdoor poisoning of multivariate time-series forecasters with learned triggers."""

from .bilevel import BilevelSchedule, run_backtime
from .config import ExperimentConfig, load_config
from .data import MtsDataset, SplitSpec, SyntheticRecipe, WindowSpec, generate_synthetic
from .threat import AttackConfig, PoisonPlan, TargetPattern, make_pattern

__all__ = [
    "AttackConfig", "BilevelSchedule", "ExperimentConfig", "MtsDataset", "PoisonPlan",
    "SplitSpec", "SyntheticRecipe", "TargetPattern", "WindowSpec", "generate_synthetic",
    "load_config", "make_pattern", "run_backtime",
]

__version__ = "0.1.0"
