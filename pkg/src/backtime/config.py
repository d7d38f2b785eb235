"""Structured experiment configuration: YAML file, dotted overrides, validation."""

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .bilevel import BilevelSchedule
from .data import SplitSpec, SyntheticRecipe, WindowSpec
from .errors import ConfigError
from .evaluation import config_hash
from .forecasters import ARCHITECTURES
from .threat import AttackConfig

ARTIFACT_ENV = "BACKTIME_ARTIFACTS"


@dataclass
class DatasetSection:
    source: str = "synthetic"  # or "csv"
    path: str | None = None
    num_variables: int = 8
    span: int = 2000
    periods: list = field(default_factory=lambda: [48.0, 336.0])
    second_amplitude: float = 0.5
    mixing: float = 0.3
    noise: float = 0.25
    noise_modulation: float = 0.5
    modulation_period: float = 500.0
    input_len: int = 12
    output_len: int = 12
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def problems(self):
        out = []
        if self.source not in ("synthetic", "csv"):
            out.append(("source", "must be 'synthetic' or 'csv'"))
        if self.source == "csv" and not self.path:
            out.append(("path", "required when source is 'csv'"))
        if self.source == "synthetic":
            if self.num_variables < 2:
                out.append(("num_variables", "must be >= 2"))
            if self.span < 500:
                out.append(("span", "must be >= 500"))
            if len(self.periods) != 2 or min(self.periods) <= 0:
                out.append(("periods", "must be two positive numbers"))
            if self.noise < 0:
                out.append(("noise", "must be >= 0"))
            if not 0 <= self.mixing <= 1:
                out.append(("mixing", "must lie in [0, 1]"))
        if self.input_len < 1:
            out.append(("input_len", "must be >= 1"))
        if self.output_len < 1:
            out.append(("output_len", "must be >= 1"))
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fracs) <= 0 or abs(sum(fracs) - 1.0) > 1e-9:
            out.append(("train_fraction", "split fractions must be positive and sum to 1"))
        return out

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.input_len, self.output_len)

    @property
    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_fraction, self.val_fraction, self.test_fraction)

    @property
    def recipe(self) -> SyntheticRecipe:
        return SyntheticRecipe(tuple(float(p) for p in self.periods), self.second_amplitude,
                               self.mixing, self.noise, self.noise_modulation,
                               self.modulation_period)


@dataclass
class AttackSection:
    trigger_len: int = 4
    pattern_len: int = 7
    pre_window: int = 6
    temporal_rate: float = 0.05
    spatial_rate: float = 0.5
    trigger_budget: float = 0.2
    pattern_budget: float = 0.4
    norm_weight: float = 25.0
    freq_keep: int = 200
    eta: str = "identity"
    pattern_shape: str = "cone"
    target_variables: list | None = None

    def to_attack_config(self) -> AttackConfig:
        kwargs = {f.name: getattr(self, f.name) for f in fields(AttackConfig)}
        return AttackConfig(**kwargs)

    def problems(self, window=None):
        return self.to_attack_config().problems(window)


@dataclass
class ModelSection:
    """Victim forecasters trained by ``train-victim`` and ``eval``."""

    victims: list = field(default_factory=lambda: ["mlp"])
    hidden: int | None = None
    epochs: int = 30
    step_size: float = 1e-3
    batch_size: int = 64

    def problems(self):
        out = []
        bad = [v for v in self.victims if v not in ARCHITECTURES]
        if not self.victims or bad:
            out.append(("victims", f"choose from {ARCHITECTURES}, got {self.victims}"))
        if self.hidden is not None and self.hidden < 1:
            out.append(("hidden", "must be >= 1"))
        if self.epochs < 1:
            out.append(("epochs", "must be >= 1"))
        if self.step_size <= 0:
            out.append(("step_size", "must be > 0"))
        if self.batch_size < 1:
            out.append(("batch_size", "must be >= 1"))
        return out


@dataclass
class ScheduleSection:
    warmup_epochs: int = 10
    train_epochs: int = 30
    surrogate_step_size: float = 1e-3
    generator_step_size: float = 1e-2
    generator_steps: int = 1
    batch_size: int = 64
    surrogate_arch: str = "tiny_attention"

    def to_schedule(self, seed: int) -> BilevelSchedule:
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        return BilevelSchedule(seed=seed, **kwargs)

    def problems(self):
        out = BilevelSchedule(**{f.name: getattr(self, f.name) for f in fields(self)}).problems()
        if self.surrogate_arch not in ARCHITECTURES:
            out.append(("surrogate_arch", f"choose from {ARCHITECTURES}"))
        return out


@dataclass
class EvalSection:
    attack_points: int = 50
    baselines: list = field(default_factory=lambda: ["random"])
    detector_arch: str = "mlp"
    detector_epochs: int = 20
    groups: int = 10
    sweep_axis: str = "temporal_rate"
    sweep_values: list = field(default_factory=lambda: [0.015, 0.03, 0.05])

    def problems(self):
        out = []
        if self.attack_points < 1:
            out.append(("attack_points", "must be >= 1"))
        bad = [b for b in self.baselines if b not in ("random", "inverse", "manhattan")]
        if bad:
            out.append(("baselines", f"unknown baselines {bad}"))
        if self.detector_arch not in ARCHITECTURES:
            out.append(("detector_arch", f"choose from {ARCHITECTURES}"))
        if self.detector_epochs < 1:
            out.append(("detector_epochs", "must be >= 1"))
        if self.groups < 2:
            out.append(("groups", "must be >= 2"))
        if self.sweep_axis not in ("temporal_rate", "spatial_rate"):
            out.append(("sweep_axis", "must be temporal_rate or spatial_rate"))
        if not self.sweep_values or any(not 0 < v <= 1 for v in self.sweep_values):
            out.append(("sweep_values", "values must lie in (0, 1]"))
        return out


def _type_problems(section) -> list:
    """Fields whose value does not match the type of their default."""
    out = []
    for f in fields(section):
        default = f.default_factory() if f.default is dataclasses.MISSING else f.default
        value = getattr(section, f.name)
        if default is None:
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        else:
            ok = isinstance(value, (list, tuple))
        if not ok:
            out.append((f.name, f"expected {type(default).__name__}, got {value!r}"))
    return out


SECTIONS = {
    "dataset": DatasetSection,
    "attack": AttackSection,
    "model": ModelSection,
    "schedule": ScheduleSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    attack: AttackSection = field(default_factory=AttackSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        unknown = []
        kwargs = {}
        if "seed" in raw:
            kwargs["seed"] = raw.pop("seed")
        for name, section_cls in SECTIONS.items():
            body = raw.pop(name, None) or {}
            if not isinstance(body, dict):
                unknown.append(f"{name} (expected a mapping)")
                continue
            known = {f.name for f in fields(section_cls)}
            unknown += [f"{name}.{k}" for k in body if k not in known]
            kwargs[name] = section_cls(**{k: v for k, v in body.items() if k in known})
        unknown += list(raw)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}", fields=unknown)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def problems(self) -> list:
        found = []
        if not isinstance(self.seed, int) or self.seed < 0:
            found.append(("seed", "must be a non-negative integer"))
        typed = {name: _type_problems(getattr(self, name)) for name in SECTIONS}
        for name in SECTIONS:
            section = getattr(self, name)
            items = typed[name]
            if not items:
                if name == "attack":
                    window_ok = not typed["dataset"] and not self.dataset.problems()
                    items = section.problems(self.dataset.window if window_ok else None)
                else:
                    items = section.problems()
            found += [(f"{name}.{f}", msg) for f, msg in items]
        return found

    def validate(self) -> "ExperimentConfig":
        found = self.problems()
        if found:
            raise ConfigError("invalid config: " + "; ".join(f"{f}: {m}" for f, m in found),
                              fields=[f for f, _ in found])
        return self

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def poison_hash(self) -> str:
        """Hash of the parts that determine the poisoned dataset (names run directories)."""
        d = self.to_dict()
        return config_hash({k: d[k] for k in ("seed", "dataset", "attack", "schedule")})

    @property
    def attack_config(self) -> AttackConfig:
        return self.attack.to_attack_config()

    @property
    def bilevel_schedule(self) -> BilevelSchedule:
        return self.schedule.to_schedule(self.seed)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a YAML file (or defaults when ``path`` is None), apply ``key=value``
    overrides and validate."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = apply_overrides(raw, overrides)
    return ExperimentConfig.from_dict(raw).validate()


def apply_overrides(raw: dict, overrides) -> dict:
    """Set dotted keys, e.g. ``attack.norm_weight=0.5``; values are parsed as YAML."""
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value", fields=[item])
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section", fields=[key])
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def artifact_root(default="artifacts") -> Path:
    return Path(os.environ.get(ARTIFACT_ENV, default))
