"""Multivariate series container, windowing, splits, standardization and CSV I/O."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np

from .errors import (
    BoundaryError,
    CsvParseError,
    DegenerateVariableError,
    InputValidationError,
    SplitSizeError,
)


@dataclass(frozen=True)
class WindowSpec:
    input_len: int = 12
    output_len: int = 12

    def __post_init__(self):
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError(f"window lengths must be >= 1, got {self.input_len}/{self.output_len}")

    @property
    def total(self) -> int:
        return self.input_len + self.output_len


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass(frozen=True, eq=False)
class MtsDataset:
    """A T x N real matrix with one name per column. Values are read-only."""

    values: np.ndarray
    variable_names: tuple = field(default=())

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2:
            raise InputValidationError(f"expected a 2-D T x N matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise InputValidationError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        names = tuple(self.variable_names) or tuple(f"v{i}" for i in range(values.shape[1]))
        if len(names) != values.shape[1]:
            raise InputValidationError(
                f"{len(names)} variable names for {values.shape[1]} columns")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variable_names", names)

    @property
    def time_span(self) -> int:
        return self.values.shape[0]

    @property
    def num_variables(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "MtsDataset":
        return MtsDataset(values, self.variable_names)


def valid_timestamps(start: int, stop: int, spec: WindowSpec) -> np.ndarray:
    """Forecast origins t_i whose windows fit entirely inside rows [start, stop)."""
    lo, hi = start + spec.input_len, stop - spec.output_len
    if hi < lo:
        return np.arange(0)
    return np.arange(lo, hi + 1)


def slice_window(ds, t_i: int, spec: WindowSpec):
    """Return (history, future) = rows [t_i - t_in, t_i) and [t_i, t_i + t_out).

    ``ds`` may be an MtsDataset or a bare 2-D array.
    """
    values = ds.values if isinstance(ds, MtsDataset) else ds
    T = values.shape[0]
    if not spec.input_len <= t_i <= T - spec.output_len:
        raise BoundaryError(
            f"timestamp {t_i} outside valid range [{spec.input_len}, {T - spec.output_len}]")
    return values[t_i - spec.input_len:t_i], values[t_i:t_i + spec.output_len]


def stack_windows(values, timestamps, spec: WindowSpec):
    """Vectorized slice_window over many origins; works on numpy arrays and torch tensors."""
    timestamps = np.asarray(timestamps, dtype=np.int64)
    offsets_h = np.arange(-spec.input_len, 0)
    offsets_f = np.arange(0, spec.output_len)
    idx_h = timestamps[:, None] + offsets_h[None, :]
    idx_f = timestamps[:, None] + offsets_f[None, :]
    if len(timestamps) and (idx_h.min() < 0 or idx_f.max() >= values.shape[0]):
        raise BoundaryError(
            f"timestamps must lie in [{spec.input_len}, {values.shape[0] - spec.output_len}]")
    return values[idx_h], values[idx_f]


def fit_standardize(ds: MtsDataset, train_range):
    """Z-score every variable with population mean/std of rows ``train_range``."""
    start, stop = train_range
    if stop <= start:
        raise ValueError(f"empty train range {train_range}")
    train = ds.values[start:stop]
    mean = train.mean(axis=0)
    std = train.std(axis=0)  # population (ddof=0)
    for i, s in enumerate(std):
        if not s > 0:
            raise DegenerateVariableError(
                f"variable {ds.variable_names[i]!r} is constant on the train range")
    stats = StandardizationStats(mean=mean, std=std)
    return ds.with_values(stats.transform(ds.values)), stats


def split(ds, spec: SplitSpec = SplitSpec(), window: WindowSpec | None = None):
    """Chronological ranges (train, val, test); rounding remainder goes to test."""
    T = ds.time_span if isinstance(ds, MtsDataset) else int(ds)
    n_train = math.floor(spec.train_frac * T)
    n_val = math.floor(spec.val_frac * T)
    ranges = ((0, n_train), (n_train, n_train + n_val), (n_train + n_val, T))
    min_rows = window.total if window is not None else 1
    for name, (a, b) in zip(("train", "val", "test"), ranges):
        if b - a < min_rows:
            raise SplitSizeError(
                f"{name} split has {b - a} rows, need at least {min_rows} (T={T})")
    return ranges


@dataclass(frozen=True)
class SyntheticRecipe:
    """Generative knobs for :func:`generate_synthetic` (exposed in the config file)."""

    periods: tuple = (48.0, 336.0)
    second_amplitude: float = 0.5
    mixing: float = 0.3
    noise: float = 0.25
    noise_modulation: float = 0.5
    modulation_period: float = 500.0


def _seasonal_mixture(N, T, rng, recipe):
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(2, N))
    mix = rng.normal(size=(N, N)) / np.sqrt(N)
    levels = rng.uniform(-5.0, 5.0, size=N)
    scales = rng.uniform(0.5, 3.0, size=N)
    t = np.arange(T, dtype=np.float64)[:, None]
    p1, p2 = recipe.periods
    seasonal = (np.sin(2 * np.pi * t / p1 + phases[0])
                + recipe.second_amplitude * np.sin(2 * np.pi * t / p2 + phases[1]))
    mixed = (1.0 - recipe.mixing) * seasonal + recipe.mixing * seasonal @ mix
    return mixed, levels, scales


def generate_synthetic(num_vars: int, span: int, seed: int = 0,
                       recipe: SyntheticRecipe = SyntheticRecipe()) -> MtsDataset:
    """Deterministic seasonal benchmark.

    Each variable is two shared sinusoids (periods ``recipe.periods``) with its own
    phases, linearly mixed with the other variables, plus Gaussian noise whose
    scale drifts slowly (``noise_modulation``) so some stretches are harder to
    forecast than others. Finally each column gets its own level and scale.
    """
    if num_vars < 2 or span < 500:
        raise ValueError(f"need N >= 2 and T >= 500, got N={num_vars}, T={span}")
    rng = np.random.default_rng(seed)
    mixed, levels, scales = _seasonal_mixture(num_vars, span, rng, recipe)
    eps = rng.normal(size=(span, num_vars))
    t = np.arange(span, dtype=np.float64)[:, None]
    envelope = 1.0 + recipe.noise_modulation * np.sin(2 * np.pi * t / recipe.modulation_period)
    values = levels + scales * (mixed + recipe.noise * envelope * eps)
    return MtsDataset(values, tuple(f"v{i}" for i in range(num_vars)))


def save_csv(ds: MtsDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ds.variable_names)
        for row in ds.values:
            writer.writerow([repr(float(v)) for v in row])


def load_csv(path, reject_constant: bool = True) -> MtsDataset:
    """Parse a header + numeric-rows CSV. Errors cite 1-based (line, column)."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise CsvParseError(f"{path}: empty file", row=1, col=None)
    header = [h.strip() for h in rows[0]]
    if len(rows) < 2:
        raise CsvParseError(f"{path}: no data rows", row=2, col=None)
    data = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CsvParseError(
                f"{path}: row {r} has {len(row)} cells, header has {len(header)}", row=r, col=None)
        for c, cell in enumerate(row, start=1):
            try:
                data[r - 2, c - 1] = float(cell)
            except ValueError:
                raise CsvParseError(
                    f"{path}: non-numeric cell {cell!r} at ({r},{c})", row=r, col=c) from None
    if not np.all(np.isfinite(data)):
        r, c = np.argwhere(~np.isfinite(data))[0]
        raise CsvParseError(f"{path}: non-finite value at ({r + 2},{c + 1})", row=r + 2, col=c + 1)
    if reject_constant:
        for c in range(data.shape[1]):
            if np.all(data[:, c] == data[0, c]):
                raise DegenerateVariableError(f"{path}: variable {header[c]!r} is constant")
    return MtsDataset(data, tuple(header))


def save_mask(mask: np.ndarray, path) -> None:
    np.savetxt(path, mask.astype(np.uint8), fmt="%d", delimiter=",")


def load_mask(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.uint8, ndmin=2).astype(bool)

