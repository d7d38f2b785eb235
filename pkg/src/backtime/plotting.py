"""Static figures written by the CLI (PNG via the Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_trigger_pattern(triggers, pattern, path, names=None):
    """Mean generated trigger per target variable followed by the target pattern."""
    trig = np.asarray(triggers, dtype=np.float64)
    if trig.ndim == 3:
        trig = trig.mean(axis=0)
    p = np.asarray(getattr(pattern, "values", pattern), dtype=np.float64)
    t_tgr = trig.shape[0]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    steps = np.arange(-t_tgr, 0)
    for j in range(trig.shape[1]):
        label = names[j] if names is not None else f"target {j}"
        ax.plot(steps, trig[:, j], marker="o", alpha=0.7, label=label)
    ax.plot(np.arange(len(p)), p, color="black", lw=2, marker="s", label="pattern")
    ax.axvline(-0.5, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("step relative to poisoned timestamp")
    ax.set_ylabel("offset from base (std units)")
    ax.legend(fontsize=7, ncol=2)
    _save(fig, path)


def plot_predictions(history, forecast, target, path, title=""):
    """One triggered input for a single variable: history, forecast, and ``b + p``."""
    history, forecast, target = (np.asarray(a, dtype=np.float64) for a in
                                 (history, forecast, target))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    h = np.arange(-len(history), 0)
    ax.plot(h, history, color="tab:blue", label="triggered history")
    ax.plot(np.arange(len(forecast)), forecast, color="tab:orange", label="forecast")
    ax.plot(np.arange(len(target)), target, color="black", ls="--", label="base + pattern")
    ax.set_title(title)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_deciles(percentiles, differences, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.asarray(percentiles)
    width = 0.8 * (x[1] - x[0]) if len(x) > 1 else 0.08
    ax.bar(x, differences, width=width, color="tab:red")
    ax.axhline(0, color="black", lw=0.8)
    ax.set_xlabel("clean-model MAE percentile")
    ax.set_ylabel("MAE(attacked) - MAE(clean)")
    _save(fig, path)


def plot_sweep(axis, values, rows, path):
    """Sweep curves; ``rows`` are dicts with the four metric keys (None for failures)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("mae_clean", "rmse_clean", "mae_attack", "rmse_attack"):
        ys = [np.nan if r is None else r[key] for r in rows]
        ax.plot(values, ys, marker="o", label=key)
    ax.set_xlabel(axis)
    ax.set_ylabel("error (std units)")
    ax.legend(fontsize=8)
    _save(fig, path)
