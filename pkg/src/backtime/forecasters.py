"""Small stand-in forecasters, the smooth-L1 loss and the training/evaluation loops.

All models map a batch of histories ``(B, t_in, N)`` to forecasts ``(B, t_out, N)``
and run in float64 so gradients can be checked against finite differences.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import WindowSpec, stack_windows
from .errors import DivergenceError, InputValidationError, ShapeError

DTYPE = torch.float64
ARCHITECTURES = ("mlp", "temporal_conv", "tiny_attention")


class Forecaster(nn.Module):
    """Base class. With ``anchored`` the body sees the history minus its last row and
    that row is added back to the forecast (last-value normalization)."""

    architecture_tag = "base"

    def __init__(self, spec: WindowSpec, num_variables: int, hidden: int = 64,
                 anchored: bool = True):
        super().__init__()
        self.spec = spec
        self.num_variables = num_variables
        self.hidden = hidden
        self.anchored = anchored

    def check_input(self, x):
        expect = (self.spec.input_len, self.num_variables)
        if x.dim() != 3 or tuple(x.shape[1:]) != expect:
            raise ShapeError(f"expected history of shape (B, {expect[0]}, {expect[1]}), "
                             f"got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise InputValidationError("history contains NaN or Inf")

    def forward(self, x):
        self.check_input(x)
        if not self.anchored:
            return self.body(x)
        last = x[:, -1:, :]
        return self.body(x - last) + last

    def body(self, x):
        raise NotImplementedError


class MLPForecaster(Forecaster):
    """Flattened window -> hidden ReLU layer -> flattened forecast."""

    architecture_tag = "mlp"

    def __init__(self, spec, num_variables, hidden=64, anchored=True):
        super().__init__(spec, num_variables, hidden, anchored)
        n_in = spec.input_len * num_variables
        self.hidden_layer = nn.Linear(n_in, hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, spec.output_len * num_variables, dtype=DTYPE)

    def body(self, x):
        h = torch.relu(self.hidden_layer(x.flatten(1)))
        return self.out(h).view(-1, self.spec.output_len, self.num_variables)


class TemporalConvForecaster(Forecaster):
    """Depthwise temporal convolutions per variable, a shared time-to-horizon head,
    and a linear variable-mixing correction."""

    architecture_tag = "temporal_conv"

    def __init__(self, spec, num_variables, hidden=64, anchored=True, channels=4, kernel=3):
        super().__init__(spec, num_variables, hidden, anchored)
        self.channels = channels
        self.conv1 = nn.Conv1d(num_variables, num_variables * channels, kernel,
                               padding=kernel // 2, groups=num_variables, dtype=DTYPE)
        self.conv2 = nn.Conv1d(num_variables * channels, num_variables * channels, kernel,
                               padding=kernel // 2, groups=num_variables, dtype=DTYPE)
        self.head = nn.Linear(channels * spec.input_len, spec.output_len, dtype=DTYPE)
        self.skip = nn.Linear(spec.input_len, spec.output_len, dtype=DTYPE)
        self.mix = nn.Linear(num_variables, num_variables, dtype=DTYPE)

    def body(self, x):
        B = x.shape[0]
        z = x.transpose(1, 2)  # (B, N, t_in)
        h = torch.relu(self.conv1(z))
        h = torch.relu(self.conv2(h)) + h
        h = h.view(B, self.num_variables, self.channels * self.spec.input_len)
        y = self.head(h) + self.skip(z)  # (B, N, t_out)
        y = y.transpose(1, 2)
        return y + self.mix(y)


class TinyAttentionForecaster(Forecaster):
    """One single-head self-attention block over time steps, then a linear readout."""

    architecture_tag = "tiny_attention"

    def __init__(self, spec, num_variables, hidden=32, anchored=True):
        super().__init__(spec, num_variables, hidden, anchored)
        d = hidden
        self.embed = nn.Linear(num_variables, d, dtype=DTYPE)
        self.position = nn.Parameter(torch.randn(spec.input_len, d, dtype=DTYPE) * 0.02)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.proj = nn.Linear(d, d, dtype=DTYPE)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d, dtype=DTYPE), nn.ReLU(),
                                 nn.Linear(2 * d, d, dtype=DTYPE))
        self.readout = nn.Linear(spec.input_len * d, spec.output_len * num_variables, dtype=DTYPE)
        self.skip = nn.Linear(spec.input_len * num_variables,
                              spec.output_len * num_variables, dtype=DTYPE)

    def body(self, x):
        B, L, _ = x.shape
        h = self.embed(x) + self.position
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.hidden), dim=-1)
        h = h + self.proj(att @ v)
        h = h + self.ffn(h)
        y = self.readout(h.flatten(1)) + self.skip(x.flatten(1))
        return y.view(B, self.spec.output_len, self.num_variables)


_MODELS = {
    "mlp": MLPForecaster,
    "temporal_conv": TemporalConvForecaster,
    "tiny_attention": TinyAttentionForecaster,
}


def build_model(arch: str, spec: WindowSpec, num_variables: int, seed: int = 0,
                hidden: int | None = None, anchored: bool = True) -> Forecaster:
    if arch not in _MODELS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    kwargs = {"anchored": anchored} if hidden is None else {"hidden": hidden, "anchored": anchored}
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _MODELS[arch](spec, num_variables, **kwargs)


def smooth_l1(pred, target, delta: float = 1.0):
    """Mean of 0.5 d^2 / delta where |d| < delta, |d| - 0.5 delta elsewhere."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    d = (pred - target).abs()
    return torch.where(d < delta, 0.5 * d * d / delta, d - 0.5 * delta).mean()


def mse(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


@dataclass
class TrainState:
    model: Forecaster
    step_size: float = 2e-4
    seed: int = 0
    batch_size: int = 64
    shuffle: bool = False
    epoch: int = 0
    optimizer: torch.optim.Optimizer = field(default=None, repr=False)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.step_size)


def make_train_state(arch, spec, num_variables, seed=0, step_size=2e-4, batch_size=64,
                     shuffle=False, hidden=None, anchored=True) -> TrainState:
    model = build_model(arch, spec, num_variables, seed=seed, hidden=hidden, anchored=anchored)
    return TrainState(model, step_size=step_size, seed=seed, batch_size=batch_size,
                      shuffle=shuffle)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    x = np.asarray(x)
    if not x.flags.writeable:
        x = x.copy()
    return torch.as_tensor(x, dtype=DTYPE)


def windows(values, timestamps, spec: WindowSpec):
    """(histories, futures) tensors for the given origins of ``values``."""
    v = as_tensor(values)
    return stack_windows(v, timestamps, spec)


def train_epoch(state: TrainState, window_set, loss=smooth_l1):
    """One pass over ``window_set = (histories, futures)`` in mini-batches.

    Batches are chronological unless ``state.shuffle``; the shuffle order is a
    function of (seed, epoch). Returns the sample-weighted mean loss.
    """
    H, F = window_set
    n = H.shape[0]
    if n == 0:
        raise ValueError("train_epoch needs at least one window")
    order = torch.arange(n)
    if state.shuffle:
        gen = torch.Generator().manual_seed(state.seed * 100_003 + state.epoch)
        order = torch.randperm(n, generator=gen)
    model = state.model
    model.train()
    total = 0.0
    for b, start in enumerate(range(0, n, state.batch_size)):
        idx = order[start:start + state.batch_size]
        state.optimizer.zero_grad(set_to_none=True)
        value = loss(model(H[idx]), F[idx])
        if not torch.isfinite(value):
            raise DivergenceError(
                f"non-finite loss {value.item()} at epoch {state.epoch}, batch {b} "
                f"(step size {state.step_size})")
        value.backward()
        if state.step_size != 0:
            state.optimizer.step()
        total += value.item() * len(idx)
    state.epoch += 1
    return total / n


def predict(model: Forecaster, histories, batch_size: int = 512) -> torch.Tensor:
    H = as_tensor(histories)
    if H.dim() == 2:
        return predict(model, H[None], batch_size)[0]
    if len(H) == 0:
        return H.new_zeros((0, model.spec.output_len, model.num_variables))
    model.eval()
    with torch.no_grad():
        return torch.cat([model(H[i:i + batch_size]) for i in range(0, len(H), batch_size)])


def forward(model: Forecaster, history) -> np.ndarray:
    """Single-window inference on a (t_in x N) array."""
    return predict(model, history).numpy()


def evaluate(model, values, timestamps, spec: WindowSpec, metric: str = "mae",
             variables=None, horizon: int | None = None) -> dict:
    """Per-origin error map ``{t_i: error}`` of ``model`` on ``values``.

    ``variables`` and ``horizon`` restrict the compared block to some columns and
    the first ``horizon`` forecast steps.
    """
    timestamps = [int(t) for t in timestamps]
    H, F = windows(values, timestamps, spec)
    P = predict(model, H)
    if variables is not None:
        cols = torch.as_tensor(list(variables), dtype=torch.long)
        P, F = P[..., cols], F[..., cols]
    if horizon is not None:
        P, F = P[:, :horizon], F[:, :horizon]
    diff = (P - F).flatten(1)
    if metric == "mae":
        err = diff.abs().mean(dim=1)
    elif metric == "rmse":
        err = diff.pow(2).mean(dim=1).sqrt()
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return dict(zip(timestamps, err.tolist()))


def flat_parameters(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).numpy()


def save_checkpoint(model: Forecaster, path) -> None:
    """Named parameter blocks plus architecture metadata in one .npz file."""
    meta = {"arch": model.architecture_tag, "input_len": model.spec.input_len,
            "output_len": model.spec.output_len, "num_variables": model.num_variables,
            "hidden": model.hidden, "anchored": model.anchored}
    blocks = {name: t.detach().numpy() for name, t in model.state_dict().items()}
    np.savez(Path(path), __meta__=np.array(json.dumps(meta)), **blocks)


def load_checkpoint(path) -> Forecaster:
    with np.load(Path(path)) as data:
        meta = json.loads(str(data["__meta__"]))
        spec = WindowSpec(meta["input_len"], meta["output_len"])
        model = build_model(meta["arch"], spec, meta["num_variables"], hidden=meta["hidden"],
                            anchored=meta.get("anchored", True))
        state = {k: torch.as_tensor(data[k]) for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    return model
