"""Graph-based trigger generator.

Static graph: low-frequency DFT coefficients of every target series go through a
shared MLP; pairwise cosine similarity of the embeddings is the weighted graph.
Triggers: a two-layer GCN over the ``t_bef`` rows preceding each trigger, a
per-node linear head to ``t_tgr`` values, then ``budget * tanh``.
"""

import json
import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ShapeError
from .forecasters import DTYPE, as_tensor

log = logging.getLogger(__name__)


def dft_lowpass(x, k: int) -> np.ndarray:
    """Interleaved (re, im) of the ``k`` lowest non-negative DFT frequencies of ``x``.

    Unnormalized forward transform, so a constant ``c`` gives ``c * T`` at DC.
    ``k`` above ``T // 2 + 1`` is clamped.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if x.size < 2:
        raise ValueError("series needs at least 2 points")
    limit = x.size // 2 + 1
    if k > limit:
        log.info("clamping k=%d to %d for a series of length %d", k, limit, x.size)
        k = limit
    coeffs = np.fft.rfft(x)[:k]
    out = np.empty(2 * k)
    out[0::2] = coeffs.real
    out[1::2] = coeffs.imag
    return out


def spectral_features(values, variables, k: int) -> np.ndarray:
    """Stack ``dft_lowpass`` of each selected column: shape (|S|, 2k')."""
    values = np.asarray(values)
    return np.stack([dft_lowpass(values[:, v], k) for v in variables])


def cosine_graph(embeddings: torch.Tensor) -> torch.Tensor:
    """Symmetric cosine-similarity matrix with unit diagonal.

    A zero embedding has similarity 0 to every other node.
    """
    norms = embeddings.norm(dim=1)
    nonzero = norms > 0
    unit = embeddings / torch.where(nonzero, norms, torch.ones_like(norms))[:, None]
    A = unit @ unit.T
    A = 0.5 * (A + A.T)
    A = torch.where(nonzero[:, None] & nonzero[None, :], A, torch.zeros_like(A))
    A = A.clamp(-1.0, 1.0)
    eye = torch.eye(A.shape[0], dtype=A.dtype)
    return A * (1 - eye) + eye


def propagation_matrix(A: torch.Tensor) -> torch.Tensor:
    """D^-1 (A + I) with D the row sums of |A + I|; keeps negative similarities."""
    M = A + torch.eye(A.shape[0], dtype=A.dtype)
    return M / M.abs().sum(dim=1, keepdim=True)


class TriggerGenerator(nn.Module):
    """Learnable trigger source for a fixed set of target variables."""

    def __init__(self, features, pre_window: int, trigger_len: int, budget: float,
                 hidden: int = 64, embed: int = 64):
        super().__init__()
        features = as_tensor(features)
        if features.dim() != 2:
            raise ShapeError(f"features must be (|S|, 2k), got {tuple(features.shape)}")
        self.num_targets, self.freq_dim = features.shape
        self.pre_window = pre_window
        self.trigger_len = trigger_len
        self.budget = float(budget)
        self.hidden = hidden
        self.embed_dim = embed
        # unnormalized DFT magnitudes grow like T; this fixed factor keeps MLP inputs O(1)
        self.feature_scale = 1.0 / max(float(features.abs().max()), 1e-12)
        self.register_buffer("features", features.clone())
        self.mlp = nn.Sequential(nn.Linear(self.freq_dim, hidden, dtype=DTYPE), nn.ReLU(),
                                 nn.Linear(hidden, embed, dtype=DTYPE))
        self.gcn1 = nn.Linear(pre_window, hidden, dtype=DTYPE)
        self.gcn2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.head = nn.Linear(hidden, trigger_len, dtype=DTYPE)

    def graph(self) -> torch.Tensor:
        return cosine_graph(self.mlp(self.features * self.feature_scale))

    def raw_output(self, slabs: torch.Tensor, P: torch.Tensor | None = None) -> torch.Tensor:
        """Pre-tanh output for slabs of shape (B, t_bef, |S|) -> (B, t_tgr, |S|).

        ``P`` is the propagation matrix; pass it to reuse one graph across calls.
        """
        if slabs.dim() == 2:
            return self.raw_output(slabs[None], P)[0]
        if tuple(slabs.shape[1:]) != (self.pre_window, self.num_targets):
            raise ShapeError(f"expected slab (B, {self.pre_window}, {self.num_targets}), "
                             f"got {tuple(slabs.shape)}")
        if P is None:
            P = propagation_matrix(self.graph())
        x = slabs.transpose(1, 2)
        h = torch.relu(P @ self.gcn1(x))
        h = torch.relu(P @ self.gcn2(h))
        return self.head(h).transpose(1, 2)

    def forward(self, slabs: torch.Tensor, P: torch.Tensor | None = None) -> torch.Tensor:
        return self.budget * torch.tanh(self.raw_output(slabs, P))

    def meta(self) -> dict:
        return {"pre_window": self.pre_window, "trigger_len": self.trigger_len,
                "budget": self.budget, "hidden": self.hidden, "embed": self.embed_dim}


def build_generator(clean_train_values, variables, cfg, seed: int = 0,
                    hidden: int = 64) -> TriggerGenerator:
    feats = spectral_features(clean_train_values, variables, cfg.freq_keep)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TriggerGenerator(feats, cfg.pre_window, cfg.trigger_len, cfg.trigger_budget,
                                hidden=hidden, embed=hidden)


def build_graph(features, mlp: nn.Module) -> np.ndarray:
    with torch.no_grad():
        return cosine_graph(mlp(as_tensor(features))).numpy()


def history_slab(values, t: int, variables, cfg):
    """Rows [t - t_bef - t_tgr, t - t_tgr) of the target columns."""
    lo = t - cfg.pre_window - cfg.trigger_len
    if lo < 0:
        raise ShapeError(f"not enough history before t={t} for a {cfg.pre_window}-row slab")
    return values[lo:t - cfg.trigger_len][:, list(variables)]


def generate_trigger(generator: TriggerGenerator, history, cfg=None) -> np.ndarray:
    """Inference on one (t_bef x |S|) slab; returns the (t_tgr x |S|) trigger."""
    with torch.no_grad():
        return generator(as_tensor(history)).numpy()


def normalization_loss(g):
    """Mean over timestamps and target columns of |sum over trigger steps|.

    ``g`` is (t_tgr, |S|) or (B, t_tgr, |S|), numpy or torch.
    """
    if isinstance(g, torch.Tensor):
        return g.sum(dim=-2).abs().mean()
    return float(np.abs(np.asarray(g).sum(axis=-2)).mean())


def save_generator(generator: TriggerGenerator, variables, path) -> None:
    blocks = {k: v.detach().numpy() for k, v in generator.state_dict().items()}
    with torch.no_grad():
        blocks["__graph__"] = generator.graph().numpy()
    meta = dict(generator.meta(), variables=[int(v) for v in variables])
    np.savez(Path(path), __meta__=np.array(json.dumps(meta)), **blocks)


def load_generator(path):
    """Returns ``(generator, variables)``."""
    with np.load(Path(path)) as data:
        meta = json.loads(str(data["__meta__"]))
        gen = TriggerGenerator(data["features"], meta["pre_window"], meta["trigger_len"],
                               meta["budget"], hidden=meta["hidden"], embed=meta["embed"])
        state = {k: torch.as_tensor(data[k]) for k in data.files
                 if k not in ("__meta__", "__graph__")}
    gen.load_state_dict(state)
    return gen, tuple(meta["variables"])


def save_graph_edges(A, names, path) -> None:
    """Edge list ``source target weight`` (upper triangle) for plotting tools."""
    A = np.asarray(A)
    lines = ["source target weight"]
    for i in range(A.shape[0]):
        for j in range(i + 1, A.shape[0]):
            lines.append(f"{names[i]} {names[j]} {A[i, j]:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")
