"""Bi-dimensional attention network predicting the corrupting noise.

The network maps a set of function evaluations — clean inputs x ∈ ℝ^{N×D} and
corrupted targets y_t ∈ ℝ^N at diffusion step t — to a noise estimate
ε̂ ∈ ℝ^N. Each (input coordinate, target) pair (x_{n,d}, y_n) is lifted to H
channels, giving an N×D×H grid; L blocks then interleave multi-head
self-attention along the point axis (N) and along the feature axis (D) with a
GeLU feed-forward sublayer (hidden size 4H), all pre-layer-normalized (learned
gain and bias per norm site) with residual connections and an additively
injected sinusoidal embedding of t/T. The head averages the grid over the
feature axis and projects each point to a scalar.

Consequences of this construction, relied on throughout:

* permuting points permutes the output the same way;
* permuting feature columns leaves the output unchanged (feature-axis mean);
* parameter shapes are independent of both N and D, so one parameter set
  serves any set size and input dimension.

All arithmetic is float64. Parameters are registered in a fixed, documented
order (lift, timestep projection, blocks in depth order, head) so the flat
vector layout of :mod:`windndp.flatparams` is stable.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch.nn import functional as F

from .errors import NumericError

__all__ = ["TimestepEmbedding", "BiDimAttentionDenoiser", "init_denoiser", "predict_noise"]

LAYERNORM_EPS = 1e-5

#: feed-forward hidden size as a multiple of the stream width
FFN_EXPANSION = 4


class TimestepEmbedding:
    """Deterministic sinusoidal embedding of the diffusion step.

    The integer step t ∈ [1, T] is mapped to τ = 1000 t / T and embedded with
    geometrically spaced frequencies spanning 1 … 1e-4:

        emb(t) = [sin(τ ω_0), …, sin(τ ω_{k-1}), cos(τ ω_0), …, cos(τ ω_{k-1})]

    Entries lie in [-1, 1]; the lowest-frequency sine channel is strictly
    monotone in t over [1, T], so the map is injective.
    """

    def __init__(self, dim: int, total_steps: int):
        if dim < 4 or dim % 2 != 0:
            raise ValueError(f"embedding dim must be an even integer >= 4, got {dim}")
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.dim = dim
        self.total_steps = int(total_steps)
        half = dim // 2
        self.frequencies = np.exp(
            -math.log(10000.0) * np.arange(half, dtype=np.float64) / (half - 1)
        )

    def __call__(self, t: np.ndarray | int) -> np.ndarray:
        t_arr = np.atleast_1d(np.asarray(t))
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise ValueError("t must be integer-valued")
        if np.any(t_arr < 1) or np.any(t_arr > self.total_steps):
            raise ValueError(f"t must lie in [1, {self.total_steps}]")
        tau = 1000.0 * t_arr.astype(np.float64) / self.total_steps
        ang = tau[:, None] * self.frequencies[None, :]
        emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
        return emb if np.ndim(t) else emb[0]


class _Attention(torch.nn.Module):
    """Multi-head self-attention along one grid axis, 1/sqrt(head width)
    scaled, with a learned output projection."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.width = width
        self.heads = heads
        self.head_width = width // heads
        for name in ("wq", "wk", "wv", "wo"):
            setattr(self, name, torch.nn.Parameter(torch.zeros(width, width, dtype=torch.float64)))
        for name in ("bq", "bk", "bv", "bo"):
            setattr(self, name, torch.nn.Parameter(torch.zeros(width, dtype=torch.float64)))

    def forward(self, s: torch.Tensor, axis: str) -> torch.Tensor:
        # s: (B, N, D, H); axis "points" attends over N, "features" over D
        B, N, D, H = s.shape
        h, hw = self.heads, self.head_width
        flat = s.reshape(-1, H)
        if axis == "features" and D == 1:
            # softmax over a single token is 1, so attention reduces to the
            # value path exactly
            v = torch.addmm(self.bv, flat, self.wv)
            return torch.addmm(self.bo, v, self.wo).view(B, N, D, H)
        # fold the 1/sqrt(head width) score scaling into the query projection
        scale = 1.0 / math.sqrt(hw)
        w = torch.cat((self.wq * scale, self.wk, self.wv), dim=1)
        b = torch.cat((self.bq * scale, self.bk, self.bv))
        qkv = torch.addmm(b, flat, w)
        q, k, v = qkv.view(B, N, D, 3, h, hw).unbind(dim=3)
        if axis == "points":
            perm = (0, 2, 3, 1, 4)  # (B, D, h, N, hw)
            L = N
        else:
            perm = (0, 1, 3, 2, 4)  # (B, N, h, D, hw)
            L = D
        q, k, v = (x.permute(perm).reshape(-1, L, hw) for x in (q, k, v))
        scores = torch.bmm(q, k.transpose(-1, -2))
        att = torch.bmm(torch.softmax(scores, dim=-1), v)
        if axis == "points":
            att = att.view(B, D, h, N, hw).permute(0, 3, 1, 2, 4)
        else:
            att = att.view(B, N, h, D, hw).permute(0, 1, 3, 2, 4)
        att = att.reshape(-1, H)
        return torch.addmm(self.bo, att, self.wo).view(B, N, D, H)


class _Norm(torch.nn.Module):
    """Layer normalization over the channel axis with learned gain and bias
    (gain starts at one, bias at zero, so the norm begins as a plain
    standardization)."""

    def __init__(self, width: int):
        super().__init__()
        self.g = torch.nn.Parameter(torch.ones(width, dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.zeros(width, dtype=torch.float64))

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(s, s.shape[-1:], self.g, self.b, eps=LAYERNORM_EPS)


class _Ffn(torch.nn.Module):
    """Two-layer GeLU feed-forward net applied per grid cell, expanding the
    stream width by :data:`FFN_EXPANSION`."""

    def __init__(self, width: int):
        super().__init__()
        hidden = FFN_EXPANSION * width
        self.w1 = torch.nn.Parameter(torch.zeros(width, hidden, dtype=torch.float64))
        self.b1 = torch.nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
        self.w2 = torch.nn.Parameter(torch.zeros(hidden, width, dtype=torch.float64))
        self.b2 = torch.nn.Parameter(torch.zeros(width, dtype=torch.float64))

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        flat = s.reshape(-1, s.shape[-1])
        f = torch.addmm(self.b2, F.gelu(torch.addmm(self.b1, flat, self.w1)), self.w2)
        return f.view(s.shape)


class _Block(torch.nn.Module):
    """One denoiser block: point-axis attention, feature-axis attention, and a
    feed-forward sublayer, each pre-normalized and residual, with the timestep
    embedding added to every grid cell on entry. Submodules are registered in
    usage order so the flat parameter layout follows the data flow."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = _Norm(width)
        self.attn_n = _Attention(width, heads)
        self.ln2 = _Norm(width)
        self.attn_d = _Attention(width, heads)
        self.ln3 = _Norm(width)
        self.ffn = _Ffn(width)

    def forward(self, s: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        s = s + temb[:, None, None, :]
        s = s + self.attn_n(self.ln1(s), "points")
        s = s + self.attn_d(self.ln2(s), "features")
        return s + self.ffn(self.ln3(s))


class _Head(torch.nn.Module):
    """Scalar output head, registered after the blocks so the flat parameter
    order matches the documented layout."""

    def __init__(self, width: int):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(width, 1, dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))


class BiDimAttentionDenoiser(torch.nn.Module):
    """See module docstring for the architecture.

    Thread-safety: forward passes are pure given fixed parameters; training
    mutates parameters and must be externally serialized (the trainer is
    single-threaded by design).
    """

    def __init__(self, width: int, layers: int, heads: int, embed_dim: int, total_steps: int):
        super().__init__()
        if width < 1 or layers < 1 or heads < 1:
            raise ValueError("width, layers and heads must be positive")
        if width % heads != 0:
            raise ValueError(f"width {width} must be divisible by heads {heads}")
        self.width = width
        self.layers = layers
        self.heads = heads
        self.embed_dim = embed_dim
        self.total_steps = int(total_steps)
        self.timestep = TimestepEmbedding(embed_dim, total_steps)
        self.lift_w = torch.nn.Parameter(torch.zeros(2, width, dtype=torch.float64))
        self.lift_b = torch.nn.Parameter(torch.zeros(width, dtype=torch.float64))
        self.temb_w = torch.nn.Parameter(torch.zeros(embed_dim, width, dtype=torch.float64))
        self.temb_b = torch.nn.Parameter(torch.zeros(width, dtype=torch.float64))
        self.blocks = torch.nn.ModuleList(_Block(width, heads) for _ in range(layers))
        self.head = _Head(width)

    def hyperparameters(self) -> dict[str, int]:
        return {
            "width": self.width,
            "layers": self.layers,
            "heads": self.heads,
            "embed_dim": self.embed_dim,
            "total_steps": self.total_steps,
        }

    def forward(self, x: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Batched noise prediction.

        x: (B, N, D) clean inputs; y: (B, N) corrupted targets; t: (B,) integer
        steps in [1, T]. Returns (B, N).
        """
        if x.ndim != 3 or y.ndim != 2 or x.shape[:2] != y.shape:
            raise ValueError(f"inconsistent shapes x={tuple(x.shape)} y={tuple(y.shape)}")
        B, N, D = x.shape
        emb = self.timestep(t.detach().cpu().numpy())
        temb_in = torch.from_numpy(np.atleast_2d(emb))
        if temb_in.shape[0] != B:
            raise ValueError("t must provide one step per batch entry")
        if not (torch.isfinite(x).all() and torch.isfinite(y).all()):
            raise NumericError("non-finite values in denoiser input")
        grid = torch.stack((x, y[:, :, None].expand(B, N, D)), dim=-1)
        s = grid @ self.lift_w + self.lift_b
        temb = temb_in @ self.temb_w + self.temb_b
        for block in self.blocks:
            s = block(s, temb)
        pooled = s.mean(dim=2)
        out = pooled @ self.head.w + self.head.b
        return out[..., 0]


def init_denoiser(
    width: int,
    layers: int,
    heads: int,
    embed_dim: int | None = None,
    total_steps: int = 500,
    seed: int = 0,
) -> BiDimAttentionDenoiser:
    """Construct a denoiser with deterministic seed-derived initialization.

    Weights are Xavier-uniform drawn from a dedicated numpy generator in
    registration order; biases and the output head start at zero and norm
    gains at one (the first update therefore only moves the head, a stable
    start for denoising losses). ``embed_dim`` defaults to the width.
    """
    if embed_dim is None:
        embed_dim = width
    model = BiDimAttentionDenoiser(width, layers, heads, embed_dim, total_steps)
    randomize_parameters(model, seed, zero_names=("head.w", "head.b"))
    return model


def randomize_parameters(
    module: torch.nn.Module, seed: int, zero_names: tuple[str, ...] = ()
) -> None:
    """Fill weights Xavier-uniform / biases zero / norm gains one from a
    seeded generator, in registration order; parameters whose name ends with
    one of ``zero_names`` are zeroed."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if any(name.endswith(z) for z in zero_names):
                p.zero_()
            elif p.ndim == 1:
                p.fill_(1.0 if name.endswith(".g") else 0.0)
            else:
                fan_in, fan_out = p.shape[0], p.shape[1]
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_(torch.from_numpy(rng.uniform(-limit, limit, size=tuple(p.shape))))


def predict_noise(
    model: BiDimAttentionDenoiser, x: np.ndarray, y_t: np.ndarray, t: int
) -> np.ndarray:
    """Single-sample noise prediction: x (N, D), y_t (N,), integer t ∈ [1, T]
    → ε̂ (N,). The batched :meth:`BiDimAttentionDenoiser.forward` is the same
    computation with a leading batch axis."""
    x = np.asarray(x, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    if x.ndim != 2 or y_t.shape != (x.shape[0],):
        raise ValueError(f"expected x (N, D) and y_t (N,), got {x.shape} and {y_t.shape}")
    with torch.no_grad():
        out = model(
            torch.from_numpy(x[None]),
            torch.from_numpy(y_t[None]),
            torch.tensor([int(t)]),
        )
    return out[0].numpy()
