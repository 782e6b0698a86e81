"""Diffusion over function evaluations: losses, samplers, summaries.

The forward process corrupts only target values; inputs remain clean. With a
variance schedule (β_t, ᾱ_t) the training objective draws t ~ U{1..T} and
ε ~ N(0, I) per sample, corrupts y_t = sqrt(ᾱ_t) y_0 + sqrt(1-ᾱ_t) ε and
regresses the noise with per-point mean squared error.

The reverse process walks t = T..1 with

    μ_θ(y_t) = (y_t - β_t/sqrt(1-ᾱ_t) ε̂) / sqrt(α_t)
    y_{t-1}  = μ_θ(y_t) + sqrt(β̃_t) z,      z = 0 at t = 1.

One numerical guard is applied by default: the implied clean signal

    ŷ_0 = (y_t - sqrt(1-ᾱ_t) ε̂) / sqrt(ᾱ_t)

is clamped to ±``signal_bound`` and, wherever the clamp binds, the step mean
is recomputed in its posterior form

    μ = sqrt(ᾱ_{t-1}) β_t/(1-ᾱ_t) ŷ_0 + sqrt(α_t)(1-ᾱ_{t-1})/(1-ᾱ_t) y_t,

which is algebraically identical to μ_θ whenever ŷ_0 is in range (the two
expressions are the same formula rearranged). Targets are standardized, so a
bound of 10 never touches plausible signals; it only stops the near-terminal
steps — where the schedule's clipped β_t amplifies the noise-prediction error
by β_t/sqrt((1-ᾱ_t) α_t), a factor of ~30 at the last step — from compounding
an imperfect ε̂ into an unbounded walk. Pass ``signal_bound=None`` for the
unguarded textbook recursion (useful with stub models whose implied signal is
meaningless).

Conditioning follows the inpainting scheme: at every reverse step the clean
context targets are re-corrupted to step t with fresh noise via the forward
marginal, the union {targets, context} passes through the noise model, and
the reverse update keeps only the target coordinates. An empty context
degrades bit-identically to unconditional sampling. For multi-task models
the context also feeds the task encoder, whose embedding augments every row
of the union; the encoder always sees the uncorrupted context.

Randomness discipline: each trajectory owns a generator spawned from the
run's seed and draws, in order, the initial y_T, then per step the context
noise followed (for t > 1) by the reverse noise z. Trajectories are therefore
independent of how they are grouped into model-call batches; grouping only
affects float associativity inside batched matrix products.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import BiDimAttentionDenoiser
from .encoder import TaskEncoder
from .errors import SamplerDivergenceError
from .flatparams import flat_gradient
from .schedules import VarianceSchedule

__all__ = [
    "FunctionSample",
    "ContextSet",
    "TrajectoryBundle",
    "PredictiveSummary",
    "DEFAULT_LEVELS",
    "SIGNAL_BOUND",
    "ndp_loss",
    "mt_ndp_loss",
    "diffusion_loss",
    "ndp_loss_gradient",
    "mt_ndp_loss_gradient",
    "sample_unconditional",
    "sample_conditional",
    "sample_many",
    "summarize",
    "export_bundle",
]

#: central-interval coverage levels used throughout evaluation
DEFAULT_LEVELS = np.round(np.arange(1, 20) * 0.05, 10)

#: rows per internal model call during sampling (memory/throughput tradeoff)
SAMPLING_CHUNK = 256

#: default clamp on the implied clean signal during the reverse walk, in
#: standardized-target units; see the module docstring
SIGNAL_BOUND = 10.0


def _as_array(a, name, dtype=np.float64):
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FunctionSample:
    """One function draw: inputs x (N, D), targets y (N,). ``row_ids`` records
    which source rows produced the sample (used to keep later context draws
    disjoint); empty when not applicable."""

    x: np.ndarray
    y: np.ndarray
    task_id: str = ""
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", _as_array(self.x, "x"))
        object.__setattr__(self, "y", _as_array(self.y, "y"))
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"expected x (N, D) and y (N,), got {self.x.shape}, {self.y.shape}")
        if self.row_ids is not None:
            object.__setattr__(self, "row_ids", _as_array(self.row_ids, "row_ids", np.int64))

    @property
    def n_points(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class ContextSet:
    """Conditioning points: x (M, D), y (M,). M = 0 is valid."""

    x: np.ndarray
    y: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "x", _as_array(self.x, "x"))
        object.__setattr__(self, "y", _as_array(self.y, "y"))
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"expected x (M, D) and y (M,), got {self.x.shape}, {self.y.shape}")

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def take(self, m: int) -> "ContextSet":
        """First m points (context pools are nested by prefix)."""
        if not 0 <= m <= self.size:
            raise ValueError(f"cannot take {m} of {self.size} context points")
        return ContextSet(x=self.x[:m], y=self.y[:m], task_id=self.task_id)


def empty_context(input_dim: int, task_id: str = "") -> ContextSet:
    return ContextSet(x=np.zeros((0, input_dim)), y=np.zeros(0), task_id=task_id)


@dataclass(frozen=True)
class TrajectoryBundle:
    """R sampled target vectors over shared inputs."""

    x: np.ndarray  # (N, D)
    values: np.ndarray  # (R, N)
    seed: int
    context_size: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x", _as_array(self.x, "x"))
        object.__setattr__(self, "values", _as_array(self.values, "values"))
        if self.values.ndim != 2 or self.values.shape[1] != self.x.shape[0]:
            raise ValueError("values must be (R, N) matching x rows")

    @property
    def n_trajectories(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PredictiveSummary:
    """Per-point empirical mean and central intervals at the given coverage
    levels. Intervals are nested: lower is non-increasing and upper
    non-decreasing in the level."""

    x: np.ndarray  # (N, D)
    mean: np.ndarray  # (N,)
    levels: np.ndarray  # (Q,)
    lower: np.ndarray  # (Q, N)
    upper: np.ndarray  # (Q, N)

    def __post_init__(self):
        for name in ("x", "mean", "levels", "lower", "upper"):
            object.__setattr__(self, name, _as_array(getattr(self, name), name))
        Q, N = self.levels.shape[0], self.x.shape[0]
        if self.mean.shape != (N,) or self.lower.shape != (Q, N) or self.upper.shape != (Q, N):
            raise ValueError("inconsistent summary shapes")
        if np.any(np.diff(self.levels) <= 0) or self.levels[0] <= 0 or self.levels[-1] >= 1:
            raise ValueError("levels must be strictly increasing inside (0, 1)")
        if np.any(np.diff(self.lower, axis=0) > 1e-12) or np.any(np.diff(self.upper, axis=0) < -1e-12):
            raise ValueError("intervals must be nested across levels")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds must not exceed upper bounds")

    def affine(self, scale: float, shift: float) -> "PredictiveSummary":
        """De-standardization helper: y -> scale*y + shift (scale > 0)."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        return PredictiveSummary(
            x=self.x,
            mean=self.mean * scale + shift,
            levels=self.levels,
            lower=self.lower * scale + shift,
            upper=self.upper * scale + shift,
        )


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _corruption_draws(schedule, batch, rng):
    """Per-sample (t, ε) in batch order — the documented draw order that
    scripted oracles replay."""
    ts, eps = [], []
    for sample in batch:
        ts.append(int(rng.integers(1, schedule.total_steps + 1)))
        eps.append(rng.standard_normal(sample.n_points))
    return np.array(ts), np.stack(eps)


def _stack_batch(batch: Sequence[FunctionSample]):
    n = batch[0].n_points
    d = batch[0].input_dim
    if any(s.n_points != n or s.input_dim != d for s in batch):
        raise ValueError("all samples in a loss batch must share (N, D)")
    x = np.stack([s.x for s in batch])
    y = np.stack([s.y for s in batch])
    return x, y


def diffusion_loss(
    model: BiDimAttentionDenoiser | Callable,
    schedule: VarianceSchedule,
    batch: Sequence[FunctionSample],
    rng: np.random.Generator,
    *,
    encoder: TaskEncoder | None = None,
    contexts: Sequence[ContextSet] | None = None,
) -> torch.Tensor:
    """Differentiable noise-regression loss:

        mean over batch of mean over points of (ε - ε̂(x, y_t, t))².

    Per sample, t ~ U{1..T} and ε ~ N(0, I_N) are drawn from ``rng`` in batch
    order. With an encoder, each sample's context (uncorrupted) is embedded
    and concatenated to its input rows; contexts must then be supplied,
    one per sample (empty contexts allowed).
    """
    if len(batch) == 0:
        raise ValueError("batch must not be empty")
    if (encoder is None) != (contexts is None):
        raise ValueError("encoder and contexts must be supplied together")
    if contexts is not None and len(contexts) != len(batch):
        raise ValueError("need exactly one context set per batch sample")
    x, y0 = _stack_batch(batch)
    ts, eps = _corruption_draws(schedule, batch, rng)
    ab = schedule.alpha_bar[ts]  # (B,)
    y_t = np.sqrt(ab)[:, None] * y0 + np.sqrt(1.0 - ab)[:, None] * eps

    x_t = torch.from_numpy(x)
    if encoder is not None:
        rows = []
        for i, ctx in enumerate(contexts):
            v = encoder.embed(torch.from_numpy(ctx.x.copy()), torch.from_numpy(ctx.y.copy()))
            rows.append(
                torch.cat(
                    (x_t[i], v[None, :].expand(x_t.shape[1], v.shape[0])), dim=1
                )
            )
        x_t = torch.stack(rows)
    eps_hat = _model_call(model)(x_t, torch.from_numpy(y_t), torch.from_numpy(ts))
    return ((torch.from_numpy(eps) - eps_hat) ** 2).mean(dim=1).mean()


def ndp_loss(
    model, schedule, batch: Sequence[FunctionSample], rng: np.random.Generator
) -> float:
    """Evaluation-only loss value for the single-task process."""
    with torch.no_grad():
        return float(diffusion_loss(model, schedule, batch, rng))


def mt_ndp_loss(
    model, encoder, schedule, batch, contexts, rng: np.random.Generator
) -> float:
    """Evaluation-only loss value for the multi-task process (context feeds
    the encoder only; corruption is identical to the single-task loss)."""
    with torch.no_grad():
        return float(
            diffusion_loss(model, schedule, batch, rng, encoder=encoder, contexts=contexts)
        )


def ndp_loss_gradient(model, schedule, batch, rng):
    """(loss value, flat denoiser gradient) via reverse-mode differentiation;
    finite differences over the same flat layout are the validation oracle."""
    model.zero_grad(set_to_none=True)
    loss = diffusion_loss(model, schedule, batch, rng)
    loss.backward()
    return float(loss.detach()), flat_gradient(model)


def mt_ndp_loss_gradient(model, encoder, schedule, batch, contexts, rng):
    """(loss value, flat denoiser gradient, flat encoder gradient)."""
    model.zero_grad(set_to_none=True)
    encoder.zero_grad(set_to_none=True)
    loss = diffusion_loss(model, schedule, batch, rng, encoder=encoder, contexts=contexts)
    loss.backward()
    return float(loss.detach()), flat_gradient(model), flat_gradient(encoder)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def _model_call(model, embedding: np.ndarray | None = None):
    """Normalize a noise model to a callable (x, y, t_vec) -> ε̂ tensor; an
    embedding, when given, is concatenated to every row inside the call."""
    if isinstance(model, torch.nn.Module):
        base = model
    elif callable(model):
        base = None
    else:
        raise TypeError("model must be a denoiser module or a callable")

    emb_t = None if embedding is None else torch.from_numpy(np.asarray(embedding, dtype=np.float64))

    def call(x: torch.Tensor, y: torch.Tensor, t) -> torch.Tensor:
        if emb_t is not None:
            B, N = x.shape[0], x.shape[1]
            x = torch.cat((x, emb_t.expand(B, N, emb_t.shape[0])), dim=2)
        t_vec = t if torch.is_tensor(t) else torch.full((x.shape[0],), int(t))
        if base is not None:
            return base(x, y, t_vec)
        return model(x, y, t_vec)

    return call


def _spawn_generators(seed, count):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(count)]


def _reverse_walk(
    call, schedule, x_rows, n_targets, y_ctx0, gens, chunk=SAMPLING_CHUNK,
    signal_bound=SIGNAL_BOUND,
):
    """Shared reverse-process walk over a stack of independent trajectories.

    x_rows: (B, N', D) inputs per row (targets first, then context columns
    rows); y_ctx0: (B, M) clean context targets or None; returns (B, N).
    Where the implied clean signal exceeds ``signal_bound`` the step mean is
    recomputed from the clamped signal (module docstring); elsewhere the
    plain update is used unchanged.
    """
    B, n_union, _ = x_rows.shape
    n_ctx = 0 if y_ctx0 is None else y_ctx0.shape[1]
    if n_targets + n_ctx != n_union:
        raise ValueError("x_rows must stack target rows then context rows")
    x_t = torch.from_numpy(x_rows)
    y = np.stack([g.standard_normal(n_targets) for g in gens])
    T = schedule.total_steps
    for t in range(T, 0, -1):
        ab = schedule.alpha_bar[t]
        beta = schedule.beta[t - 1]
        alpha = schedule.alpha[t - 1]
        if n_ctx:
            ctx_noise = np.stack([g.standard_normal(n_ctx) for g in gens])
            y_ctx_t = np.sqrt(ab) * y_ctx0 + np.sqrt(1.0 - ab) * ctx_noise
            y_in = np.concatenate([y, y_ctx_t], axis=1)
        else:
            y_in = y
        eps = np.empty_like(y_in)
        with torch.no_grad():
            for lo in range(0, B, chunk):
                hi = min(lo + chunk, B)
                out = call(x_t[lo:hi], torch.from_numpy(y_in[lo:hi]), t)
                eps[lo:hi] = out.numpy()
        mu = (y_in - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
        if signal_bound is not None:
            y0_hat = (y_in - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
            clipped = np.abs(y0_hat) > signal_bound
            if clipped.any():
                ab_prev = schedule.alpha_bar[t - 1]
                mu_post = (
                    np.sqrt(ab_prev) * beta / (1.0 - ab) * np.clip(y0_hat, -signal_bound, signal_bound)
                    + np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab) * y_in
                )
                mu = np.where(clipped, mu_post, mu)
        y = mu[:, :n_targets]
        if t > 1:
            z = np.stack([g.standard_normal(n_targets) for g in gens])
            y = y + np.sqrt(schedule.beta_tilde[t - 1]) * z
        if not np.all(np.isfinite(y)):
            raise SamplerDivergenceError(t)
    return y


def _prepare_rows(X, context, encoder):
    """Tile one run's inputs into reverse-walk rows and resolve the task
    embedding (zero embedding for empty context when an encoder is present)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be (N, D)")
    ctx = context
    if ctx is not None and ctx.size > 0 and ctx.x.shape[1] != X.shape[1]:
        raise ValueError("context and targets must share the input dimension")
    embedding = None
    if encoder is not None:
        if ctx is None or ctx.size == 0:
            embedding = np.zeros(encoder.output_dim)
        else:
            emb = encoder.embed(torch.from_numpy(ctx.x.copy()), torch.from_numpy(ctx.y.copy()))
            embedding = emb.detach().numpy()
    if ctx is None or ctx.size == 0:
        return X, None, embedding
    return np.concatenate([X, ctx.x], axis=0), ctx.y, embedding


def sample_unconditional(
    model,
    schedule: VarianceSchedule,
    X: np.ndarray,
    n_trajectories: int,
    seed,
    *,
    encoder: TaskEncoder | None = None,
    chunk: int = SAMPLING_CHUNK,
    signal_bound: float | None = SIGNAL_BOUND,
) -> TrajectoryBundle:
    """Draw R unconditional trajectories at inputs X (N, D)."""
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    rows, _, embedding = _prepare_rows(X, None, encoder)
    N = rows.shape[0]
    gens = _spawn_generators(seed, n_trajectories)
    x_rows = np.broadcast_to(rows, (n_trajectories, N, rows.shape[1])).copy()
    call = _model_call(model, embedding)
    values = _reverse_walk(call, schedule, x_rows, N, None, gens, chunk, signal_bound)
    return TrajectoryBundle(
        x=rows, values=values, seed=_seed_int(seed), context_size=0
    )


def sample_conditional(
    model,
    schedule: VarianceSchedule,
    X: np.ndarray,
    context: ContextSet | None,
    n_trajectories: int,
    seed,
    *,
    encoder: TaskEncoder | None = None,
    chunk: int = SAMPLING_CHUNK,
    signal_bound: float | None = SIGNAL_BOUND,
) -> TrajectoryBundle:
    """Draw R trajectories at X conditioned on the context set; with an empty
    context this consumes the identical random stream as
    :func:`sample_unconditional` and returns bit-identical values."""
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    X = np.asarray(X, dtype=np.float64)
    rows, y_ctx, embedding = _prepare_rows(X, context, encoder)
    n_targets = X.shape[0]
    gens = _spawn_generators(seed, n_trajectories)
    x_rows = np.broadcast_to(rows, (n_trajectories,) + rows.shape).copy()
    y_ctx0 = None if y_ctx is None else np.broadcast_to(y_ctx, (n_trajectories, y_ctx.shape[0])).copy()
    call = _model_call(model, embedding)
    values = _reverse_walk(call, schedule, x_rows, n_targets, y_ctx0, gens, chunk, signal_bound)
    return TrajectoryBundle(
        x=X,
        values=values,
        seed=_seed_int(seed),
        context_size=0 if context is None else context.size,
    )


def sample_many(
    model,
    schedule: VarianceSchedule,
    runs: Sequence[tuple[np.ndarray, ContextSet | None]],
    n_trajectories: int,
    seeds: Sequence,
    *,
    encoder: TaskEncoder | None = None,
    chunk: int = SAMPLING_CHUNK,
    signal_bound: float | None = SIGNAL_BOUND,
) -> list[TrajectoryBundle]:
    """Sample several independent runs in one batched walk.

    All runs must share target count, context size and input dimension (the
    evaluation protocol groups its work this way). Run f with seed seeds[f]
    draws the same per-trajectory streams as a standalone
    :func:`sample_conditional` call, so batching only changes float
    associativity inside the model's matrix products.
    """
    if len(runs) == 0:
        raise ValueError("runs must not be empty")
    if len(seeds) != len(runs):
        raise ValueError("need one seed per run")
    prepared = [_prepare_rows(X, ctx, encoder) for X, ctx in runs]
    shapes = {p[0].shape for p in prepared}
    ctx_sizes = {0 if p[1] is None else p[1].shape[0] for p in prepared}
    if len(shapes) != 1 or len(ctx_sizes) != 1:
        raise ValueError("all runs in a batch must share shapes and context size")
    n_targets = runs[0][0].shape[0]
    M = ctx_sizes.pop()
    R = n_trajectories
    F = len(runs)

    embeddings = [p[2] for p in prepared]
    if encoder is not None:
        # per-run embeddings differ, so fold them into the rows up front
        x_stack = np.stack(
            [np.concatenate([p[0], np.tile(e, (p[0].shape[0], 1))], axis=1) for p, e in zip(prepared, embeddings)]
        )
        call = _model_call(model, None)
    else:
        x_stack = np.stack([p[0] for p in prepared])
        call = _model_call(model, None)
    x_rows = np.repeat(x_stack, R, axis=0)  # (F*R, N', D')
    y_ctx0 = None
    if M:
        y_ctx0 = np.repeat(np.stack([p[1] for p in prepared]), R, axis=0)
    gens = []
    for s in seeds:
        gens.extend(_spawn_generators(s, R))
    values = _reverse_walk(call, schedule, x_rows, n_targets, y_ctx0, gens, chunk, signal_bound)
    out = []
    for f, (X, ctx) in enumerate(runs):
        out.append(
            TrajectoryBundle(
                x=np.asarray(X, dtype=np.float64),
                values=values[f * R : (f + 1) * R],
                seed=_seed_int(seeds[f]),
                context_size=0 if ctx is None else ctx.size,
            )
        )
    return out


def _seed_int(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        ent = seed.entropy
        return int(ent if np.isscalar(ent) else ent[0])
    return int(seed)


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------


def summarize(bundle: TrajectoryBundle, levels: np.ndarray | None = None) -> PredictiveSummary:
    """Empirical mean and central intervals: level q spans the empirical
    [(1-q)/2, (1+q)/2] quantiles per point (linear interpolation)."""
    levels = DEFAULT_LEVELS if levels is None else np.asarray(levels, dtype=np.float64)
    values = bundle.values
    lower = np.quantile(values, (1.0 - levels) / 2.0, axis=0, method="linear")
    upper = np.quantile(values, (1.0 + levels) / 2.0, axis=0, method="linear")
    return PredictiveSummary(
        x=bundle.x, mean=values.mean(axis=0), levels=levels, lower=lower, upper=upper
    )


def export_bundle(bundle: TrajectoryBundle, path: str | Path) -> Path:
    """Write trajectories as columnar (trajectory, point, value) rows plus a
    JSON sidecar carrying the seed record and shapes."""
    path = Path(path)
    R, N = bundle.values.shape
    traj = np.repeat(np.arange(R), N)
    point = np.tile(np.arange(N), R)
    with open(path, "w") as fh:
        fh.write("trajectory,point,value\n")
        for tr, pt, val in zip(traj, point, bundle.values.ravel()):
            fh.write(f"{tr},{pt},{float(val)!r}\n")
    meta = {
        "seed": bundle.seed,
        "n_trajectories": R,
        "n_points": N,
        "context_size": bundle.context_size,
        **bundle.meta,
    }
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path
