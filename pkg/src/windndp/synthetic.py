"""Synthetic GP-task generators with known ground truth.

Functions are exact draws from a Gaussian process on uniformly sampled
inputs; in the multi-task variant, task k perturbs the base kernel with a
lengthscale multiplier γ_k and shifts outputs by δ_k. Observation noise is
folded into the sampling covariance, so targets are noisy function values.

Per function, the generator draws the inputs first (one uniform call) and
the standard-normal vector second, which makes datasets bit-reproducible
from the generator state. When a context size is requested, each function is
drawn on ``n_points + context_size`` inputs and split so the context pool
lies on the same function but shares no rows with the targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import ContextSet, FunctionSample
from .gp import _chol_with_jitter

__all__ = [
    "SyntheticTaskSpec",
    "sample_gp_functions",
    "sample_multitask_functions",
]


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Base kernel plus per-task perturbations; task count is the length of
    ``offsets``. The defaults are the 1D validation bed used throughout the
    acceptance suite."""

    input_dim: int = 1
    domain: tuple[float, float] = (-2.0, 2.0)
    signal_variance: float = 1.0
    lengthscale: float = 0.5
    noise_variance: float = 0.01
    offsets: tuple[float, ...] = (0.0,)
    lengthscale_multipliers: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.lengthscale_multipliers is None:
            object.__setattr__(self, "lengthscale_multipliers", (1.0,) * len(self.offsets))
        if self.input_dim < 1:
            raise ValueError("input_dim must be at least 1")
        if self.domain[1] <= self.domain[0]:
            raise ValueError("domain must be a non-empty interval")
        if self.signal_variance < 0 or self.noise_variance < 0 or self.lengthscale <= 0:
            raise ValueError("kernel parameters must be non-negative (lengthscale positive)")
        if len(self.offsets) < 1:
            raise ValueError("need at least one task")
        if len(self.lengthscale_multipliers) != len(self.offsets):
            raise ValueError("offsets and lengthscale multipliers must align per task")
        if any(g <= 0 for g in self.lengthscale_multipliers):
            raise ValueError("lengthscale multipliers must be positive")

    @property
    def n_tasks(self) -> int:
        return len(self.offsets)

    def task_id(self, task_index: int) -> str:
        return f"task{task_index}"


def _covariance(x: np.ndarray, signal_variance: float, lengthscale: float) -> np.ndarray:
    s = x / lengthscale
    sq = np.sum(s**2, axis=1)[:, None] - 2.0 * s @ s.T + np.sum(s**2, axis=1)[None, :]
    return signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def sample_gp_functions(
    spec: SyntheticTaskSpec,
    n_functions: int,
    n_points: int,
    rng: np.random.Generator,
    *,
    task_index: int = 0,
    context_size: int = 0,
    inputs: np.ndarray | None = None,
) -> tuple[list[FunctionSample], list[ContextSet]]:
    """Draw independent functions for one task; returns (samples, pools)
    where pools is empty when no context was requested. A fixed design can
    be supplied via ``inputs`` (shared by every function); otherwise inputs
    are uniform on the domain and fresh per function."""
    if n_functions < 1 or n_points < 1 or context_size < 0:
        raise ValueError("counts must be positive (context size non-negative)")
    if not 0 <= task_index < spec.n_tasks:
        raise ValueError(f"task_index {task_index} out of range for {spec.n_tasks} task(s)")
    delta = spec.offsets[task_index]
    ell = spec.lengthscale * spec.lengthscale_multipliers[task_index]
    total = n_points + context_size
    lo, hi = spec.domain
    task_id = spec.task_id(task_index)
    if inputs is not None:
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.shape != (total, spec.input_dim):
            raise ValueError(f"fixed inputs must have shape ({total}, {spec.input_dim})")

    samples: list[FunctionSample] = []
    pools: list[ContextSet] = []
    chol = None
    for _ in range(n_functions):
        if inputs is None:
            x = rng.uniform(lo, hi, size=(total, spec.input_dim))
        else:
            x = inputs
        if inputs is None or chol is None:
            cov = _covariance(x, spec.signal_variance, ell)
            cov[np.diag_indices(total)] += spec.noise_variance
            cf, _ = _chol_with_jitter(cov, float(np.trace(cov)))
            chol = np.tril(cf[0])
        y = delta + chol @ rng.standard_normal(total)
        samples.append(FunctionSample(x=x[:n_points], y=y[:n_points], task_id=task_id))
        if context_size:
            pools.append(ContextSet(x=x[n_points:], y=y[n_points:], task_id=task_id))
        if inputs is None:
            chol = None
    return samples, pools


def sample_multitask_functions(
    spec: SyntheticTaskSpec,
    per_task_counts,
    n_points: int,
    rng: np.random.Generator,
    *,
    context_size: int = 0,
) -> tuple[list[FunctionSample], list[ContextSet]]:
    """Draw functions for every task in index order; per_task_counts may be a
    single int (same count per task) or one count per task."""
    if np.isscalar(per_task_counts):
        counts = [int(per_task_counts)] * spec.n_tasks
    else:
        counts = [int(c) for c in per_task_counts]
    if len(counts) != spec.n_tasks:
        raise ValueError("need one function count per task")
    samples: list[FunctionSample] = []
    pools: list[ContextSet] = []
    for k, count in enumerate(counts):
        if count == 0:
            continue
        s, p = sample_gp_functions(
            spec, count, n_points, rng, task_index=k, context_size=context_size
        )
        samples.extend(s)
        pools.extend(p)
    return samples, pools
