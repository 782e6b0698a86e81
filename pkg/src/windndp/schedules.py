"""Variance schedules for the discrete forward diffusion.

A schedule fixes the per-step noise variances β_1..β_T of the forward kernel

    q(s_t | s_{t-1}) = N(sqrt(1 - β_t) s_{t-1}, β_t I)

together with the derived quantities used everywhere else:

    α_t      = 1 - β_t
    ᾱ_t      = prod_{u<=t} α_u            (ᾱ_0 = 1; arrays hold t = 0..T)
    β̃_t      = (1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t   (reverse posterior variance)

The closed-form marginal q(s_t | s_0) = N(sqrt(ᾱ_t) s_0, (1 - ᾱ_t) I) is exposed
as :func:`forward_marginal` in reparameterised form.

Everything here is plain float64 numpy; schedules are immutable value objects
and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

__all__ = [
    "VarianceSchedule",
    "cosine_alpha_bar",
    "build_cosine_schedule",
    "build_linear_schedule",
    "schedule_from_config",
    "forward_marginal",
]

#: clip range applied to β_t when a schedule is derived from marginals
BETA_MIN = 1e-8
BETA_MAX = 0.999


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VarianceSchedule:
    """Immutable container for β, α, ᾱ and β̃ arrays.

    ``beta``, ``alpha`` and ``beta_tilde`` have length T and are indexed by
    t-1 (use :meth:`at`); ``alpha_bar`` has length T+1 and is indexed by t
    directly, with ``alpha_bar[0] == 1``.
    """

    kind: str
    total_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        T = self.total_steps
        if not isinstance(T, (int, np.integer)) or T < 1:
            raise ValueError(f"total_steps must be a positive integer, got {T!r}")
        object.__setattr__(self, "total_steps", int(T))
        for name in ("beta", "alpha", "alpha_bar", "beta_tilde"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        if self.beta.shape != (T,) or self.alpha.shape != (T,) or self.beta_tilde.shape != (T,):
            raise ValueError("beta/alpha/beta_tilde must have shape (T,)")
        if self.alpha_bar.shape != (T + 1,):
            raise ValueError("alpha_bar must have shape (T+1,)")
        if not (np.all(self.beta > 0.0) and np.all(self.beta < 1.0)):
            raise ValueError("every beta_t must lie strictly inside (0, 1)")
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must equal 1")
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if T >= 100 and self.alpha_bar[T] >= 1e-3:
            raise ValueError(
                f"alpha_bar[T]={self.alpha_bar[T]:.3e} >= 1e-3: the forward process "
                "does not come close enough to pure noise (T >= 100 schedules must)"
            )

    # -- indexed accessors (t is the 1-based diffusion step) -----------------

    def _check_t(self, t: int) -> int:
        if not isinstance(t, (int, np.integer)):
            raise ValueError(f"t must be an integer, got {type(t).__name__}")
        if not 1 <= t <= self.total_steps:
            raise ValueError(f"t={t} outside [1, {self.total_steps}]")
        return int(t)

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        if not isinstance(t, (int, np.integer)) or not 0 <= t <= self.total_steps:
            raise ValueError(f"t={t} outside [0, {self.total_steps}]")
        return float(self.alpha_bar[int(t)])

    def beta_tilde_at(self, t: int) -> float:
        return float(self.beta_tilde[self._check_t(t) - 1])

    # -- serialization --------------------------------------------------------

    def config(self) -> dict[str, Any]:
        """Serializable description; :func:`schedule_from_config` rebuilds the
        identical schedule (builders are pure functions of these fields)."""
        return {"kind": self.kind, "total_steps": self.total_steps, **self.params}


def _derive(kind: str, betas: np.ndarray, params: dict[str, float]) -> VarianceSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    T = betas.shape[0]
    alphas = 1.0 - betas
    # cumprod computes alpha_bar[t] literally as alpha_bar[t-1] * alpha[t], so the
    # recurrence holds bit-exactly.
    alpha_bar = np.concatenate(([1.0], np.cumprod(alphas)))
    beta_tilde = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * betas
    return VarianceSchedule(
        kind=kind,
        total_steps=T,
        beta=betas,
        alpha=alphas,
        alpha_bar=alpha_bar,
        beta_tilde=beta_tilde,
        params=params,
    )


def cosine_alpha_bar(total_steps: int, s: float = 0.008) -> np.ndarray:
    """Raw cosine marginals ᾱ_t = f(t/T) / f(0), f(λ) = cos²((π/2)(λ+s)/(1+s)).

    Length T+1 array over t = 0..T, before any β clipping; ᾱ_T is exactly
    cos²(π/2)/f(0) = 0 up to rounding.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if s <= 0:
        raise ValueError("offset s must be positive")
    lam = np.arange(total_steps + 1, dtype=np.float64) / total_steps
    f = np.cos(0.5 * np.pi * (lam + s) / (1.0 + s)) ** 2
    return f / f[0]


def build_cosine_schedule(total_steps: int, s: float = 0.008) -> VarianceSchedule:
    """Cosine schedule: β_t = clip(1 - ᾱ_t/ᾱ_{t-1}, 1e-8, 0.999) from the raw
    cosine marginals, with ᾱ then re-derived from the clipped β so that the
    product recurrence holds exactly."""
    raw = cosine_alpha_bar(total_steps, s)
    betas = np.clip(1.0 - raw[1:] / raw[:-1], BETA_MIN, BETA_MAX)
    return _derive("cosine", betas, {"s": float(s)})


def build_linear_schedule(
    total_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> VarianceSchedule:
    """Linear schedule: β interpolated from beta_start to beta_end inclusive
    (a single-step schedule uses beta_start alone)."""
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta endpoints must lie strictly inside (0, 1)")
    betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
    return _derive(
        "linear", betas, {"beta_start": float(beta_start), "beta_end": float(beta_end)}
    )


def schedule_from_config(config: Mapping[str, Any]) -> VarianceSchedule:
    """Rebuild a schedule from :meth:`VarianceSchedule.config` output."""
    cfg = dict(config)
    kind = cfg.pop("kind")
    T = cfg.pop("total_steps")
    if kind == "cosine":
        return build_cosine_schedule(T, **cfg)
    if kind == "linear":
        return build_linear_schedule(T, **cfg)
    raise ValueError(f"unknown schedule kind {kind!r}")


def forward_marginal(
    y0: np.ndarray, t: int, schedule: VarianceSchedule, noise: np.ndarray
) -> np.ndarray:
    """Corrupt clean targets to diffusion step t in one shot:

        y_t = sqrt(ᾱ_t) y_0 + sqrt(1 - ᾱ_t) ε

    ``noise`` must be a standard-normal draw of the same shape as ``y0``.
    """
    t = schedule._check_t(t)
    y0 = np.asarray(y0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if y0.shape != noise.shape:
        raise ValueError(f"y0 {y0.shape} and noise {noise.shape} must share a shape")
    if not (np.all(np.isfinite(y0)) and np.all(np.isfinite(noise))):
        raise ValueError("y0 and noise must be finite")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * noise
