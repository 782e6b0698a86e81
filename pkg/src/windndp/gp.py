"""Exact Gaussian-process regression with an RBF-ARD kernel.

Model: y = f(x) + η, f ~ GP(μ, k), η ~ N(0, σ²),

    k(x, x') = σ_f² · exp(−½ Σ_d (x_d − x'_d)² / ℓ_d²)

with a learned constant mean μ. Hyperparameters are optimized in log-space
(μ unconstrained) by maximizing the log marginal likelihood

    L = −½ rᵀ A⁻¹ r − ½ log|A| − N/2 · log 2π,   A = K + σ² I,  r = y − μ

with analytic gradients and L-BFGS-B over multiple seeded restarts. A is
factorized by Cholesky; on failure a jitter of 1e-8·tr(K)/N is added and
escalated tenfold up to 1e-4·tr(K)/N before giving up.

Predictive intervals are Gaussian central quantiles; observation noise is
included by default so intervals refer to measured values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .diffusion import DEFAULT_LEVELS, PredictiveSummary
from .errors import NumericError

__all__ = [
    "GpHyperparameters",
    "GpPosterior",
    "rbf_kernel",
    "log_marginal_likelihood",
    "fit_gp",
    "gp_predict",
    "gp_summary",
]

JITTER_START_REL = 1e-8
JITTER_MAX_REL = 1e-4


@dataclass(frozen=True)
class GpHyperparameters:
    """Positive signal/noise scales and per-dimension lengthscales plus the
    constant prior mean."""

    signal_variance: float
    lengthscales: np.ndarray  # (D,)
    noise_variance: float
    mean: float

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=np.float64)
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        if self.signal_variance <= 0 or self.noise_variance <= 0 or np.any(ls <= 0):
            raise ValueError("variances and lengthscales must be strictly positive")

    def to_vector(self) -> np.ndarray:
        """Optimization coordinates: [log ℓ_1..D, log σ_f², log σ², μ]."""
        return np.concatenate(
            [
                np.log(self.lengthscales),
                [np.log(self.signal_variance), np.log(self.noise_variance), self.mean],
            ]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "GpHyperparameters":
        vec = np.asarray(vec, dtype=np.float64)
        d = vec.size - 3
        return cls(
            signal_variance=float(np.exp(vec[d])),
            lengthscales=np.exp(vec[:d]),
            noise_variance=float(np.exp(vec[d + 1])),
            mean=float(vec[d + 2]),
        )


def rbf_kernel(xa: np.ndarray, xb: np.ndarray, hyper: GpHyperparameters) -> np.ndarray:
    """Kernel matrix between row sets xa (Na, D) and xb (Nb, D)."""
    xa = np.atleast_2d(np.asarray(xa, dtype=np.float64))
    xb = np.atleast_2d(np.asarray(xb, dtype=np.float64))
    sa = xa / hyper.lengthscales
    sb = xb / hyper.lengthscales
    sq = (
        np.sum(sa**2, axis=1)[:, None]
        - 2.0 * sa @ sb.T
        + np.sum(sb**2, axis=1)[None, :]
    )
    return hyper.signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def _chol_with_jitter(A: np.ndarray, k_trace: float):
    """Cholesky of A, escalating a relative jitter on failure."""
    try:
        return cho_factor(A, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    base = k_trace / A.shape[0]
    jitter = JITTER_START_REL * base
    while jitter <= JITTER_MAX_REL * base:
        try:
            return cho_factor(A + jitter * np.eye(A.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericError(
        f"covariance factorization failed after jitter escalation to {jitter / base:.0e} relative"
    )


def log_marginal_likelihood(vec: np.ndarray, x: np.ndarray, y: np.ndarray):
    """(L, dL/dvec) at the log-space coordinates ``vec``.

    Gradients use dL/dθ = ½ tr((ααᵀ − A⁻¹) ∂A/∂θ) with α = A⁻¹ r, plus
    dL/dμ = Σ α.
    """
    hyper = GpHyperparameters.from_vector(vec)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    K = rbf_kernel(x, x, hyper)
    A = K + hyper.noise_variance * np.eye(n)
    cf, _ = _chol_with_jitter(A, float(np.trace(K)))
    r = y - hyper.mean
    alpha = cho_solve(cf, r)
    log_det = 2.0 * np.sum(np.log(np.diag(cf[0])))
    lml = -0.5 * float(r @ alpha) - 0.5 * log_det - 0.5 * n * np.log(2.0 * np.pi)

    A_inv = cho_solve(cf, np.eye(n))
    W = np.outer(alpha, alpha) - A_inv
    grad = np.empty(d + 3)
    for j in range(d):
        sq_j = ((x[:, j, None] - x[None, :, j]) / hyper.lengthscales[j]) ** 2
        grad[j] = 0.5 * float(np.sum(W * (K * sq_j)))
    grad[d] = 0.5 * float(np.sum(W * K))  # d/d log σ_f²: ∂A = K
    grad[d + 1] = 0.5 * hyper.noise_variance * float(np.trace(W))
    grad[d + 2] = float(np.sum(alpha))
    return lml, grad


@dataclass(frozen=True)
class GpPosterior:
    hyper: GpHyperparameters
    x: np.ndarray  # (N, D)
    y: np.ndarray  # (N,)
    log_marginal_likelihood: float
    jitter: float
    alpha: np.ndarray  # A⁻¹ (y − μ)
    chol_lower: np.ndarray  # L with A = L Lᵀ

    @property
    def n_train(self) -> int:
        return self.x.shape[0]


def _posterior_from(hyper, x, y) -> GpPosterior:
    n = x.shape[0]
    K = rbf_kernel(x, x, hyper)
    A = K + hyper.noise_variance * np.eye(n)
    cf, jitter = _chol_with_jitter(A, float(np.trace(K)))
    r = y - hyper.mean
    alpha = cho_solve(cf, r)
    log_det = 2.0 * np.sum(np.log(np.diag(cf[0])))
    lml = -0.5 * float(r @ alpha) - 0.5 * log_det - 0.5 * n * np.log(2.0 * np.pi)
    return GpPosterior(
        hyper=hyper,
        x=x,
        y=y,
        log_marginal_likelihood=lml,
        jitter=jitter,
        alpha=alpha,
        chol_lower=np.tril(cf[0]),
    )


def fit_gp(
    x: np.ndarray,
    y: np.ndarray,
    *,
    n_restarts: int = 5,
    seed: int = 0,
    max_points: int = 2000,
) -> GpPosterior:
    """Fit hyperparameters by multi-restart LML maximization.

    Restart 0 starts from moment-based values (lengthscale = input std,
    signal = target variance, noise = 10% of it, mean = target mean); the
    remaining restarts perturb the log-coordinates with seeded Gaussian
    noise. Data beyond ``max_points`` rows is subsampled with the same seed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0] or x.shape[0] < 1:
        raise ValueError("x and y must hold the same positive number of rows")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    rng = np.random.default_rng(seed)
    if x.shape[0] > max_points:
        keep = rng.choice(x.shape[0], size=max_points, replace=False)
        x, y = x[keep], y[keep]

    y_std = max(float(np.std(y)), 1e-3)
    x_std = np.maximum(np.std(x, axis=0), 1e-3)
    base = GpHyperparameters(
        signal_variance=y_std**2,
        lengthscales=x_std,
        noise_variance=0.1 * y_std**2,
        mean=float(np.mean(y)),
    ).to_vector()

    def objective(vec):
        try:
            lml, grad = log_marginal_likelihood(vec, x, y)
        except NumericError:
            return 1e12, np.zeros_like(vec)
        return -lml, -grad

    bounds = [(-15.0, 15.0)] * (x.shape[1] + 2) + [(None, None)]
    best = None
    for k in range(max(1, n_restarts)):
        start = base if k == 0 else base + np.concatenate([rng.normal(0, 0.5, x.shape[1] + 2), [0.0]])
        res = optimize.minimize(
            objective, start, jac=True, method="L-BFGS-B", bounds=bounds
        )
        if best is None or res.fun < best.fun:
            best = res
    hyper = GpHyperparameters.from_vector(best.x)
    return _posterior_from(hyper, x, y)


def gp_predict(
    posterior: GpPosterior, x_star: np.ndarray, include_noise: bool = True
):
    """Posterior mean and variance at x_star (M, D); ``include_noise`` adds
    σ² so the intervals describe observations rather than the latent f."""
    x_star = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
    if x_star.shape[1] != posterior.x.shape[1]:
        raise ValueError("prediction inputs must match the training dimension")
    hyper = posterior.hyper
    k_star = rbf_kernel(x_star, posterior.x, hyper)  # (M, N)
    mean = hyper.mean + k_star @ posterior.alpha
    # diag(K** − K*ᵀ A⁻¹ K*) via the triangular solve L⁻¹ K*ᵀ
    tmp = solve_triangular(posterior.chol_lower, k_star.T, lower=True)
    var = hyper.signal_variance - np.sum(tmp**2, axis=0)
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + hyper.noise_variance
    return mean, var


def gp_summary(
    posterior: GpPosterior,
    x_star: np.ndarray,
    levels: np.ndarray | None = None,
    include_noise: bool = True,
) -> PredictiveSummary:
    """Gaussian central intervals at the configured coverage levels."""
    levels = DEFAULT_LEVELS if levels is None else np.asarray(levels, dtype=np.float64)
    mean, var = gp_predict(posterior, x_star, include_noise=include_noise)
    std = np.sqrt(var)
    z = stats.norm.ppf((1.0 + levels) / 2.0)
    lower = mean[None, :] - z[:, None] * std[None, :]
    upper = mean[None, :] + z[:, None] * std[None, :]
    return PredictiveSummary(
        x=np.atleast_2d(np.asarray(x_star, dtype=np.float64)),
        mean=mean,
        levels=levels,
        lower=lower,
        upper=upper,
    )
