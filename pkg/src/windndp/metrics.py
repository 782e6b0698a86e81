"""Evaluation: pointwise errors, interval calibration, and the
shared-fixture protocol that compares models on identical test functions.

Per test sample the report carries MAE and RMSE in physical units (kW for
turbine data) plus the coverage error CE: the mean over nominal levels q of
|empirical coverage at q − q|. Intervals are closed, so zero-width intervals
cover (almost surely) nothing and infinitely wide ones cover everything;
both score CE = 0.5 for the default level grid.

`evaluate_protocol` runs one model adapter over a fixed list of test
functions and nested context pools, once per requested context size, with
per-run seeds derived from a single protocol seed — so reports are
reproducible and different models see byte-identical fixtures.

`pca_embeddings` and `encoder_separation` implement the task-embedding
analysis: project context embeddings onto the top two principal components
and compare between-task to within-task scatter per context-size bucket.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import pandas as pd
from scipy import stats as sstats

from .diffusion import (
    DEFAULT_LEVELS,
    ContextSet,
    FunctionSample,
    PredictiveSummary,
    sample_many,
    summarize,
)
from .encoder import TaskEncoder, encode_context
from .errors import ConfigurationError
from .gp import GpPosterior, gp_summary
from .scada import NormalizationStats, destandardize_target
from .schedules import VarianceSchedule

__all__ = [
    "DEFAULT_CONTEXT_SIZES",
    "DEFAULT_BUCKETS",
    "SampleMetrics",
    "MetricsReport",
    "PredictiveAdapter",
    "GpAdapter",
    "DiffusionAdapter",
    "mae_rmse",
    "empirical_coverage",
    "coverage_error",
    "evaluate_protocol",
    "EmbeddingProjection",
    "pca_embeddings",
    "separation_ratio",
    "encoder_separation",
]

DEFAULT_CONTEXT_SIZES = (0, 25, 50)
DEFAULT_BUCKETS = ((0, 4), (23, 27), (46, 50))


# --------------------------------------------------------------------------
# pointwise metrics
# --------------------------------------------------------------------------


def mae_rmse(y: np.ndarray, y_hat: np.ndarray) -> tuple[float, float]:
    """Mean absolute and root-mean-square error of a point prediction."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1 or y.size == 0:
        raise ValueError(f"need equal-length non-empty vectors, got {y.shape} vs {y_hat.shape}")
    residual = y - y_hat
    return float(np.mean(np.abs(residual))), float(np.sqrt(np.mean(residual**2)))


def empirical_coverage(y: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Fraction of points inside each closed interval row: (|Q|,)."""
    y = np.asarray(y, dtype=np.float64)
    inside = (y[None, :] >= lower) & (y[None, :] <= upper)
    return inside.mean(axis=1)


def coverage_error(
    y: np.ndarray, lower: np.ndarray, upper: np.ndarray, levels: np.ndarray
) -> tuple[float, np.ndarray]:
    """CE = mean over q of |empirical coverage at q − q|.

    Returns (CE, per-level empirical coverage). For nested interval
    families coverage must be non-decreasing in q; violations indicate a
    malformed summary and are rejected.
    """
    y = np.asarray(y, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    if lower.shape != upper.shape or lower.ndim != 2:
        raise ValueError("lower/upper must be matching (|Q|, N) arrays")
    if lower.shape[0] != levels.shape[0] or lower.shape[1] != y.shape[0]:
        raise ValueError(
            f"interval grid {lower.shape} does not match {levels.shape[0]} levels "
            f"and {y.shape[0]} points"
        )
    coverage = empirical_coverage(y, lower, upper)
    if np.any(np.diff(coverage) < 0):
        raise ValueError("nested intervals must give non-decreasing coverage in q")
    return float(np.mean(np.abs(coverage - levels))), coverage


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleMetrics:
    task_id: str
    context_size: int
    index: int
    mae: float
    rmse: float
    ce: float
    coverage: np.ndarray  # (|Q|,) empirical coverage per level

    def __post_init__(self):
        cov = np.asarray(self.coverage, dtype=np.float64)
        cov.setflags(write=False)
        object.__setattr__(self, "coverage", cov)
        if self.mae > self.rmse + 1e-12:
            raise ValueError("MAE cannot exceed RMSE")


@dataclass
class MetricsReport:
    model: str
    levels: np.ndarray
    samples: list[SampleMetrics]
    feature_set: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def context_sizes(self) -> tuple[int, ...]:
        return tuple(sorted({s.context_size for s in self.samples}))

    def subset(self, context_size: int) -> list[SampleMetrics]:
        return [s for s in self.samples if s.context_size == context_size]

    def aggregate(self, context_size: int) -> dict:
        rows = self.subset(context_size)
        if not rows:
            raise ValueError(f"no samples at context size {context_size}")
        out = {"context_size": context_size, "n_samples": len(rows)}
        for name in ("mae", "rmse", "ce"):
            vals = np.array([getattr(s, name) for s in rows])
            out[f"{name}_mean"] = float(vals.mean())
            out[f"{name}_std"] = float(vals.std())
        return out

    def aggregates(self) -> list[dict]:
        return [self.aggregate(cs) for cs in self.context_sizes]

    def coverage_curve(self, context_size: int) -> tuple[np.ndarray, np.ndarray]:
        """(nominal levels, observed coverage averaged over samples)."""
        rows = self.subset(context_size)
        if not rows:
            raise ValueError(f"no samples at context size {context_size}")
        observed = np.mean([s.coverage for s in rows], axis=0)
        return self.levels.copy(), observed

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "model": self.model,
                "task_id": [s.task_id for s in self.samples],
                "context_size": [s.context_size for s in self.samples],
                "index": [s.index for s in self.samples],
                "mae": [s.mae for s in self.samples],
                "rmse": [s.rmse for s in self.samples],
                "ce": [s.ce for s in self.samples],
            }
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "feature_set": self.feature_set,
            "levels": [float(q) for q in self.levels],
            "meta": self.meta,
            "samples": [
                {
                    "task_id": s.task_id,
                    "context_size": s.context_size,
                    "index": s.index,
                    "mae": s.mae,
                    "rmse": s.rmse,
                    "ce": s.ce,
                    "coverage": [float(c) for c in s.coverage],
                }
                for s in self.samples
            ],
            "aggregates": self.aggregates(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            model=d["model"],
            levels=np.asarray(d["levels"], dtype=np.float64),
            samples=[
                SampleMetrics(
                    task_id=s["task_id"],
                    context_size=int(s["context_size"]),
                    index=int(s["index"]),
                    mae=float(s["mae"]),
                    rmse=float(s["rmse"]),
                    ce=float(s["ce"]),
                    coverage=np.asarray(s["coverage"], dtype=np.float64),
                )
                for s in d["samples"]
            ],
            feature_set=d.get("feature_set"),
            meta=d.get("meta", {}),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# model adapters
# --------------------------------------------------------------------------


class PredictiveAdapter(Protocol):
    name: str

    def predict_batch(
        self,
        samples: Sequence[FunctionSample],
        contexts: Sequence[ContextSet],
        seeds: Sequence[int],
    ) -> list[PredictiveSummary]: ...


class GpAdapter:
    """Exact GP baseline fit once on a turbine's training rows.

    The posterior never changes with the evaluation context set, so its
    metrics are constant across context sizes; it anchors the comparison.
    """

    def __init__(
        self,
        posterior: GpPosterior,
        include_noise: bool = True,
        levels: np.ndarray | None = None,
        name: str = "gp",
    ):
        self.posterior = posterior
        self.include_noise = include_noise
        self.levels = DEFAULT_LEVELS if levels is None else np.asarray(levels, dtype=np.float64)
        self.name = name

    def predict_batch(self, samples, contexts, seeds):
        return [
            gp_summary(self.posterior, s.x, levels=self.levels, include_noise=self.include_noise)
            for s in samples
        ]


class DiffusionAdapter:
    """Trajectory sampling wrapper for the denoiser (with optional task
    encoder); one batched reverse walk per call, one bundle per sample."""

    def __init__(
        self,
        model,
        schedule: VarianceSchedule,
        encoder: TaskEncoder | None = None,
        n_trajectories: int = 200,
        levels: np.ndarray | None = None,
        name: str | None = None,
        chunk: int = 256,
    ):
        self.model = model
        self.schedule = schedule
        self.encoder = encoder
        self.n_trajectories = int(n_trajectories)
        self.levels = DEFAULT_LEVELS if levels is None else np.asarray(levels, dtype=np.float64)
        self.name = name or ("mt-ndp" if encoder is not None else "ndp")
        self.chunk = chunk

    def predict_batch(self, samples, contexts, seeds):
        runs = [(s.x, c) for s, c in zip(samples, contexts)]
        bundles = sample_many(
            self.model,
            self.schedule,
            runs,
            self.n_trajectories,
            list(seeds),
            encoder=self.encoder,
            chunk=self.chunk,
        )
        return [summarize(b, self.levels) for b in bundles]


# --------------------------------------------------------------------------
# protocol
# --------------------------------------------------------------------------


def _run_seeds(seed: int, context_size: int, count: int) -> list[int]:
    seq = np.random.SeedSequence([int(seed), int(context_size)])
    return [int(v) for v in seq.generate_state(count)]


def evaluate_protocol(
    adapter: PredictiveAdapter,
    samples: Sequence[FunctionSample],
    contexts: Sequence[ContextSet],
    context_sizes: Sequence[int] = DEFAULT_CONTEXT_SIZES,
    stats: NormalizationStats | None = None,
    seed: int = 0,
    levels: np.ndarray | None = None,
    feature_set: str | None = None,
    meta: dict | None = None,
) -> MetricsReport:
    """Evaluate one model on shared fixtures at each context size.

    ``contexts[i]`` is sample i's context pool; size c uses its first c
    points, so pools are nested across context sizes and identical for
    every model evaluated on the same fixtures. With ``stats`` given,
    predictions and targets are mapped back to physical units before
    metrics. Sampling seeds derive from (seed, context size, sample index).
    """
    if len(samples) == 0 or len(samples) != len(contexts):
        raise ValueError("need matching non-empty samples and context pools")
    context_sizes = [int(c) for c in context_sizes]
    short = min(c.size for c in contexts)
    if max(context_sizes) > short:
        raise ConfigurationError(
            f"context size {max(context_sizes)} exceeds smallest pool ({short})"
        )
    levels = DEFAULT_LEVELS if levels is None else np.asarray(levels, dtype=np.float64)
    rows: list[SampleMetrics] = []
    for cs in context_sizes:
        taken = [c.take(cs) for c in contexts]
        seeds = _run_seeds(seed, cs, len(samples))
        summaries = adapter.predict_batch(samples, taken, seeds)
        for i, (sample, summary) in enumerate(zip(samples, summaries)):
            if stats is not None:
                summary = summary.affine(stats.target_std, stats.target_mean)
                y = destandardize_target(sample.y, stats)
            else:
                y = sample.y
            mae, rmse = mae_rmse(y, summary.mean)
            ce, coverage = coverage_error(y, summary.lower, summary.upper, levels)
            rows.append(
                SampleMetrics(
                    task_id=sample.task_id,
                    context_size=cs,
                    index=i,
                    mae=mae,
                    rmse=rmse,
                    ce=ce,
                    coverage=coverage,
                )
            )
    report_meta = {"seed": int(seed), "n_test": len(samples), "context_sizes": context_sizes}
    if meta:
        report_meta.update(meta)
    return MetricsReport(
        model=adapter.name,
        levels=levels,
        samples=rows,
        feature_set=feature_set,
        meta=report_meta,
    )


# --------------------------------------------------------------------------
# embedding analysis
# --------------------------------------------------------------------------


@dataclass
class EmbeddingProjection:
    components: np.ndarray  # (k, K) orthonormal rows, k ∈ {1, 2}
    explained_variance: np.ndarray  # (k,) non-increasing
    explained_variance_ratio: np.ndarray
    points: np.ndarray  # (n, k) projected embeddings
    labels: tuple[str, ...]
    group_means: dict
    ellipses: dict  # 68% Gaussian ellipse per group: center/axis_lengths/angle
    degenerate: bool = False


def _ellipse_68(points: np.ndarray) -> dict:
    center = points.mean(axis=0)
    k = points.shape[1]
    if points.shape[0] < 2:
        return {"center": center, "axis_lengths": np.zeros(k), "angle": 0.0}
    cov = np.cov(points, rowvar=False).reshape(k, k)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    radius = np.sqrt(sstats.chi2.ppf(0.68, df=k) * vals)
    angle = float(np.arctan2(vecs[1, 0], vecs[0, 0])) if k == 2 else 0.0
    return {"center": center, "axis_lengths": radius, "angle": angle}


def pca_embeddings(embeddings: np.ndarray, labels: Sequence[str] | None = None) -> EmbeddingProjection:
    """Project embeddings onto their top two principal components.

    Rank-deficient clouds (fewer than two directions of variance) fall back
    to a single component with a warning.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two embeddings of equal dimension")
    labels = tuple(str(v) for v in (labels if labels is not None else [""] * x.shape[0]))
    if len(labels) != x.shape[0]:
        raise ValueError("one label per embedding required")
    centered = x - x.mean(axis=0)
    cov = np.cov(centered, rowvar=False).reshape(x.shape[1], x.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    vals = np.clip(vals, 0.0, None)
    total = float(vals.sum())
    tol = max(vals[0], 1.0) * 1e-12
    rank = int(np.sum(vals > tol))
    n_comp = 2
    degenerate = False
    if rank < 2 or x.shape[1] < 2:
        degenerate = True
        n_comp = 1
        warnings.warn(
            f"embedding cloud has rank {rank}; falling back to one principal component",
            RuntimeWarning,
            stacklevel=2,
        )
    components = vecs[:, :n_comp].T
    points = centered @ components.T
    group_means, ellipses = {}, {}
    for g in dict.fromkeys(labels):
        sel = points[np.array([lab == g for lab in labels])]
        group_means[g] = sel.mean(axis=0)
        ellipses[g] = _ellipse_68(sel)
    return EmbeddingProjection(
        components=components,
        explained_variance=vals[:n_comp],
        explained_variance_ratio=vals[:n_comp] / total if total > 0 else np.zeros(n_comp),
        points=points,
        labels=labels,
        group_means=group_means,
        ellipses=ellipses,
        degenerate=degenerate,
    )


def separation_ratio(points: np.ndarray, labels: Sequence[str]) -> float:
    """Between-group over within-group scatter (trace form).

    between = Σ_g n_g‖μ_g − μ‖², within = Σ_g Σ_{i∈g}‖x_i − μ_g‖².
    Returns inf when groups are point masses but separated.
    """
    x = np.asarray(points, dtype=np.float64)
    labels = list(labels)
    if len(labels) != x.shape[0] or len(set(labels)) < 2:
        raise ValueError("need labeled points from at least two groups")
    grand = x.mean(axis=0)
    between = within = 0.0
    for g in set(labels):
        sel = x[np.array([lab == g for lab in labels])]
        mu = sel.mean(axis=0)
        between += sel.shape[0] * float(np.sum((mu - grand) ** 2))
        within += float(np.sum((sel - mu) ** 2))
    if within == 0.0:
        return float("inf") if between > 0 else 0.0
    return between / within


def encoder_separation(
    encoder: TaskEncoder,
    pools: dict[str, tuple[np.ndarray, np.ndarray]],
    buckets: Sequence[tuple[int, int]] = DEFAULT_BUCKETS,
    draws_per_task: int = 40,
    seed: int = 0,
) -> dict:
    """Per context-size bucket: embed random context draws from each task's
    pool, project with PCA, and report the between/within-task ratio.

    ``pools[task] = (x, y)`` rows to draw context points from. Bucket
    (lo, hi) draws sizes uniformly from {lo..hi}, capped by the pool.
    """
    if len(pools) < 2:
        raise ValueError("need pools for at least two tasks")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    out = {}
    for lo, hi in buckets:
        if not 0 <= lo <= hi:
            raise ValueError(f"bad bucket ({lo}, {hi})")
        vectors, labels = [], []
        for task in sorted(pools):
            x, y = pools[task]
            x = np.asarray(x, dtype=np.float64)
            y = np.asarray(y, dtype=np.float64)
            for _ in range(draws_per_task):
                c = int(rng.integers(lo, hi + 1))
                c = min(c, x.shape[0])
                idx = rng.choice(x.shape[0], size=c, replace=False)
                vectors.append(encode_context(encoder, x[idx], y[idx]).vector)
                labels.append(task)
        cloud = np.asarray(vectors)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            projection = pca_embeddings(cloud, labels)
        out[f"{lo}-{hi}"] = {
            "bucket": (lo, hi),
            "ratio": separation_ratio(projection.points, labels),
            "projection": projection,
        }
    return out
