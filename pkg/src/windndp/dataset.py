"""Columnar dataset directories shared by the turbine and synthetic
pipelines.

Layout::

    <root>/
      manifest.json   source, feature set, task list, split setup,
                      per-task filter counts or generator settings,
                      per-file digests
      stats.json      per-task standardization statistics
      tasks/<task_id>.csv

Turbine tables store standardized rows ``timestamp, x0.., y, split``;
synthetic tables store whole functions as rows ``sample_id, role, x0..,
y, split`` where role is ``target`` or ``context`` (context rows are the
function's on-curve context pool, disjoint from its targets).

Everything written here is deterministic for a given ingest seed, so the
dataset digest doubles as a reproducibility check.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .diffusion import ContextSet, FunctionSample
from .errors import ConfigurationError
from .scada import NormalizationStats, make_function_samples
from .synthetic import SyntheticTaskSpec, sample_gp_functions

__all__ = [
    "FORMAT_VERSION",
    "Dataset",
    "write_dataset",
    "load_dataset",
    "dataset_digest",
    "scada_table",
    "synthetic_tables",
    "functions_to_table",
    "table_to_functions",
    "training_functions",
    "eval_fixtures",
]

FORMAT_VERSION = 1


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _x_columns(frame: pd.DataFrame) -> list[str]:
    cols = [c for c in frame.columns if c.startswith("x") and c[1:].isdigit()]
    return sorted(cols, key=lambda c: int(c[1:]))


# --------------------------------------------------------------------------
# table builders
# --------------------------------------------------------------------------


def scada_table(
    records: pd.DataFrame, x: np.ndarray, y: np.ndarray, stats: NormalizationStats
) -> pd.DataFrame:
    """Standardized per-turbine rows; ``records`` supplies timestamp and
    split tags aligned with the feature rows."""
    if len(records) != x.shape[0]:
        raise ValueError("records and features must align")
    xz = (x - stats.feature_mean) / stats.feature_std
    yz = (y - stats.target_mean) / stats.target_std
    out = pd.DataFrame({"timestamp": records["timestamp"].to_numpy()})
    for j in range(x.shape[1]):
        out[f"x{j}"] = xz[:, j]
    out["y"] = yz
    out["split"] = records["split"].to_numpy()
    return out


def functions_to_table(
    samples: list[FunctionSample],
    contexts: list[ContextSet] | None,
    split: str,
    start_id: int = 0,
) -> pd.DataFrame:
    """Flatten whole functions into rows keyed by sample id and role."""
    frames = []
    contexts = contexts or [None] * len(samples)
    for offset, (s, c) in enumerate(zip(samples, contexts)):
        sid = start_id + offset
        block = {"sample_id": sid, "role": "target"}
        rows = pd.DataFrame(block, index=range(s.n_points))
        for j in range(s.input_dim):
            rows[f"x{j}"] = s.x[:, j]
        rows["y"] = s.y
        frames.append(rows)
        if c is not None and c.size:
            crows = pd.DataFrame({"sample_id": sid, "role": "context"}, index=range(c.size))
            for j in range(s.input_dim):
                crows[f"x{j}"] = c.x[:, j]
            crows["y"] = c.y
            frames.append(crows)
    table = pd.concat(frames, ignore_index=True)
    table["split"] = split
    return table


def table_to_functions(
    table: pd.DataFrame, task_id: str, split: str | None = None
) -> tuple[list[FunctionSample], list[ContextSet]]:
    """Regroup stored rows into functions (inverse of functions_to_table)."""
    if split is not None:
        table = table[table["split"] == split]
    xcols = _x_columns(table)
    samples, contexts = [], []
    for sid in sorted(table["sample_id"].unique()):
        block = table[table["sample_id"] == sid]
        tgt = block[block["role"] == "target"]
        ctx = block[block["role"] == "context"]
        samples.append(
            FunctionSample(
                x=tgt[xcols].to_numpy(dtype=np.float64),
                y=tgt["y"].to_numpy(dtype=np.float64),
                task_id=task_id,
            )
        )
        contexts.append(
            ContextSet(
                x=ctx[xcols].to_numpy(dtype=np.float64),
                y=ctx["y"].to_numpy(dtype=np.float64),
                task_id=task_id,
            )
        )
    return samples, contexts


def synthetic_tables(
    spec: SyntheticTaskSpec,
    n_train: int,
    n_test: int,
    n_points: int,
    context_size: int,
    seed: int = 0,
) -> dict[str, pd.DataFrame]:
    """Fixed train/test function corpora for every task in the family."""
    tables = {}
    for k in range(spec.n_tasks):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
        parts = []
        if n_train:
            s, c = sample_gp_functions(
                spec, n_train, n_points, rng, task_index=k, context_size=context_size
            )
            parts.append(functions_to_table(s, c, "train"))
        if n_test:
            s, c = sample_gp_functions(
                spec, n_test, n_points, rng, task_index=k, context_size=context_size
            )
            parts.append(functions_to_table(s, c, "test", start_id=n_train))
        tables[spec.task_id(k)] = pd.concat(parts, ignore_index=True)
    return tables


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    manifest: dict
    stats: dict[str, NormalizationStats]
    tables: dict[str, pd.DataFrame]

    @property
    def source(self) -> str:
        return self.manifest["source"]

    @property
    def feature_set(self) -> str | None:
        return self.manifest.get("feature_set")

    @property
    def input_dim(self) -> int:
        return int(self.manifest["input_dim"])

    @property
    def task_ids(self) -> list[str]:
        return list(self.manifest["tasks"])

    def rows(self, task_id: str, split: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Standardized (x, y) row pool for a turbine-style table."""
        table = self.tables[task_id]
        if split is not None:
            table = table[table["split"] == split]
        xcols = _x_columns(table)
        return (
            table[xcols].to_numpy(dtype=np.float64),
            table["y"].to_numpy(dtype=np.float64),
        )

    def stored_functions(self, task_id: str, split: str):
        if self.source != "synthetic":
            raise ConfigurationError(f"{self.source} datasets store rows, not functions")
        return table_to_functions(self.tables[task_id], task_id, split)


def write_dataset(
    root: str | Path,
    *,
    source: str,
    input_dim: int,
    tables: dict[str, pd.DataFrame],
    stats: dict[str, NormalizationStats],
    feature_set: str | None = None,
    extra: dict | None = None,
) -> Path:
    root = Path(root)
    if set(tables) != set(stats):
        raise ValueError("tables and stats must cover the same tasks")
    (root / "tasks").mkdir(parents=True, exist_ok=True)
    files = {}
    for task_id in sorted(tables):
        rel = f"tasks/{task_id}.csv"
        # 17 significant digits make the float64 round-trip exact
        payload = tables[task_id].to_csv(index=False, float_format="%.17g").encode()
        (root / rel).write_bytes(payload)
        files[rel] = _sha256_bytes(payload)
    stats_payload = json.dumps(
        {tid: s.as_dict() for tid, s in sorted(stats.items())}, indent=2, sort_keys=True
    ).encode()
    (root / "stats.json").write_bytes(stats_payload)
    files["stats.json"] = _sha256_bytes(stats_payload)
    manifest = {
        "format_version": FORMAT_VERSION,
        "source": source,
        "feature_set": feature_set,
        "input_dim": int(input_dim),
        "tasks": sorted(tables),
        "files": files,
    }
    manifest.update(extra or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root: str | Path, verify: bool = True) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported dataset format {manifest.get('format_version')!r}"
        )
    if verify:
        from .errors import IntegrityError

        for rel, digest in manifest["files"].items():
            got = _sha256_bytes((root / rel).read_bytes())
            if got != digest:
                raise IntegrityError(
                    f"{rel}: digest mismatch, manifest {digest}, file {got}"
                )
    stats_raw = json.loads((root / "stats.json").read_text())
    stats = {tid: NormalizationStats.from_dict(d) for tid, d in stats_raw.items()}
    tables = {}
    for task_id in manifest["tasks"]:
        frame = pd.read_csv(root / "tasks" / f"{task_id}.csv", float_precision="round_trip")
        if "timestamp" in frame.columns:
            frame["timestamp"] = pd.to_datetime(frame["timestamp"])
        tables[task_id] = frame
    return Dataset(root=root, manifest=manifest, stats=stats, tables=tables)


def dataset_digest(root: str | Path) -> str:
    """Digest of the manifest-listed payload files (stable across rewrites
    of the manifest itself)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    lines = [f"{rel}:{digest}" for rel, digest in sorted(manifest["files"].items())]
    return _sha256_bytes("\n".join(lines).encode())


# --------------------------------------------------------------------------
# fixture assembly
# --------------------------------------------------------------------------


def training_functions(
    dataset: Dataset,
    task_ids: list[str] | None = None,
    *,
    n_functions: int = 0,
    n_points: int = 100,
    context_pool: int = 0,
    seed: int = 0,
) -> tuple[list[FunctionSample], list[ContextSet]]:
    """Training corpus: stored functions for synthetic datasets, seeded row
    draws from the train split for turbine datasets (``n_functions`` per
    task, each with a disjoint on-turbine context pool)."""
    task_ids = task_ids if task_ids is not None else dataset.task_ids
    unknown = [t for t in task_ids if t not in dataset.tables]
    if unknown:
        raise ConfigurationError(f"dataset has no task(s) {unknown}")
    samples: list[FunctionSample] = []
    pools: list[ContextSet] = []
    if dataset.source == "synthetic":
        for tid in task_ids:
            s, c = dataset.stored_functions(tid, "train")
            samples.extend(s)
            pools.extend(c)
        return samples, pools
    if n_functions <= 0:
        raise ConfigurationError("row datasets need n_functions > 0")
    for tid in task_ids:
        x, y = dataset.rows(tid, "train")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), _task_key(tid)]))
        s, c = make_function_samples(
            x, y, n_points, n_functions, rng, context_size=context_pool, task_id=tid
        )
        samples.extend(s)
        pools.extend(c)
    return samples, pools


def eval_fixtures(
    dataset: Dataset,
    task_id: str,
    *,
    n_test: int = 30,
    n_points: int = 100,
    context_pool: int = 50,
    seed: int = 0,
) -> tuple[list[FunctionSample], list[ContextSet]]:
    """Shared evaluation fixtures for one task.

    Synthetic datasets return their stored test functions with on-function
    context pools. Turbine datasets draw target rows from the test split
    and context pools from the train split (the turbine's observed data),
    both seeded, so every model sees the same fixtures.
    """
    if task_id not in dataset.tables:
        raise ConfigurationError(f"dataset has no task {task_id!r}")
    if dataset.source == "synthetic":
        samples, contexts = dataset.stored_functions(task_id, "test")
        if len(samples) < n_test:
            raise ConfigurationError(
                f"{task_id}: {len(samples)} stored test functions < n_test={n_test}"
            )
        samples, contexts = samples[:n_test], contexts[:n_test]
        short = min(c.size for c in contexts)
        if short < context_pool:
            raise ConfigurationError(
                f"{task_id}: stored context pools ({short}) smaller than {context_pool}"
            )
        return samples, [c.take(context_pool) for c in contexts]
    seq = np.random.SeedSequence([int(seed), _task_key(task_id)])
    rng_t, rng_c = (np.random.default_rng(s) for s in seq.spawn(2))
    x_test, y_test = dataset.rows(task_id, "test")
    samples, _ = make_function_samples(x_test, y_test, n_points, n_test, rng_t, task_id=task_id)
    x_train, y_train = dataset.rows(task_id, "train")
    pool_fns, _ = make_function_samples(
        x_train, y_train, context_pool, n_test, rng_c, task_id=task_id
    )
    contexts = [ContextSet(x=f.x, y=f.y, task_id=task_id) for f in pool_fns]
    return samples, contexts


def _task_key(task_id: str) -> int:
    return int.from_bytes(hashlib.sha256(task_id.encode()).digest()[:4], "big")
