"""SCADA ingestion: Kelmarsh-format files to standardized function samples.

Records are ten-minute bins treated as half-open intervals [ts, ts+10min).
Filtering drops, per turbine:

* bins overlapping any standby / warning / stop event (event intervals are
  closed, so an event ending exactly at a bin's start still removes it);
* bins inside the half-open week [outage_start − 7 days, outage_start)
  before each forced outage;
* rows with missing values in the channels the chosen feature set needs.

Feature sets: F1 = [wind speed]; F3 = F1 + [sin(direction), cos(direction)];
F5 = F3 + [nacelle temperature, transformer temperature]; the target is
always mean power (kW). Standardization is per turbine with statistics from
that turbine's training split only.

All column names, event-category vocabulary and file-discovery globs are
configuration, since status-log vocabularies vary between exports.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .diffusion import ContextSet, FunctionSample
from .errors import ConfigurationError, IntegrityError, NumericError

__all__ = [
    "ScadaColumnMap",
    "StatusColumnMap",
    "FilterCounts",
    "NormalizationStats",
    "FEATURE_SETS",
    "fetch_dataset",
    "read_scada_csv",
    "read_status_csv",
    "filter_records",
    "build_features",
    "fit_stats",
    "standardize",
    "destandardize_target",
    "assign_split",
    "make_function_samples",
]

BIN_MINUTES = 10

#: channels each feature set needs, in feature order (power is the target)
FEATURE_SETS = {
    "F1": ("wind_speed",),
    "F3": ("wind_speed", "wind_direction"),
    "F5": ("wind_speed", "wind_direction", "nacelle_temp", "transformer_temp"),
}


@dataclass(frozen=True)
class ScadaColumnMap:
    """Raw-file column names for the ten-minute data export."""

    timestamp: str = "# Date and time"
    wind_speed: str = "Wind speed (m/s)"
    wind_direction: str = "Wind direction (°)"
    power: str = "Power (kW)"
    nacelle_temp: str = "Nacelle ambient temperature (°C)"
    transformer_temp: str = "Transformer temperature (°C)"
    skip_rows: int = 9

    def channels(self) -> dict[str, str]:
        return {
            "timestamp": self.timestamp,
            "wind_speed": self.wind_speed,
            "wind_direction": self.wind_direction,
            "power": self.power,
            "nacelle_temp": self.nacelle_temp,
            "transformer_temp": self.transformer_temp,
        }


@dataclass(frozen=True)
class StatusColumnMap:
    """Raw-file column names and category vocabulary for the status log."""

    start: str = "Timestamp start"
    end: str = "Timestamp end"
    category: str = "Status"
    skip_rows: int = 9
    # raw label (lower-cased) → {standby, warning, stop, forced_outage}
    category_map: dict = field(
        default_factory=lambda: {
            "standby": "standby",
            "warning": "warning",
            "stop": "stop",
            "forced outage": "forced_outage",
        }
    )


@dataclass
class FilterCounts:
    input_rows: int = 0
    event_overlap: int = 0
    outage_window: int = 0
    missing_values: int = 0
    retained: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-turbine feature/target means and stds from the training split."""

    feature_mean: np.ndarray  # (D,)
    feature_std: np.ndarray  # (D,)
    target_mean: float
    target_std: float

    def __post_init__(self):
        fm = np.asarray(self.feature_mean, dtype=np.float64)
        fs = np.asarray(self.feature_std, dtype=np.float64)
        for a in (fm, fs):
            a.setflags(write=False)
        object.__setattr__(self, "feature_mean", fm)
        object.__setattr__(self, "feature_std", fs)
        if np.any(fs <= 0) or self.target_std <= 0:
            raise NumericError("degenerate feature: zero standard deviation")

    def as_dict(self) -> dict:
        return {
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_std": [float(v) for v in self.feature_std],
            "target_mean": float(self.target_mean),
            "target_std": float(self.target_std),
        }

    @classmethod
    def identity(cls, input_dim: int) -> "NormalizationStats":
        return cls(np.zeros(input_dim), np.ones(input_dim), 0.0, 1.0)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            np.asarray(d["feature_mean"], dtype=np.float64),
            np.asarray(d["feature_std"], dtype=np.float64),
            float(d["target_mean"]),
            float(d["target_std"]),
        )


# --------------------------------------------------------------------------
# fetch
# --------------------------------------------------------------------------


def sha256_file(path: Path, chunk: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def fetch_dataset(url: str, expected_sha256: str, dest: str | Path, timeout: float = 60.0) -> Path:
    """Download ``url`` to ``dest`` unless a file with the expected digest is
    already there; verify the digest either way."""
    dest = Path(dest)
    if dest.exists():
        got = sha256_file(dest)
        if got == expected_sha256:
            return dest
        raise IntegrityError(
            f"{dest} digest mismatch: expected {expected_sha256}, found {got}"
        )
    import requests

    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(dest.suffix + ".part")
    with requests.get(url, stream=True, timeout=timeout) as resp:
        resp.raise_for_status()
        with open(tmp, "wb") as fh:
            for block in resp.iter_content(chunk_size=1 << 20):
                fh.write(block)
    got = sha256_file(tmp)
    if got != expected_sha256:
        tmp.unlink(missing_ok=True)
        raise IntegrityError(f"download digest mismatch: expected {expected_sha256}, got {got}")
    tmp.rename(dest)
    return dest


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def read_scada_csv(path: str | Path, colmap: ScadaColumnMap, turbine_id: str) -> pd.DataFrame:
    """Project a raw ten-minute export onto the configured channels."""
    raw = pd.read_csv(path, skiprows=colmap.skip_rows)
    missing = [c for c in colmap.channels().values() if c not in raw.columns]
    if missing:
        raise ConfigurationError(f"{path}: missing configured columns {missing}")
    df = pd.DataFrame(
        {name: raw[col] for name, col in colmap.channels().items() if name != "timestamp"}
    )
    df.insert(0, "timestamp", pd.to_datetime(raw[colmap.timestamp]))
    df.insert(1, "turbine", turbine_id)
    direction = df["wind_direction"].to_numpy(dtype=np.float64)
    with np.errstate(invalid="ignore"):
        df["wind_direction"] = np.mod(direction, 360.0)
    return df.sort_values("timestamp", kind="stable").reset_index(drop=True)


def read_status_csv(path: str | Path, colmap: StatusColumnMap, turbine_id: str) -> pd.DataFrame:
    """Parse a status/event log into (turbine, start, end, category) rows,
    keeping only categories present in the configured vocabulary."""
    raw = pd.read_csv(path, skiprows=colmap.skip_rows)
    for col in (colmap.start, colmap.category):
        if col not in raw.columns:
            raise ConfigurationError(f"{path}: missing configured column {col!r}")
    start = pd.to_datetime(raw[colmap.start])
    if colmap.end in raw.columns:
        end = pd.to_datetime(raw[colmap.end])
        end = end.fillna(start)
    else:
        end = start.copy()
    labels = raw[colmap.category].astype(str).str.strip().str.lower()
    category = labels.map(colmap.category_map)
    events = pd.DataFrame(
        {"turbine": turbine_id, "start": start, "end": end, "category": category}
    )
    events = events.dropna(subset=["category"]).reset_index(drop=True)
    bad = events["start"] > events["end"]
    if bad.any():
        raise ConfigurationError(
            f"{path}: {int(bad.sum())} event(s) with start after end (first at row {int(np.argmax(bad.to_numpy()))})"
        )
    return events.sort_values("start", kind="stable").reset_index(drop=True)


# --------------------------------------------------------------------------
# filtering
# --------------------------------------------------------------------------

_DROP_CATEGORIES = ("standby", "warning", "stop", "forced_outage")


def _overlaps_closed(bin_start, bin_end, starts, ends) -> np.ndarray:
    """Bin [b, b+10) against closed event intervals [s, e]."""
    mask = np.zeros(len(bin_start), dtype=bool)
    for s, e in zip(starts, ends):
        mask |= (s < bin_end) & (e >= bin_start)
    return mask


def _in_outage_windows(bin_start, bin_end, outage_starts, window: pd.Timedelta) -> np.ndarray:
    """Bin [b, b+10) against half-open windows [o − window, o)."""
    mask = np.zeros(len(bin_start), dtype=bool)
    for o in outage_starts:
        mask |= ((o - window) < bin_end) & (o > bin_start)
    return mask


def filter_records(
    records: pd.DataFrame,
    events: pd.DataFrame,
    feature_set: str = "F5",
    outage_window_days: int = 7,
) -> tuple[pd.DataFrame, FilterCounts]:
    """Apply the event, pre-outage and missing-value filters to one
    turbine's records; returns the retained rows plus per-rule counts.

    Rows removed by an earlier rule are not recounted by later rules.
    """
    if feature_set not in FEATURE_SETS:
        raise ConfigurationError(f"unknown feature set {feature_set!r}")
    counts = FilterCounts(input_rows=len(records))
    bin_start = records["timestamp"].to_numpy()
    bin_end = bin_start + np.timedelta64(BIN_MINUTES, "m")

    bad = events[events["category"].isin(_DROP_CATEGORIES)]
    event_mask = _overlaps_closed(
        bin_start, bin_end, bad["start"].to_numpy(), bad["end"].to_numpy()
    )
    counts.event_overlap = int(event_mask.sum())

    outages = events.loc[events["category"] == "forced_outage", "start"].to_numpy()
    outage_mask = _in_outage_windows(
        bin_start, bin_end, outages, pd.Timedelta(days=outage_window_days)
    )
    outage_mask &= ~event_mask
    counts.outage_window = int(outage_mask.sum())

    needed = list(FEATURE_SETS[feature_set]) + ["power"]
    missing_mask = records[needed].isna().any(axis=1).to_numpy()
    missing_mask &= ~event_mask & ~outage_mask
    counts.missing_values = int(missing_mask.sum())

    keep = ~(event_mask | outage_mask | missing_mask)
    out = records.loc[keep].reset_index(drop=True)
    counts.retained = len(out)
    return out, counts


# --------------------------------------------------------------------------
# features and standardization
# --------------------------------------------------------------------------


def build_features(records: pd.DataFrame, feature_set: str) -> tuple[np.ndarray, np.ndarray]:
    """(X, y) in physical units for the chosen feature set."""
    if feature_set not in FEATURE_SETS:
        raise ConfigurationError(f"unknown feature set {feature_set!r}")
    needed = list(FEATURE_SETS[feature_set]) + ["power"]
    missing = [c for c in needed if c not in records.columns]
    if missing:
        raise ConfigurationError(f"records lack channels {missing} for {feature_set}")
    if records[needed].isna().any().any():
        raise ConfigurationError(f"records contain missing values in {feature_set} channels")
    speed = records["wind_speed"].to_numpy(dtype=np.float64)
    cols = [speed]
    if feature_set in ("F3", "F5"):
        rad = np.deg2rad(records["wind_direction"].to_numpy(dtype=np.float64))
        cols += [np.sin(rad), np.cos(rad)]
    if feature_set == "F5":
        cols += [
            records["nacelle_temp"].to_numpy(dtype=np.float64),
            records["transformer_temp"].to_numpy(dtype=np.float64),
        ]
    return np.column_stack(cols), records["power"].to_numpy(dtype=np.float64)


def fit_stats(x: np.ndarray, y: np.ndarray) -> NormalizationStats:
    """Means/stds over the training split (population std)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ValueError("need at least two aligned rows to fit statistics")
    return NormalizationStats(
        feature_mean=x.mean(axis=0),
        feature_std=x.std(axis=0),
        target_mean=float(y.mean()),
        target_std=float(y.std()),
    )


def standardize(x: np.ndarray, y: np.ndarray, stats: NormalizationStats):
    xz = (np.asarray(x, dtype=np.float64) - stats.feature_mean) / stats.feature_std
    yz = (np.asarray(y, dtype=np.float64) - stats.target_mean) / stats.target_std
    return xz, yz


def destandardize_target(yz: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(yz, dtype=np.float64) * stats.target_std + stats.target_mean


# --------------------------------------------------------------------------
# splitting and sampling
# --------------------------------------------------------------------------


def assign_split(
    records: pd.DataFrame, ratio: float = 0.8, seed: int = 0, mode: str = "random"
) -> pd.DataFrame:
    """Add a train/test ``split`` column. ``random`` permutes rows with the
    seed; ``chronological`` puts the earliest fraction in train."""
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError("split ratio must lie strictly between 0 and 1")
    n = len(records)
    n_train = int(round(ratio * n))
    split = np.full(n, "test", dtype=object)
    if mode == "random":
        order = np.random.default_rng(seed).permutation(n)
        split[order[:n_train]] = "train"
    elif mode == "chronological":
        order = np.argsort(records["timestamp"].to_numpy(), kind="stable")
        split[order[:n_train]] = "train"
    else:
        raise ConfigurationError(f"unknown split mode {mode!r}")
    out = records.copy()
    out["split"] = split
    return out


def make_function_samples(
    x: np.ndarray,
    y: np.ndarray,
    n_points: int,
    count: int,
    rng: np.random.Generator,
    context_size: int = 0,
    task_id: str = "",
    row_ids: np.ndarray | None = None,
) -> tuple[list[FunctionSample], list[ContextSet]]:
    """Draw ``count`` function samples of ``n_points`` shuffled rows each,
    without replacement within a sample; optional context sets are drawn
    from the same pool, disjoint from their sample's rows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n_rows = x.shape[0]
    total = n_points + context_size
    if total > n_rows:
        raise ConfigurationError(
            f"cannot draw {total} distinct rows from a pool of {n_rows}"
        )
    ids = np.arange(n_rows) if row_ids is None else np.asarray(row_ids)
    samples: list[FunctionSample] = []
    contexts: list[ContextSet] = []
    for _ in range(count):
        idx = rng.choice(n_rows, size=total, replace=False)
        t_idx, c_idx = idx[:n_points], idx[n_points:]
        samples.append(
            FunctionSample(x=x[t_idx], y=y[t_idx], task_id=task_id, row_ids=ids[t_idx])
        )
        contexts.append(ContextSet(x=x[c_idx], y=y[c_idx], task_id=task_id))
    return samples, contexts
