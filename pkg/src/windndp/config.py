"""Experiment configuration: one YAML file drives every command.

The config is a tree of plain dataclasses. Profiles (``full``, ``quick``,
``smoke``) are presets applied before file values and flag overrides, so
precedence is: defaults < profile < config file < ``--set key=value``
flags. The fully resolved config is written back into each run directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

__all__ = [
    "DataConfig",
    "ModelConfig",
    "TrainConfig",
    "EvalConfig",
    "ExperimentConfig",
    "PROFILES",
    "load_config",
    "resolve_config",
    "apply_overrides",
]


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | scada
    path: str = ""  # dataset directory (output of ingest, input to train/evaluate)
    # synthetic generator
    input_dim: int = 1
    domain: tuple[float, float] = (-2.0, 2.0)
    signal_variance: float = 1.0
    lengthscale: float = 0.5
    noise_variance: float = 0.01
    offsets: tuple[float, ...] = (0.0,)
    lengthscale_multipliers: tuple[float, ...] | None = None
    n_train_functions: int = 2000
    n_test_functions: int = 30
    n_points: int = 100
    context_pool: int = 50
    seed: int = 0
    # scada ingest
    raw_dir: str = ""
    turbines: tuple[str, ...] = ("T1", "T2", "T3", "T4", "T5", "T6")
    feature_set: str = "F5"
    split_ratio: float = 0.8
    split_mode: str = "random"
    scada_columns: dict = field(default_factory=dict)  # overrides for ScadaColumnMap
    status_columns: dict = field(default_factory=dict)  # overrides for StatusColumnMap
    data_glob: str = "*Turbine_Data*_{turbine}_*.csv"
    status_glob: str = "*Status*_{turbine}_*.csv"
    outage_window_days: int = 7
    # archive fetch
    url: str = ""
    sha256: str = ""


@dataclass
class ModelConfig:
    kind: str = "ndp"  # ndp | mt-ndp | gp
    width: int = 64
    layers: int = 4
    heads: int = 8
    embed_dim: int | None = None
    seed: int = 0
    encoder_output: int = 8
    encoder_width: int = 64
    encoder_depth: int = 4
    schedule_kind: str = "cosine"
    total_steps: int = 500
    cosine_offset: float = 0.008
    gp_restarts: int = 5
    gp_max_points: int = 2000
    gp_include_noise: bool = True

    def schedule_config(self) -> dict:
        if self.schedule_kind == "cosine":
            return {"kind": "cosine", "total_steps": self.total_steps, "s": self.cosine_offset}
        return {"kind": self.schedule_kind, "total_steps": self.total_steps}


@dataclass
class TrainConfig:
    epochs: int = 250
    samples_per_epoch: int = 100
    batch_size: int = 32
    ema_decay: float = 0.995
    context_max: int = 50
    seed: int = 0
    base_lr: float = 1e-3
    warmup_start: float = 2e-5
    warmup_epochs: float = 20.0
    decay_epochs: float = 200.0
    final_lr: float = 1e-5
    # row datasets: functions pre-drawn per task for the training corpus
    n_functions: int = 500
    train_tasks: tuple[str, ...] = ()
    resume: str = ""  # checkpoint path to continue from


@dataclass
class EvalConfig:
    task: str = ""  # evaluation task; defaults to the dataset's first task
    context_sizes: tuple[int, ...] = (0, 25, 50)
    n_test: int = 30
    n_points: int = 100
    n_trajectories: int = 200
    seed: int = 0
    checkpoint: str = ""
    # encoder analysis
    buckets: tuple[tuple[int, int], ...] = ((0, 4), (23, 27), (46, 50))
    draws_per_task: int = 40


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    out_dir: str = "runs"
    profile: str = "full"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(_plain(self.to_dict()), sort_keys=True))
        return path


#: profile presets, applied before config-file values
PROFILES: dict[str, dict] = {
    "full": {},
    "quick": {
        "model.total_steps": 200,
        "train.epochs": 150,
        "train.samples_per_epoch": 256,
        "train.warmup_epochs": 15.0,
        "train.decay_epochs": 120.0,
        "eval.n_trajectories": 64,
    },
    "smoke": {
        "model.total_steps": 8,
        "model.width": 8,
        "model.layers": 1,
        "model.heads": 2,
        "model.encoder_width": 8,
        "model.encoder_depth": 2,
        "model.encoder_output": 4,
        "train.epochs": 2,
        "train.samples_per_epoch": 8,
        "train.batch_size": 4,
        "train.warmup_epochs": 1.0,
        "train.decay_epochs": 2.0,
        "train.n_functions": 16,
        "data.n_train_functions": 12,
        "data.n_test_functions": 4,
        "data.n_points": 12,
        "data.context_pool": 8,
        "eval.n_test": 3,
        "eval.n_points": 12,
        "eval.n_trajectories": 6,
        "eval.context_sizes": (0, 4),
        "eval.buckets": ((0, 2), (4, 8)),
        "eval.draws_per_task": 6,
    },
}


def _plain(value):
    """YAML-friendly copy: tuples to lists, paths to strings."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def _coerce(value, reference):
    """Coerce a parsed value to the type of the dataclass default."""
    if value is None:
        return None
    if reference is None:
        # optional numeric field: best-effort numeric parse for flag strings
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                try:
                    return float(value)
                except ValueError:
                    return value
        return value
    if isinstance(reference, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(reference, int) and not isinstance(reference, bool):
        return int(value)
    if isinstance(reference, float):
        return float(value)
    if isinstance(reference, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        inner = reference[0] if reference else None
        return tuple(_coerce(v, inner) for v in value)
    if isinstance(reference, str):
        return str(value)
    return value


def _set_path(config: ExperimentConfig, dotted: str, value):
    parts = dotted.split(".")
    target = config
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigurationError(f"unknown config section {part!r} in {dotted!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or not hasattr(target, leaf):
        raise ConfigurationError(f"unknown config key {dotted!r}")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigurationError(f"{dotted!r} is a section, not a value")
    try:
        setattr(target, leaf, _coerce(value, current))
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"bad value for {dotted!r}: {err}") from err


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply {dotted.key: value} overrides in place; returns the config."""
    for key, value in overrides.items():
        _set_path(config, key, value)
    return config


def _merge_tree(config: ExperimentConfig, tree: dict, prefix: str = ""):
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict) and dataclasses.is_dataclass(
            getattr_nested(config, dotted, None)
        ):
            _merge_tree(config, value, prefix=f"{dotted}.")
        else:
            _set_path(config, dotted, value)


def getattr_nested(obj, dotted: str, default=None):
    target = obj
    for part in dotted.split("."):
        if not hasattr(target, part):
            return default
        target = getattr(target, part)
    return target


def resolve_config(
    tree: dict | None = None,
    profile: str | None = None,
    overrides: dict | None = None,
) -> ExperimentConfig:
    """defaults < profile < file tree < overrides."""
    config = ExperimentConfig()
    tree = dict(tree or {})
    chosen = profile or tree.get("profile") or config.profile
    if chosen not in PROFILES:
        raise ConfigurationError(
            f"unknown profile {chosen!r}; expected one of {sorted(PROFILES)}"
        )
    config.profile = chosen
    apply_overrides(config, PROFILES[chosen])
    tree.pop("profile", None)
    _merge_tree(config, tree)
    if overrides:
        apply_overrides(config, overrides)
    _validate(config)
    return config


def load_config(
    path: str | Path | None,
    profile: str | None = None,
    overrides: dict | None = None,
) -> ExperimentConfig:
    tree = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        loaded = yaml.safe_load(path.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
        tree = loaded
    return resolve_config(tree, profile=profile, overrides=overrides)


def _validate(config: ExperimentConfig):
    if config.data.source not in ("synthetic", "scada"):
        raise ConfigurationError(f"unknown data source {config.data.source!r}")
    if config.model.kind not in ("ndp", "mt-ndp", "gp"):
        raise ConfigurationError(f"unknown model kind {config.model.kind!r}")
    if config.model.schedule_kind not in ("cosine", "linear"):
        raise ConfigurationError(f"unknown schedule kind {config.model.schedule_kind!r}")
    if config.data.feature_set not in ("F1", "F3", "F5"):
        raise ConfigurationError(f"unknown feature set {config.data.feature_set!r}")
    for name in ("epochs", "samples_per_epoch", "batch_size"):
        if getattr(config.train, name) < 1:
            raise ConfigurationError(f"train.{name} must be at least 1")
    if config.eval.n_trajectories < 2:
        raise ConfigurationError("eval.n_trajectories must be at least 2")
    if any(c < 0 for c in config.eval.context_sizes):
        raise ConfigurationError("context sizes must be non-negative")
