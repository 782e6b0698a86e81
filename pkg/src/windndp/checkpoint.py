"""Checkpoints: one ``.npz`` per trained model with a JSON header.

Training checkpoints carry raw and EMA flat parameter vectors plus the
optimizer moments, all float64, so resuming from an epoch boundary is
bit-identical to never having stopped. GP checkpoints carry the fitted
hyperparameter vector and the training rows the posterior conditions on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoiser import BiDimAttentionDenoiser, init_denoiser
from .encoder import TaskEncoder, init_task_encoder
from .errors import ConfigurationError
from .flatparams import flat_parameters, parameter_count, set_flat_parameters
from .gp import GpHyperparameters, GpPosterior, _posterior_from
from .schedules import VarianceSchedule, schedule_from_config
from .trainer import AdamState, TrainState

__all__ = [
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "save_training_checkpoint",
    "save_gp_checkpoint",
    "load_checkpoint",
    "restore_denoiser",
    "restore_gp",
]

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray]

    @property
    def kind(self) -> str:
        return self.header["kind"]

    @property
    def epoch(self) -> int:
        return int(self.header.get("epoch", 0))

    def train_state(self) -> TrainState:
        return TrainState(
            theta=self.arrays["theta"].copy(),
            ema=self.arrays["ema"].copy(),
            adam=AdamState(
                m=self.arrays["adam_m"].copy(),
                v=self.arrays["adam_v"].copy(),
                step=int(self.header["train_step"]),
            ),
            epoch=self.epoch,
        )


def _denoiser_config(model: BiDimAttentionDenoiser) -> dict:
    return {
        "width": model.width,
        "layers": model.layers,
        "heads": model.heads,
        "embed_dim": model.embed_dim,
        "total_steps": model.total_steps,
    }


def _encoder_config(encoder: TaskEncoder) -> dict:
    return {
        "input_dim": encoder.input_dim,
        "output_dim": encoder.output_dim,
        "width": encoder.width,
        "depth": encoder.depth,
    }


def _write(path: Path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        if arr.dtype != np.dtype("<f8"):
            raise ValueError(f"array {name!r} must be little-endian float64")
    np.savez(path, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    return path


def save_training_checkpoint(
    path: str | Path,
    *,
    model: BiDimAttentionDenoiser,
    schedule: VarianceSchedule,
    state: TrainState,
    encoder: TaskEncoder | None = None,
    meta: dict | None = None,
) -> Path:
    kind = "mt-ndp" if encoder is not None else "ndp"
    expected = parameter_count(model) + (parameter_count(encoder) if encoder else 0)
    if state.theta.shape != (expected,):
        raise ValueError(
            f"flat state has {state.theta.shape[0]} parameters, model expects {expected}"
        )
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "denoiser": _denoiser_config(model),
        "encoder": _encoder_config(encoder) if encoder is not None else None,
        "schedule": schedule.config(),
        "epoch": int(state.epoch),
        "train_step": int(state.adam.step),
        "meta": meta or {},
    }
    arrays = {
        "theta": np.ascontiguousarray(state.theta, dtype="<f8"),
        "ema": np.ascontiguousarray(state.ema, dtype="<f8"),
        "adam_m": np.ascontiguousarray(state.adam.m, dtype="<f8"),
        "adam_v": np.ascontiguousarray(state.adam.v, dtype="<f8"),
    }
    return _write(Path(path), header, arrays)


def save_gp_checkpoint(
    path: str | Path, posterior: GpPosterior, task_id: str, meta: dict | None = None
) -> Path:
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": "gp",
        "task_id": task_id,
        "log_marginal_likelihood": posterior.log_marginal_likelihood,
        "jitter": posterior.jitter,
        "meta": meta or {},
    }
    arrays = {
        "hyper": np.ascontiguousarray(posterior.hyper.to_vector(), dtype="<f8"),
        "x": np.ascontiguousarray(posterior.x, dtype="<f8"),
        "y": np.ascontiguousarray(posterior.y, dtype="<f8"),
    }
    return _write(Path(path), header, arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"no checkpoint at {path}")
    with np.load(path) as bundle:
        header = json.loads(bytes(bundle["header"]).decode())
        arrays = {k: np.asarray(bundle[k], dtype=np.float64) for k in bundle.files if k != "header"}
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {header.get('version')!r}")
    return Checkpoint(header=header, arrays=arrays)


def restore_denoiser(
    ckpt: Checkpoint, weights: str = "ema"
) -> tuple[BiDimAttentionDenoiser, TaskEncoder | None, VarianceSchedule]:
    """Rebuild modules from a training checkpoint.

    ``weights`` selects which flat vector to load into the modules:
    ``"ema"`` (evaluation default) or ``"raw"``.
    """
    if ckpt.kind not in ("ndp", "mt-ndp"):
        raise ConfigurationError(f"checkpoint holds a {ckpt.kind} model, not a denoiser")
    if weights not in ("ema", "raw"):
        raise ValueError("weights must be 'ema' or 'raw'")
    model = init_denoiser(**ckpt.header["denoiser"])
    encoder = None
    if ckpt.header["encoder"] is not None:
        encoder = init_task_encoder(**ckpt.header["encoder"])
    flat = ckpt.arrays["ema" if weights == "ema" else "theta"]
    n_model = parameter_count(model)
    set_flat_parameters(model, flat[:n_model])
    if encoder is not None:
        set_flat_parameters(encoder, flat[n_model:])
    schedule = schedule_from_config(ckpt.header["schedule"])
    return model, encoder, schedule


def restore_gp(ckpt: Checkpoint) -> GpPosterior:
    if ckpt.kind != "gp":
        raise ConfigurationError(f"checkpoint holds a {ckpt.kind} model, not a GP")
    hyper = GpHyperparameters.from_vector(ckpt.arrays["hyper"])
    return _posterior_from(hyper, ckpt.arrays["x"], ckpt.arrays["y"])
