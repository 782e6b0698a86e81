"""Training loop: flat Adam, EMA weights, warmup + cosine learning rate.

The optimizer operates on the flattened parameter vector (denoiser, or
denoiser and encoder concatenated) with the textbook Adam update

    m <- β₁ m + (1-β₁) g          m̂ = m / (1 - β₁^k)
    v <- β₂ v + (1-β₂) g²         v̂ = v / (1 - β₂^k)
    θ <- θ - lr · m̂ / (sqrt(v̂) + ε)

and an exponential moving average of θ maintained alongside
(`ema <- d·ema + (1-d)·θ` after every step, initialized at the starting
parameters). Evaluation uses the EMA weights.

Determinism: epoch e derives its generator from (seed, e), and that single
stream drives, in order, the epoch's subsample, then per batch and per sample
the context size c ~ U{0..context_max} with its pool indices (multi-task
only), then the loss corruption draws. Training is therefore bit-reproducible
and can resume from an epoch boundary with identical results given the saved
parameters, EMA, and optimizer moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diffusion import ContextSet, FunctionSample, diffusion_loss, empty_context
from .flatparams import flat_gradient, flat_parameters, parameter_count, set_flat_parameters

__all__ = [
    "AdamState",
    "adam_step",
    "LrSchedule",
    "TrainerConfig",
    "TrainState",
    "TrainResult",
    "train",
    "write_training_log",
]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step=0)


def adam_step(
    theta: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One in-place Adam update; returns the new parameter vector."""
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup, cosine decay, then constant floor.

    The rate is evaluated at a fractional epoch position (epoch plus batch
    fraction), so it changes every optimizer step.
    """

    base_lr: float = 1e-3
    warmup_start: float = 2e-5
    warmup_epochs: float = 20.0
    decay_epochs: float = 200.0
    final_lr: float = 1e-5

    def at(self, epoch_fraction: float) -> float:
        e = float(epoch_fraction)
        if e < 0:
            raise ValueError("epoch fraction must be non-negative")
        if e < self.warmup_epochs:
            return self.warmup_start + (self.base_lr - self.warmup_start) * e / self.warmup_epochs
        e -= self.warmup_epochs
        if e < self.decay_epochs:
            u = e / self.decay_epochs
            return self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + math.cos(math.pi * u))
        return self.final_lr


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 250
    samples_per_epoch: int = 100
    batch_size: int = 32
    ema_decay: float = 0.995
    context_max: int = 50
    seed: int = 0
    lr: LrSchedule = field(default_factory=LrSchedule)

    def __post_init__(self):
        if self.epochs < 1 or self.samples_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, samples_per_epoch and batch_size must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class TrainState:
    """Everything needed to continue training from an epoch boundary."""

    theta: np.ndarray
    ema: np.ndarray
    adam: AdamState
    epoch: int = 0


@dataclass
class TrainResult:
    theta: np.ndarray
    ema: np.ndarray
    adam: AdamState
    epoch: int
    history: list[tuple[int, int, float, float]]  # (epoch, batch, loss, lr)

    def state(self) -> TrainState:
        return TrainState(
            theta=self.theta.copy(),
            ema=self.ema.copy(),
            adam=AdamState(self.adam.m.copy(), self.adam.v.copy(), self.adam.step),
            epoch=self.epoch,
        )


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def _epoch_indices(rng, n_data: int, samples_per_epoch: int) -> np.ndarray:
    if n_data <= samples_per_epoch:
        return rng.permutation(n_data)
    return rng.choice(n_data, size=samples_per_epoch, replace=False)


def _draw_context(rng, pool: ContextSet, context_max: int) -> ContextSet:
    """c ~ U{0..context_max} points chosen without replacement from the pool
    (c is capped by the pool size)."""
    c = int(rng.integers(0, context_max + 1))
    c = min(c, pool.size)
    if c == 0:
        return empty_context(pool.x.shape[1], pool.task_id)
    idx = rng.choice(pool.size, size=c, replace=False)
    return ContextSet(x=pool.x[idx], y=pool.y[idx], task_id=pool.task_id)


def _split_flat(theta, model, encoder):
    n_model = parameter_count(model)
    set_flat_parameters(model, theta[:n_model])
    if encoder is not None:
        set_flat_parameters(encoder, theta[n_model:])


def train(
    model,
    schedule,
    dataset: Sequence[FunctionSample],
    config: TrainerConfig,
    *,
    encoder=None,
    context_pools: Sequence[ContextSet] | None = None,
    state: TrainState | None = None,
    callback: Callable[[int, int, float, float], None] | None = None,
) -> TrainResult:
    """Run (or resume) training; the model (and encoder) are left holding the
    final raw weights, with the EMA vector returned alongside.

    Multi-task mode is enabled by passing an encoder together with one
    context pool per dataset sample; per appearance each sample gets a fresh
    context of uniformly random size drawn from its pool.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must not be empty")
    if (encoder is None) != (context_pools is None):
        raise ValueError("encoder and context_pools must be supplied together")
    if context_pools is not None and len(context_pools) != len(dataset):
        raise ValueError("need one context pool per dataset sample")

    theta = flat_parameters(model)
    if encoder is not None:
        theta = np.concatenate([theta, flat_parameters(encoder)])
    if state is not None:
        if state.theta.shape != theta.shape:
            raise ValueError("resume state does not match the parameter layout")
        theta = state.theta.copy()
        ema = state.ema.copy()
        adam = AdamState(state.adam.m.copy(), state.adam.v.copy(), state.adam.step)
        start_epoch = state.epoch
    else:
        ema = theta.copy()
        adam = AdamState.zeros(theta.size)
        start_epoch = 0

    history: list[tuple[int, int, float, float]] = []
    n_batches = math.ceil(min(len(dataset), config.samples_per_epoch) / config.batch_size)
    for epoch in range(start_epoch, config.epochs):
        rng = _epoch_rng(config.seed, epoch)
        indices = _epoch_indices(rng, len(dataset), config.samples_per_epoch)
        for b in range(n_batches):
            batch_idx = indices[b * config.batch_size : (b + 1) * config.batch_size]
            batch = [dataset[i] for i in batch_idx]
            contexts = None
            if encoder is not None:
                contexts = [
                    _draw_context(rng, context_pools[i], config.context_max) for i in batch_idx
                ]
            lr = config.lr.at(epoch + b / n_batches)
            _split_flat(theta, model, encoder)
            model.zero_grad(set_to_none=True)
            if encoder is not None:
                encoder.zero_grad(set_to_none=True)
            loss = diffusion_loss(model, schedule, batch, rng, encoder=encoder, contexts=contexts)
            loss.backward()
            grad = flat_gradient(model)
            if encoder is not None:
                grad = np.concatenate([grad, flat_gradient(encoder)])
            theta = adam_step(theta, grad, adam, lr)
            ema = config.ema_decay * ema + (1.0 - config.ema_decay) * theta
            loss_val = float(loss.detach())
            history.append((epoch, b, loss_val, lr))
            if callback is not None:
                callback(epoch, b, loss_val, lr)

    _split_flat(theta, model, encoder)
    return TrainResult(theta=theta, ema=ema, adam=adam, epoch=config.epochs, history=history)


def write_training_log(history: Sequence[tuple[int, int, float, float]], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("epoch,batch,loss,lr\n")
        for epoch, batch, loss, lr in history:
            fh.write(f"{epoch},{batch},{float(loss)!r},{float(lr)!r}\n")
    return path
