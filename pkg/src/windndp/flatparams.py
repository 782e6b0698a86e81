"""Flat-vector addressing of module parameters.

Every trainable module in this package registers its parameters in a fixed,
documented order; these helpers map that ordered set to a single float64
vector so optimizers, EMA shadows, checkpoints and finite-difference probes
all agree on coordinate indices.
"""

from __future__ import annotations

import numpy as np
import torch

__all__ = [
    "parameter_items",
    "parameter_count",
    "flat_parameters",
    "set_flat_parameters",
    "flat_gradient",
]


def parameter_items(module: torch.nn.Module) -> list[tuple[str, torch.nn.Parameter]]:
    """(name, parameter) pairs in registration order — the flat layout."""
    return list(module.named_parameters())


def parameter_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for _, p in parameter_items(module))


def flat_parameters(module: torch.nn.Module) -> np.ndarray:
    """Concatenate all parameters (registration order, row-major) into one
    float64 vector."""
    if not parameter_items(module):
        return np.zeros(0)
    with torch.no_grad():
        return np.concatenate(
            [p.detach().cpu().numpy().ravel() for _, p in parameter_items(module)]
        ).astype(np.float64, copy=False)


def set_flat_parameters(module: torch.nn.Module, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    expected = parameter_count(module)
    if flat.shape != (expected,):
        raise ValueError(f"flat vector must have shape ({expected},), got {flat.shape}")
    offset = 0
    with torch.no_grad():
        for _, p in parameter_items(module):
            n = p.numel()
            chunk = torch.from_numpy(flat[offset : offset + n].copy()).reshape(p.shape)
            p.copy_(chunk)
            offset += n


def flat_gradient(module: torch.nn.Module) -> np.ndarray:
    """Gradients in the same flat layout; parameters without a stored gradient
    contribute zeros."""
    parts = []
    for _, p in parameter_items(module):
        if p.grad is None:
            parts.append(np.zeros(p.numel()))
        else:
            parts.append(p.grad.detach().cpu().numpy().ravel())
    return np.concatenate(parts).astype(np.float64, copy=False) if parts else np.zeros(0)
