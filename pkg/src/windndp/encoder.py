"""Task encoder: a permutation-invariant summary of context points.

Each context pair (x^c, y^c) ∈ ℝ^{D+1} is mapped by a GeLU MLP to a
κ-dimensional image; images are mean-pooled into a single task embedding v̄.
An empty context yields the zero embedding. The embedding is concatenated to
every input row before the denoiser, so the multi-task noise model is the
plain denoiser composed with this encoder and the context never passes
through the diffusion corruption.

Defaults follow the reference configuration: four hidden layers of width 64,
GeLU activations, κ = 8 output channels. Width, depth and κ are configurable
(reduced encoders are used by fast gradient-fidelity checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .denoiser import BiDimAttentionDenoiser, predict_noise, randomize_parameters

__all__ = [
    "TaskEmbedding",
    "TaskEncoder",
    "init_task_encoder",
    "encode_context",
    "augment_inputs",
    "mt_predict_noise",
]


@dataclass(frozen=True)
class TaskEmbedding:
    """Mean-pooled context summary v̄ plus the context size it came from."""

    vector: np.ndarray  # (κ,)
    context_size: int

    def __post_init__(self):
        v = np.ascontiguousarray(self.vector, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("embedding vector must be one-dimensional")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)
        if self.context_size < 0:
            raise ValueError("context_size must be >= 0")


class _Layer(torch.nn.Module):
    def __init__(self, fan_in: int, fan_out: int):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(fan_in, fan_out, dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.zeros(fan_out, dtype=torch.float64))


class TaskEncoder(torch.nn.Module):
    """GeLU MLP over context pairs; parameter count is independent of the
    context size M (it depends on the input dimension D only through the
    first layer)."""

    def __init__(self, input_dim: int, output_dim: int = 8, width: int = 64, depth: int = 4):
        super().__init__()
        if input_dim < 2:
            raise ValueError("input_dim is D+1 and must be >= 2")
        if output_dim < 1 or width < 1 or depth < 1:
            raise ValueError("output_dim, width and depth must be positive")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.width = width
        self.depth = depth
        dims = [input_dim] + [width] * depth + [output_dim]
        self.layers = torch.nn.ModuleList(
            _Layer(a, b) for a, b in zip(dims[:-1], dims[1:])
        )

    def hyperparameters(self) -> dict[str, int]:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "width": self.width,
            "depth": self.depth,
        }

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        """Map context pairs (M, D+1) to their κ-dimensional images (M, κ)."""
        if pairs.ndim != 2 or pairs.shape[1] != self.input_dim:
            raise ValueError(f"expected (M, {self.input_dim}) pairs, got {tuple(pairs.shape)}")
        s = pairs
        for i, layer in enumerate(self.layers):
            s = torch.addmm(layer.b, s, layer.w)
            if i < len(self.layers) - 1:
                s = F.gelu(s)
        return s

    def embed(self, x_c: torch.Tensor, y_c: torch.Tensor) -> torch.Tensor:
        """Mean-pooled embedding (κ,); the zero vector for an empty context.
        Differentiable — gradients flow to encoder parameters when M > 0."""
        if x_c.shape[0] != y_c.shape[0]:
            raise ValueError("x_c and y_c must agree on the number of context points")
        if x_c.shape[0] == 0:
            return torch.zeros(self.output_dim, dtype=torch.float64)
        pairs = torch.cat((x_c, y_c[:, None]), dim=1)
        return self.forward(pairs).mean(dim=0)


def init_task_encoder(
    input_dim: int,
    output_dim: int = 8,
    width: int = 64,
    depth: int = 4,
    seed: int = 0,
) -> TaskEncoder:
    """Deterministic seed-derived initialization (Xavier weights, zero
    biases), mirroring the denoiser's scheme."""
    encoder = TaskEncoder(input_dim, output_dim, width, depth)
    randomize_parameters(encoder, seed)
    return encoder


def encode_context(encoder: TaskEncoder, x_c: np.ndarray, y_c: np.ndarray) -> TaskEmbedding:
    """Encode context points: x_c (M, D), y_c (M,) → TaskEmbedding.

    M = 0 is valid and yields the zero embedding.
    """
    x_c = np.array(x_c, dtype=np.float64)  # fresh writable copy for torch
    y_c = np.array(y_c, dtype=np.float64)
    if x_c.ndim != 2 or y_c.shape != (x_c.shape[0],):
        raise ValueError(f"expected x_c (M, D) and y_c (M,), got {x_c.shape} and {y_c.shape}")
    if x_c.shape[0] > 0 and x_c.shape[1] + 1 != encoder.input_dim:
        raise ValueError(
            f"encoder expects D={encoder.input_dim - 1} input columns, got {x_c.shape[1]}"
        )
    if not (np.all(np.isfinite(x_c)) and np.all(np.isfinite(y_c))):
        raise ValueError("context values must be finite")
    with torch.no_grad():
        v = encoder.embed(torch.from_numpy(x_c), torch.from_numpy(y_c))
    return TaskEmbedding(vector=v.numpy(), context_size=x_c.shape[0])


def augment_inputs(X: np.ndarray, embedding: TaskEmbedding | np.ndarray) -> np.ndarray:
    """Concatenate the task embedding to every input row: (N, D) → (N, D+κ)."""
    X = np.asarray(X, dtype=np.float64)
    v = embedding.vector if isinstance(embedding, TaskEmbedding) else np.asarray(embedding)
    if X.ndim != 2 or v.ndim != 1:
        raise ValueError("expected X (N, D) and a flat embedding vector")
    return np.concatenate([X, np.broadcast_to(v, (X.shape[0], v.shape[0]))], axis=1)


def mt_predict_noise(
    denoiser: BiDimAttentionDenoiser,
    encoder: TaskEncoder,
    X: np.ndarray,
    y_t: np.ndarray,
    t: int,
    x_c: np.ndarray,
    y_c: np.ndarray,
) -> np.ndarray:
    """Multi-task noise prediction: the plain denoiser applied to
    embedding-augmented inputs. With an empty context this is exactly the
    denoiser on zero-augmented inputs (same code path, bit-equal)."""
    emb = encode_context(encoder, x_c, y_c)
    return predict_noise(denoiser, augment_inputs(X, emb), np.asarray(y_t, dtype=np.float64), t)
