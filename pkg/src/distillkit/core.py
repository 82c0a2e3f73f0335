"""Shared domain types and numerical primitives.

Every distillation objective in this package works on the same small set
of batch types: raw logits, penultimate-layer features, and L2-normalized
embeddings produced by a linear projection head. The softmax / cross-entropy
helpers here are the single source of truth for those computations so that
objectives stay consistent with each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .errors import DomainError, ShapeError, ZeroNormError

Tensor = torch.Tensor
ArrayLike = Union[Tensor, np.ndarray, list, tuple]

# Tolerance for the unit-norm invariant on embeddings (float32-compatible).
UNIT_NORM_ATOL = 1e-6
# Below this, a projected row is considered dead and projection fails.
ZERO_NORM_FLOOR = 1e-12


def as_tensor(x: ArrayLike, dtype: Optional[torch.dtype] = None) -> Tensor:
    """Convert input to a torch tensor without copying when possible."""
    if isinstance(x, Tensor):
        return x if dtype is None else x.to(dtype)
    t = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        t = t.to(dtype)
    elif not (t.is_floating_point() or t.dtype in (torch.int32, torch.int64)):
        t = t.to(torch.float64)
    return t


def _as_index_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        t = x.detach().reshape(-1)
    else:
        t = torch.as_tensor(np.asarray(x)).reshape(-1)
    if t.numel() and t.dtype.is_floating_point:
        raise ShapeError("index vector must be integer-typed")
    return t.to(torch.int64)


@dataclass
class LogitBatch:
    """Raw classifier outputs for a batch, with optional hard labels."""

    values: Tensor
    labels: Optional[Tensor] = None

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"logits must be (batch, classes), got {tuple(self.values.shape)}")
        with torch.no_grad():
            if not torch.isfinite(self.values).all():
                raise DomainError("logits contain NaN/Inf")
        if self.labels is not None:
            self.labels = _as_index_tensor(self.labels)
            if self.labels.shape[0] != self.values.shape[0]:
                raise ShapeError("labels length must match batch size")
            classes = self.values.shape[1]
            if self.labels.numel() and (self.labels.min() < 0 or self.labels.max() >= classes):
                raise DomainError(f"labels must lie in [0, {classes})")

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureBatch:
    """Penultimate-layer representations with their dataset positions."""

    values: Tensor
    sample_index: Tensor
    labels: Optional[Tensor] = None

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"features must be (batch, dim), got {tuple(self.values.shape)}")
        self.sample_index = _as_index_tensor(self.sample_index)
        if self.sample_index.shape[0] != self.values.shape[0]:
            raise ShapeError("sample_index length must match batch size")
        if self.sample_index.numel() != torch.unique(self.sample_index).numel():
            raise DomainError("sample_index entries must be unique within a batch")
        if self.labels is not None:
            self.labels = _as_index_tensor(self.labels)
            if self.labels.shape[0] != self.values.shape[0]:
                raise ShapeError("labels length must match batch size")


@dataclass
class EmbeddingBatch:
    """Unit-norm projected embeddings, the currency of the contrastive loss."""

    values: Tensor
    sample_index: Tensor
    labels: Optional[Tensor] = None

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"embeddings must be (batch, dim), got {tuple(self.values.shape)}")
        self.sample_index = _as_index_tensor(self.sample_index)
        if self.sample_index.shape[0] != self.values.shape[0]:
            raise ShapeError("sample_index length must match batch size")
        if self.labels is not None:
            self.labels = _as_index_tensor(self.labels)
            if self.labels.shape[0] != self.values.shape[0]:
                raise ShapeError("labels length must match batch size")
        with torch.no_grad():
            norms = torch.linalg.vector_norm(self.values.detach(), dim=1)
            if self.values.shape[0] and (norms - 1.0).abs().max() > UNIT_NORM_ATOL:
                worst = float((norms - 1.0).abs().max())
                raise DomainError(f"embedding rows must be unit-norm within {UNIT_NORM_ATOL}, worst |n-1|={worst:.3e}")

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class ProjectionHead:
    """Single linear map (no bias) into the shared embedding space."""

    weight: Tensor
    embed_dim: int = 128

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.weight.ndim != 2:
            raise ShapeError("projection weight must be (input_dim, embed_dim)")
        if self.weight.shape[1] != self.embed_dim:
            raise ShapeError(
                f"weight maps to {self.weight.shape[1]} dims but embed_dim={self.embed_dim}")
        with torch.no_grad():
            if not torch.isfinite(self.weight.detach()).all():
                raise DomainError("projection weight contains NaN/Inf")

    @classmethod
    def create(cls, input_dim: int, embed_dim: int = 128,
               generator: Optional[torch.Generator] = None,
               dtype: torch.dtype = torch.float32) -> "ProjectionHead":
        """Zero-mean Gaussian init with std 1/sqrt(input_dim)."""
        w = torch.empty(input_dim, embed_dim, dtype=dtype)
        torch.nn.init.normal_(w, mean=0.0, std=1.0 / np.sqrt(input_dim), generator=generator)
        return cls(weight=w, embed_dim=embed_dim)

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]


def project_and_normalize(features: FeatureBatch, head: ProjectionHead) -> EmbeddingBatch:
    """Apply the linear head and L2-normalize each row.

    Raises ZeroNormError if any projected row has norm below 1e-12, which
    signals a degenerate head or dead features upstream.
    """
    if features.values.shape[1] != head.input_dim:
        raise ShapeError(
            f"feature dim {features.values.shape[1]} != head input dim {head.input_dim}")
    projected = features.values @ head.weight.to(features.values.dtype)
    norms = torch.linalg.vector_norm(projected, dim=1, keepdim=True)
    with torch.no_grad():
        if projected.shape[0] and norms.detach().min() < ZERO_NORM_FLOOR:
            raise ZeroNormError("projected row has (near-)zero norm")
    return EmbeddingBatch(values=projected / norms,
                          sample_index=features.sample_index,
                          labels=features.labels)


def softmax_with_temperature(logits: ArrayLike, rho: float) -> Tensor:
    """Temperature softmax over the last dimension, shift-by-max for stability."""
    if not (rho > 0):
        raise DomainError(f"temperature must be positive, got {rho}")
    z = as_tensor(logits)
    if not z.is_floating_point():
        z = z.to(torch.float64)
    with torch.no_grad():
        if not torch.isfinite(z.detach()).all():
            raise DomainError("logits contain NaN/Inf")
    z = z / rho
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def _soft_target(target: ArrayLike, num_classes: int, dtype: torch.dtype) -> Tensor:
    """Coerce an int label vector / one-hot / soft distribution to (B, C) probs."""
    t = as_tensor(target)
    if t.ndim <= 1 and not t.is_floating_point():
        # hard labels -> one-hot
        idx = t.reshape(-1).to(torch.int64)
        if idx.numel() and (idx.min() < 0 or idx.max() >= num_classes):
            raise DomainError(f"labels must lie in [0, {num_classes})")
        return torch.nn.functional.one_hot(idx, num_classes).to(dtype)
    t = t.to(dtype)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.shape[-1] != num_classes:
        raise ShapeError(f"target has {t.shape[-1]} classes, prediction has {num_classes}")
    sums = t.sum(dim=-1)
    if (sums - 1.0).abs().max() > 1e-6:
        raise DomainError("soft target rows must sum to 1 (tolerance 1e-6)")
    if t.min() < 0:
        raise DomainError("soft target entries must be nonnegative")
    return t


def cross_entropy(prediction: ArrayLike, target: ArrayLike, *, from_logits: bool = False) -> Tensor:
    """H(target, prediction) = -sum_i target_i * log(prediction_i), in nats.

    `prediction` is a probability vector/matrix, or raw logits when
    `from_logits=True`. `target` may be an integer label vector, a one-hot
    row, or a soft distribution (rows summing to 1 within 1e-6). Batched
    inputs are averaged over the batch.
    """
    p = as_tensor(prediction)
    if not p.is_floating_point():
        p = p.to(torch.float64)
    squeeze = p.ndim == 1
    if squeeze:
        p = p.unsqueeze(0)
    if p.ndim != 2:
        raise ShapeError("prediction must be a vector or (batch, classes) matrix")
    t = _soft_target(target, p.shape[-1], p.dtype)
    if t.shape[0] == 1 and p.shape[0] > 1:
        t = t.expand_as(p)
    if t.shape[0] != p.shape[0]:
        raise ShapeError("target batch size must match prediction batch size")
    if from_logits:
        logp = torch.nn.functional.log_softmax(p, dim=-1)
        per_row = -(t * logp).sum(dim=-1)
    else:
        with torch.no_grad():
            if p.detach().min() < 0:
                raise DomainError("probabilities must be nonnegative")
        per_row = -torch.special.xlogy(t, p).sum(dim=-1)
    return per_row.mean()
