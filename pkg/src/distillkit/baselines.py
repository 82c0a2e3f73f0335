"""Closed-form reference distillation objectives.

Implements the soft-label objective (temperature-scaled cross-entropy mix),
attention-map matching, feature regression, and the generic
`cross_entropy + beta * distill_term` composition used by the harness.
All per-sample losses are batch-averaged so weighting factors transfer
across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .core import (LogitBatch, FeatureBatch, Tensor, as_tensor, cross_entropy,
                   ZERO_NORM_FLOOR)
from .errors import DomainError, ShapeError, ZeroNormError


@dataclass
class AttentionMapSet:
    """Per-layer spatial attention maps, one (batch, H, W) tensor per layer."""

    maps: Sequence[Tensor]
    layer_ids: Sequence[int]

    def __post_init__(self):
        fixed = []
        for m in self.maps:
            t = as_tensor(m)
            if t.ndim == 2:
                t = t.unsqueeze(0)
            if t.ndim != 3:
                raise ShapeError("attention maps must be (H, W) or (batch, H, W)")
            with torch.no_grad():
                if not torch.isfinite(t.detach()).all():
                    raise DomainError("attention map contains NaN/Inf")
                if t.detach().min() < 0:
                    raise DomainError("attention maps must be nonnegative")
            fixed.append(t)
        self.maps = fixed
        if len(self.layer_ids) != len(self.maps):
            raise ShapeError("layer_ids length must match number of maps")


@dataclass
class Regressor:
    """Linear map from student feature space to teacher feature space."""

    weight: Tensor

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.weight.ndim != 2:
            raise ShapeError("regressor weight must be (student_dim, teacher_dim)")
        with torch.no_grad():
            if not torch.isfinite(self.weight.detach()).all():
                raise DomainError("regressor weight contains NaN/Inf")


def kd_loss(student: LogitBatch, teacher: LogitBatch, alpha: float, rho: float) -> Tensor:
    """Soft-label distillation: (1-a)*H(y, s(zS)) + a*rho^2*H(s(zT/rho), s(zS/rho)).

    The rho^2 factor keeps the soft-target gradient magnitude comparable
    across temperatures. With alpha=0 this is exactly the hard-label
    cross-entropy.
    """
    if not (0.0 <= alpha <= 1.0):
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    if not (rho > 0):
        raise DomainError(f"rho must be positive, got {rho}")
    if student.labels is None:
        raise DomainError("student batch must carry hard labels")
    if student.num_classes != teacher.num_classes:
        raise ShapeError("teacher and student class counts differ")
    if student.batch_size != teacher.batch_size:
        raise ShapeError("teacher and student batch sizes differ")

    hard = cross_entropy(student.values, student.labels, from_logits=True)
    soft_targets = torch.softmax(teacher.values.detach() / rho, dim=-1)
    soft = cross_entropy(student.values / rho, soft_targets, from_logits=True)
    return (1.0 - alpha) * hard + alpha * rho * rho * soft


def compute_attention_map(activations) -> Tensor:
    """Sum of squared activations over the channel axis.

    Accepts (channels, H, W) or (batch, channels, H, W); returns (H, W)
    or (batch, H, W) respectively.
    """
    a = as_tensor(activations)
    if a.ndim not in (3, 4):
        raise ShapeError("activations must be (C, H, W) or (B, C, H, W)")
    with torch.no_grad():
        if not torch.isfinite(a.detach()).all():
            raise DomainError("activations contain NaN/Inf")
    return (a * a).sum(dim=-3)


def at_distill_term(student_maps: AttentionMapSet, teacher_maps: AttentionMapSet) -> Tensor:
    """Sum over layers of the L2 distance between flattened unit-norm maps.

    Scale-invariant in each map; batch-averaged per layer.
    """
    if len(student_maps.maps) != len(teacher_maps.maps):
        raise ShapeError("map sets must have the same number of layers")
    total = None
    for ms, mt in zip(student_maps.maps, teacher_maps.maps):
        if ms.shape != mt.shape:
            raise ShapeError(f"map shapes differ: {tuple(ms.shape)} vs {tuple(mt.shape)}")
        fs = ms.reshape(ms.shape[0], -1)
        ft = mt.reshape(mt.shape[0], -1)
        ns = torch.linalg.vector_norm(fs, dim=1, keepdim=True)
        nt = torch.linalg.vector_norm(ft, dim=1, keepdim=True)
        with torch.no_grad():
            if min(float(ns.detach().min()), float(nt.detach().min())) < ZERO_NORM_FLOOR:
                raise ZeroNormError("attention map has (near-)zero norm")
        dist = torch.linalg.vector_norm(ft / nt - fs / ns, dim=1).mean()
        total = dist if total is None else total + dist
    return total


def fitnet_distill_term(teacher_feat: FeatureBatch, student_feat: FeatureBatch,
                        regressor: Regressor, *, squared: bool = False) -> Tensor:
    """Half the Euclidean distance between teacher features and regressed
    student features, batch-averaged.

    `squared=True` switches to half the squared distance; the unsquared
    form is the default.
    """
    if regressor.weight.shape[0] != student_feat.values.shape[1]:
        raise ShapeError("regressor input dim must match student feature dim")
    if regressor.weight.shape[1] != teacher_feat.values.shape[1]:
        raise ShapeError("regressor output dim must match teacher feature dim")
    if teacher_feat.values.shape[0] != student_feat.values.shape[0]:
        raise ShapeError("teacher and student batches differ in size")
    pred = student_feat.values @ regressor.weight.to(student_feat.values.dtype)
    diff = teacher_feat.values - pred
    if squared:
        per_sample = (diff * diff).sum(dim=1)
    else:
        per_sample = torch.linalg.vector_norm(diff, dim=1)
    return 0.5 * per_sample.mean()


def compose_distill_loss(ce_term, distill_term, beta: float):
    """Total objective: ce_term + beta * distill_term."""
    if beta < 0:
        raise DomainError(f"beta must be nonnegative, got {beta}")
    return ce_term + beta * distill_term
