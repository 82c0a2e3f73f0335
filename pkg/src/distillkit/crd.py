"""Contrastive distillation objective.

A bilinear critic scores (teacher, student) embedding pairs:

    h(t, s) = exp(t.s / tau) / (exp(t.s / tau) + N/M)

where N is the negative count and M the dataset cardinality. The loss is
the negative critic log-likelihood over one congruent pair and N
incongruent pairs per anchor; minimizing it tightens a lower bound on the
mutual information between the two embedding distributions
(ln N minus the loss). When a normalization constant Z0 is configured,
exp(t.s / tau) / Z0 replaces the raw exponential.

Anchoring is symmetric: the teacher-anchored direction draws negatives
from the student bank and vice versa, and the two losses are added.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core import EmbeddingBatch, Tensor, UNIT_NORM_ATOL, as_tensor
from .errors import DomainError, InsufficientNegativesError, ShapeError
from .membank import MemoryBank, retrieve

# h is clamped into [SAT_EPS, 1 - SAT_EPS] before the log so that extreme
# temperatures cannot produce log(0); clamp events are counted, not raised.
SAT_EPS = 1e-7


class SaturationCounter:
    """Counts critic scores that had to be clamped away from {0, 1}."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


saturation_counter = SaturationCounter()


class SamplingPolicy:
    """Negative-sampling policies: any other index, or any other class."""

    UNSUPERVISED = "UNSUPERVISED"
    SUPERVISED = "SUPERVISED"


@dataclass
class CriticConfig:
    """Critic hyperparameters.

    `n_negatives` is silently capped at `dataset_size - 1` so small desk
    datasets can keep the large-scale default.
    """

    dataset_size: int
    tau: float = 0.1
    n_negatives: int = 16384
    z0: Optional[float] = None

    def __post_init__(self):
        if self.dataset_size < 2:
            raise DomainError(f"dataset_size must be >= 2, got {self.dataset_size}")
        if not (self.tau > 0):
            raise DomainError(f"tau must be positive, got {self.tau}")
        if self.n_negatives < 1:
            raise DomainError(f"n_negatives must be >= 1, got {self.n_negatives}")
        self.n_negatives = min(self.n_negatives, self.dataset_size - 1)
        if self.z0 is not None and not (self.z0 > 0):
            raise DomainError(f"z0 must be positive when set, got {self.z0}")

    @property
    def noise_ratio(self) -> float:
        return self.n_negatives / self.dataset_size


@dataclass
class ContrastiveBatch:
    """One side's embeddings as anchors, the other side's as positives,
    plus a (batch, N, dim) tensor of unit-norm negatives per anchor."""

    anchor: EmbeddingBatch
    positive: EmbeddingBatch
    negatives: Tensor
    validate: bool = True

    def __post_init__(self):
        self.negatives = as_tensor(self.negatives)
        if self.negatives.ndim != 3:
            raise ShapeError("negatives must be (batch, N, dim)")
        b, _, d = self.negatives.shape
        if b != self.anchor.values.shape[0]:
            raise ShapeError("negatives batch size must match anchors")
        if d != self.anchor.dim or self.anchor.dim != self.positive.dim:
            raise ShapeError("anchor, positive and negatives must share the embedding dim")
        if not torch.equal(self.anchor.sample_index, self.positive.sample_index):
            raise DomainError("anchor and positive must be aligned by sample_index")
        if self.validate and self.negatives.numel():
            with torch.no_grad():
                norms = torch.linalg.vector_norm(self.negatives.detach(), dim=-1)
                if float((norms - 1.0).abs().max()) > UNIT_NORM_ATOL:
                    raise DomainError("negative rows must be unit-norm within 1e-6")


def _critic_from_inner(inner: Tensor, cfg: CriticConfig) -> Tensor:
    """Critic score h for a tensor of inner products, clamped away from {0,1}."""
    score = torch.exp(inner / cfg.tau)
    if cfg.z0 is not None:
        score = score / cfg.z0
    h = score / (score + cfg.noise_ratio)
    clamped = h.clamp(SAT_EPS, 1.0 - SAT_EPS)
    with torch.no_grad():
        n_sat = int((h.detach() != clamped.detach()).sum())
    if n_sat:
        saturation_counter.add(n_sat)
    return clamped


def critic_score(e_t, e_s, cfg: CriticConfig) -> Tensor:
    """h(t, s) for a single pair of unit vectors; strictly inside (0, 1)."""
    t = as_tensor(e_t).reshape(-1)
    s = as_tensor(e_s).reshape(-1)
    if t.shape != s.shape:
        raise ShapeError("vectors must have the same dimension")
    for v in (t, s):
        if abs(float(torch.linalg.vector_norm(v.detach())) - 1.0) > 1e-4:
            raise DomainError("critic inputs must be unit-norm (tolerance 1e-4)")
    return _critic_from_inner((t * s).sum(), cfg)


def nce_objective_from_scores(h_pos: Tensor, h_neg: Tensor) -> Tensor:
    """-[mean_b log h_pos + mean_b sum_k log(1 - h_neg)], the minimized form."""
    pos_term = torch.log(h_pos).mean()
    if h_neg.numel():
        neg_term = torch.log1p(-h_neg).sum(dim=-1).mean()
    else:
        neg_term = torch.zeros((), dtype=h_pos.dtype)
    return -(pos_term + neg_term)


def crd_nce_loss(batch: ContrastiveBatch, cfg: CriticConfig) -> Tensor:
    """Negative critic log-likelihood for a contrastive batch."""
    a = batch.anchor.values
    p = batch.positive.values
    inner_pos = (a * p).sum(dim=-1)
    inner_neg = torch.einsum("bd,bnd->bn", a, batch.negatives.to(a.dtype))
    h_pos = _critic_from_inner(inner_pos, cfg)
    h_neg = _critic_from_inner(inner_neg, cfg)
    return nce_objective_from_scores(h_pos, h_neg)


def infonce_loss(anchor: EmbeddingBatch, positive: EmbeddingBatch,
                 negatives, tau: float) -> Tensor:
    """Softmax contrast of the positive against K negatives; >= 0, and
    exactly ln(K+1) when all scores are equal. K = 0 gives 0."""
    if not (tau > 0):
        raise DomainError(f"tau must be positive, got {tau}")
    negatives = as_tensor(negatives)
    if negatives.ndim != 3:
        raise ShapeError("negatives must be (batch, K, dim)")
    if not torch.equal(anchor.sample_index, positive.sample_index):
        raise DomainError("anchor and positive must be aligned by sample_index")
    a = anchor.values
    s_pos = (a * positive.values).sum(dim=-1, keepdim=True) / tau
    if negatives.shape[1]:
        s_neg = torch.einsum("bd,bnd->bn", a, negatives.to(a.dtype)) / tau
        scores = torch.cat([s_pos, s_neg], dim=1)
    else:
        scores = s_pos
    return (torch.logsumexp(scores, dim=1) - s_pos.squeeze(1)).mean()


def sample_negatives(anchor_index: int, anchor_label: Optional[int],
                     bank: MemoryBank, policy: str, count: int,
                     rng_seed: int) -> np.ndarray:
    """`count` bank indices drawn uniformly without replacement from the
    eligible set, returned sorted ascending (canonical order, so exhaustive
    draws are seed-independent). Never contains `anchor_index`.
    """
    anchor_index = int(anchor_index)
    if not (0 <= anchor_index < bank.size):
        raise IndexError(f"anchor_index {anchor_index} out of range [0, {bank.size})")
    if policy == SamplingPolicy.UNSUPERVISED:
        eligible = np.delete(np.arange(bank.size, dtype=np.int64), anchor_index)
    elif policy == SamplingPolicy.SUPERVISED:
        if bank.labels is None:
            raise DomainError("SUPERVISED sampling requires labels registered in the bank")
        if anchor_label is None:
            raise DomainError("SUPERVISED sampling requires the anchor's label")
        mask = bank.labels.numpy() != int(anchor_label)
        mask[anchor_index] = False
        eligible = np.nonzero(mask)[0].astype(np.int64)
    else:
        raise DomainError(f"unknown sampling policy {policy!r}")
    if count > eligible.size:
        raise InsufficientNegativesError(
            f"requested {count} negatives but only {eligible.size} are eligible")
    if count == eligible.size:
        return eligible
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    picked = rng.choice(eligible, size=count, replace=False)
    picked.sort()
    return picked


def _per_anchor_seed(rng_seed: int, anchor_index: int) -> int:
    ss = np.random.SeedSequence(rng_seed, spawn_key=(int(anchor_index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def sample_negative_matrix(anchors: EmbeddingBatch, bank: MemoryBank, policy: str,
                           count: int, rng_seed: int) -> np.ndarray:
    """Per-anchor negative indices, (batch, count); deterministic per seed."""
    out = np.empty((anchors.values.shape[0], count), dtype=np.int64)
    labels = anchors.labels
    for row, idx in enumerate(anchors.sample_index.tolist()):
        lab = int(labels[row]) if labels is not None else None
        out[row] = sample_negatives(idx, lab, bank, policy, count,
                                    _per_anchor_seed(rng_seed, idx))
    return out


def symmetric_crd_parts(teacher_emb: EmbeddingBatch, student_emb: EmbeddingBatch,
                        teacher_bank: MemoryBank, student_bank: MemoryBank,
                        policy: str, cfg: CriticConfig, rng_seed: int,
                        neg_indices: Optional[np.ndarray] = None):
    """Both anchoring directions of the contrastive loss.

    Returns (teacher_anchored, student_anchored) losses. The same negative
    indices address both banks, so a run is reproducible from `rng_seed`
    alone. Teacher-anchored negatives come from the student bank and vice
    versa.
    """
    if teacher_bank.size != student_bank.size:
        raise ShapeError("banks must have the same size")
    if teacher_bank.dim != teacher_emb.dim or student_bank.dim != student_emb.dim:
        raise ShapeError("bank dims must match embedding dims")
    count = cfg.n_negatives
    if neg_indices is None:
        neg_indices = sample_negative_matrix(teacher_emb, student_bank, policy,
                                             count, rng_seed)
    flat = torch.from_numpy(neg_indices.reshape(-1))
    b = neg_indices.shape[0]
    neg_student = student_bank.store[flat].reshape(b, count, student_bank.dim)
    neg_teacher = teacher_bank.store[flat].reshape(b, count, teacher_bank.dim)
    dir_teacher = crd_nce_loss(
        ContrastiveBatch(anchor=teacher_emb, positive=student_emb,
                         negatives=neg_student, validate=False), cfg)
    dir_student = crd_nce_loss(
        ContrastiveBatch(anchor=student_emb, positive=teacher_emb,
                         negatives=neg_teacher, validate=False), cfg)
    return dir_teacher, dir_student


def symmetric_crd_loss(teacher_emb: EmbeddingBatch, student_emb: EmbeddingBatch,
                       teacher_bank: MemoryBank, student_bank: MemoryBank,
                       policy: str, cfg: CriticConfig, rng_seed: int) -> Tensor:
    """Sum of the two anchoring directions."""
    dir_t, dir_s = symmetric_crd_parts(teacher_emb, student_emb, teacher_bank,
                                       student_bank, policy, cfg, rng_seed)
    return dir_t + dir_s


def estimate_z0(first_batch_scores, dataset_size: int) -> float:
    """Partition-constant estimate: M times the mean unnormalized score.

    Held fixed for the rest of a run once estimated from the first batch.
    """
    scores = np.asarray(first_batch_scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise DomainError("cannot estimate z0 from an empty score batch")
    if dataset_size < 1:
        raise DomainError("dataset_size must be >= 1")
    return float(dataset_size * scores.mean())
