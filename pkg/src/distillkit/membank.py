"""Persistent per-sample embedding store with momentum updates.

The bank keeps one unit-norm row per dataset sample so the contrastive
loss can draw large negative sets without large batches. Rows for the
current batch are overwritten as `normalize(m * old + (1 - m) * new)`;
`m = 0` replaces rows exactly and `m = 1` leaves them untouched.

Snapshot format (CRDBANK1, little-endian, normative for reproducibility):

    magic   8 bytes  b"CRDBANK1"
    size    u32      number of rows M
    dim     u32      embedding dimension d
    labels  u8       1 if labels present else 0
    store   M*d f32  row-major embeddings
    labels  M   i32  only when the flag is set
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import EmbeddingBatch, Tensor, UNIT_NORM_ATOL
from .errors import DomainError, ShapeError, ZeroNormError

_MAGIC = b"CRDBANK1"
_HEADER = struct.Struct("<8sIIB")


@dataclass
class MemoryBank:
    store: Tensor                      # (size, dim) float32, rows unit-norm
    labels: Optional[Tensor] = None    # (size,) int64 when present
    momentum: float = 0.5

    def __post_init__(self):
        if not isinstance(self.store, Tensor):
            self.store = torch.as_tensor(np.asarray(self.store))
        self.store = self.store.to(torch.float32)
        if self.store.ndim != 2:
            raise ShapeError("bank store must be (size, dim)")
        norms = torch.linalg.vector_norm(self.store, dim=1)
        if self.store.shape[0] and float((norms - 1.0).abs().max()) > UNIT_NORM_ATOL:
            raise DomainError("bank rows must be unit-norm within 1e-6")
        if not (0.0 <= self.momentum <= 1.0):
            raise DomainError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.labels is not None:
            lab = torch.as_tensor(np.asarray(self.labels)).reshape(-1).to(torch.int64)
            if lab.shape[0] != self.store.shape[0]:
                raise ShapeError("labels length must equal bank size")
            self.labels = lab

    @property
    def size(self) -> int:
        return self.store.shape[0]

    @property
    def dim(self) -> int:
        return self.store.shape[1]

    def retrieve(self, indices) -> Tensor:
        return retrieve(self, indices)

    def update(self, indices, new_embs: EmbeddingBatch) -> None:
        update(self, indices, new_embs)

    def save(self, path) -> None:
        save_bank(self, path)


def init_bank(size: int, dim: int, labels=None, seed: int = 0,
              momentum: float = 0.5) -> MemoryBank:
    """Bank with independent uniform-random unit-vector rows, seed-deterministic."""
    if size < 2:
        raise DomainError(f"bank size must be >= 2, got {size}")
    if dim < 1:
        raise DomainError(f"bank dim must be >= 1, got {dim}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    rows = rng.standard_normal((size, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    rows = rows.astype(np.float32)
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)  # re-unit after f32 cast
    return MemoryBank(store=torch.from_numpy(rows), labels=labels, momentum=momentum)


def _check_indices(bank: MemoryBank, indices) -> Tensor:
    idx = torch.as_tensor(np.asarray(indices)).reshape(-1).to(torch.int64)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= bank.size):
        raise IndexError(f"bank index out of range [0, {bank.size})")
    return idx


def retrieve(bank: MemoryBank, indices) -> Tensor:
    """Rows in the order of `indices` (duplicates allowed); never mutates."""
    idx = _check_indices(bank, indices)
    if idx.numel() == 0:
        return torch.empty(0, bank.dim, dtype=bank.store.dtype)
    return bank.store[idx].clone()


def update(bank: MemoryBank, indices, new_embs: EmbeddingBatch) -> None:
    """Momentum-mix new embeddings into the addressed rows, renormalizing."""
    idx = _check_indices(bank, indices)
    if idx.numel() != torch.unique(idx).numel():
        raise ShapeError("update indices must be unique")
    vals = new_embs.values.detach().to(torch.float32)
    if vals.shape[0] != idx.numel():
        raise ShapeError("number of new embeddings must match number of indices")
    if vals.shape[1] != bank.dim:
        raise ShapeError(f"embedding dim {vals.shape[1]} != bank dim {bank.dim}")
    m = bank.momentum
    if m == 0.0:
        bank.store[idx] = vals
        return
    if m == 1.0:
        return
    mixed = m * bank.store[idx] + (1.0 - m) * vals
    norms = torch.linalg.vector_norm(mixed, dim=1, keepdim=True)
    if idx.numel() and float(norms.min()) < 1e-12:
        raise ZeroNormError("momentum mix collapsed a row to zero norm")
    bank.store[idx] = mixed / norms


def save_bank(bank: MemoryBank, path) -> None:
    path = Path(path)
    has_labels = bank.labels is not None
    blob = bytearray(_HEADER.pack(_MAGIC, bank.size, bank.dim, 1 if has_labels else 0))
    blob += np.ascontiguousarray(bank.store.numpy(), dtype="<f4").tobytes()
    if has_labels:
        blob += np.ascontiguousarray(bank.labels.numpy(), dtype="<i4").tobytes()
    path.write_bytes(bytes(blob))


def load_bank(path, momentum: float = 0.5) -> MemoryBank:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DomainError("bank file truncated")
    magic, size, dim, has_labels = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise DomainError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    off = _HEADER.size
    n_store = size * dim * 4
    store = np.frombuffer(raw, dtype="<f4", count=size * dim, offset=off).reshape(size, dim)
    off += n_store
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=size, offset=off).astype(np.int64)
        off += size * 4
    if off != len(raw):
        raise DomainError("bank file has trailing bytes")
    return MemoryBank(store=torch.from_numpy(store.copy()), labels=labels, momentum=momentum)
