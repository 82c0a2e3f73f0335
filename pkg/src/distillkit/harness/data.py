"""Deterministic synthetic datasets for desk-scale experiments.

`synthshapes` renders 10 procedural shape classes at 32x32 with heavy
nuisance variation (position, scale, rotation, colors, low-frequency
clutter, an optional distractor shape, and pixel noise), sized so a tiny
convnet neither saturates nor collapses. `blobs` is a linearly separable
vector dataset for fast unit tests.

Generation is a pure function of the DatasetSpec (the seed derives from
the spec fields), so every run over the same spec sees identical data.
Generated arrays are cached in-process and, when DISTILLKIT_CACHE is set,
as .npz files under that directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from ..errors import DataError
from .config import DatasetSpec

_CACHE: Dict[str, "DeskDataset"] = {}


@dataclass
class DeskDataset:
    """Teacher pool, distill subset (a prefix of the pool), and test split."""

    teacher_x: torch.Tensor
    teacher_y: torch.Tensor
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor
    spec: DatasetSpec


@dataclass
class PairedViews:
    """Two aligned unlabeled views of the same underlying samples."""

    view_teacher: torch.Tensor
    view_student: torch.Tensor

    def __post_init__(self):
        if self.view_teacher.shape[0] != self.view_student.shape[0]:
            raise DataError("paired views must have the same number of samples")

    def __len__(self) -> int:
        return self.view_teacher.shape[0]


def _draw_shape(mask_rng: np.random.Generator, shape_id: int, size: int,
                grid: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Binary mask for one shape instance with random pose."""
    gy, gx = grid
    cx = (0.5 + mask_rng.uniform(-0.18, 0.18)) * size
    cy = (0.5 + mask_rng.uniform(-0.18, 0.18)) * size
    scale = mask_rng.uniform(0.26, 0.42) * size
    theta = mask_rng.uniform(0.0, 2.0 * np.pi)
    u = ((gx - cx) * np.cos(theta) + (gy - cy) * np.sin(theta)) / scale
    v = (-(gx - cx) * np.sin(theta) + (gy - cy) * np.cos(theta)) / scale
    r2 = u * u + v * v

    if shape_id == 0:            # disk
        return r2 < 1.0
    if shape_id == 1:            # ring
        return (r2 < 1.0) & (r2 > 0.45)
    if shape_id == 2:            # square
        return np.maximum(np.abs(u), np.abs(v)) < 0.82
    if shape_id == 3:            # diamond
        return (np.abs(u) + np.abs(v)) < 1.1
    if shape_id == 4:            # cross
        return ((np.abs(u) < 0.33) & (np.abs(v) < 1.0)) | \
               ((np.abs(v) < 0.33) & (np.abs(u) < 1.0))
    if shape_id == 5:            # triangle
        return (v > -0.62) & (v < 1.05 - 2.1 * np.abs(u))
    if shape_id == 6:            # two dots
        d1 = (u - 0.55) ** 2 + v * v
        d2 = (u + 0.55) ** 2 + v * v
        return np.minimum(d1, d2) < 0.17
    if shape_id == 7:            # checkered disk
        return (r2 < 1.0) & (np.sin(5.5 * u) * np.sin(5.5 * v) > 0)
    if shape_id == 8:            # striped disk
        return (r2 < 1.0) & (np.sin(6.5 * u) > 0)
    if shape_id == 9:            # crescent
        bite = (u - 0.42) ** 2 + v * v
        return (r2 < 1.0) & (bite > 0.5)
    raise DataError(f"no shape with id {shape_id}")


def _render_shapes(n: int, spec: DatasetSpec, rng: np.random.Generator):
    size, channels = spec.image_size, spec.channels
    gy, gx = np.mgrid[0:size, 0:size].astype(np.float64)
    grid = (gy, gx)
    labels = rng.integers(0, spec.classes, size=n).astype(np.int64)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    clutter_cells = max(2, size // 8)
    rep = size // clutter_cells
    for i in range(n):
        mask = _draw_shape(rng, int(labels[i]) % 10, size, grid).astype(np.float64)
        bg = rng.uniform(0.05, 0.55, size=channels)
        fg = rng.uniform(0.45, 0.95, size=channels)
        img = bg[:, None, None] + mask[None] * (fg - bg)[:, None, None]
        if rng.uniform() < spec.distractor_rate:
            other = int(rng.integers(0, 10))
            dmask = _draw_shape(rng, other, size, grid).astype(np.float64)
            dcol = rng.uniform(0.0, 1.0, size=channels)
            alpha = 0.35
            img = img * (1 - alpha * dmask[None]) + \
                alpha * dmask[None] * dcol[:, None, None]
        clutter = rng.uniform(-0.22, 0.22, size=(channels, clutter_cells, clutter_cells))
        img = img + np.kron(clutter, np.ones((1, rep, rep)))
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
    return images, labels


def _render_blobs(n: int, spec: DatasetSpec, rng: np.random.Generator,
                  means: np.ndarray):
    labels = rng.integers(0, spec.classes, size=n).astype(np.int64)
    x = means[labels] + rng.standard_normal((n, spec.dim))
    return x.astype(np.float32), labels


def get_dataset(spec: DatasetSpec) -> DeskDataset:
    """Generate (or fetch from cache) the splits for a dataset spec."""
    key = repr(sorted(spec.__dict__.items()))
    if key in _CACHE:
        return _CACHE[key]
    cache_dir = os.environ.get("DISTILLKIT_CACHE")
    cache_file: Optional[Path] = None
    if cache_dir:
        cache_file = Path(cache_dir) / f"{spec.name}_{spec.generation_seed():08x}.npz"
        if cache_file.exists():
            z = np.load(cache_file)
            ds = _splits_from_arrays(z["x"], z["y"], spec)
            _CACHE[key] = ds
            return ds

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.generation_seed())))
    total = spec.teacher_pool_size + spec.test_size
    if spec.name == "synthshapes":
        x, y = _render_shapes(total, spec, rng)
    elif spec.name == "blobs":
        dirs = rng.standard_normal((spec.classes, spec.dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = dirs * spec.separation
        x, y = _render_blobs(total, spec, rng, means)
    else:
        raise DataError(f"unknown dataset {spec.name!r}")

    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(cache_file, x=x, y=y)
    ds = _splits_from_arrays(x, y, spec)
    _CACHE[key] = ds
    return ds


def _splits_from_arrays(x: np.ndarray, y: np.ndarray, spec: DatasetSpec) -> DeskDataset:
    pool = spec.teacher_pool_size
    tx = torch.from_numpy(x[:pool].copy())
    ty = torch.from_numpy(y[:pool].copy())
    return DeskDataset(
        teacher_x=tx, teacher_y=ty,
        train_x=tx[:spec.subset_size], train_y=ty[:spec.subset_size],
        test_x=torch.from_numpy(x[pool:pool + spec.test_size].copy()),
        test_y=torch.from_numpy(y[pool:pool + spec.test_size].copy()),
        spec=spec)


def channel_split_views(images: torch.Tensor) -> PairedViews:
    """Modality pair: first channel vs. the remaining channels."""
    if images.ndim != 4 or images.shape[1] < 2:
        raise DataError("channel split needs (n, C>=2, H, W) images")
    return PairedViews(view_teacher=images[:, :1].contiguous(),
                       view_student=images[:, 1:].contiguous())


def identical_views(images: torch.Tensor) -> PairedViews:
    """Degenerate pairing: both modalities are the same tensor."""
    return PairedViews(view_teacher=images, view_student=images)
