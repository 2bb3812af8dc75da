"""Seeded synthetic data: low-rank spatial fields with smooth per-channel
spectral modulation, mimicking the redundancy of hyperspectral stacks so
masked reconstruction has learnable structure."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .model import Batch, make_mask
from .rng import RngState

_RANK = 3


def sample_image(model: ModelConfig, seed: int, sample_id: int) -> np.ndarray:
    """One [C, H, W] image, deterministic in (seed, sample_id)."""
    rng = RngState(seed).child("data", int(sample_id))
    h, w, c = model.image_h, model.image_w, model.channels
    ys = np.linspace(0.0, 1.0, h)[:, None]
    xs = np.linspace(0.0, 1.0, w)[None, :]
    cs = np.arange(c)[:, None, None] / max(c, 1)
    img = np.zeros((c, h, w))
    for _ in range(_RANK):
        fy, fx, fc = rng.uniform((3,), 0.5, 3.0)
        py, px, pc = rng.uniform((3,), 0.0, 2 * np.pi)
        amp = rng.uniform((), 0.5, 1.0)
        spatial = np.sin(2 * np.pi * fy * ys + py) * np.cos(2 * np.pi * fx * xs + px)
        spectral = np.sin(2 * np.pi * fc * cs + pc)
        img += amp * spectral * spatial[None, :, :]
    return img


def sample_meta(seed: int, sample_id: int) -> np.ndarray:
    """Four normalized metadata scalars (time-of-year, hour, lat, lon stand-ins)."""
    return RngState(seed).child("meta", int(sample_id)).uniform((4,))


def make_batch(model: ModelConfig, seed: int, step: int, sample_ids) -> Batch:
    """Batch for explicit global sample ids (masks are per-sample streams,
    so data-parallel shards and their serial concatenation agree exactly)."""
    images = np.stack([sample_image(model, seed, sid) for sid in sample_ids])
    meta = np.stack([sample_meta(seed, sid) for sid in sample_ids])
    mask = make_mask(model, sample_ids, seed, step)
    return Batch(images=images, meta=meta, mask=mask)


def step_sample_ids(batch_size: int, step: int, dp_index: int = 0, dp: int = 1):
    """Global sample ids consumed at `step` by one data-parallel worker."""
    base = step * batch_size * dp
    return [base + dp_index * batch_size + i for i in range(batch_size)]
