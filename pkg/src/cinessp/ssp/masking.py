"""Patch masking and masked-patch reconstruction loss for MIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ShapeError, ValidationError


@dataclass
class MaskSpec:
    patch_size: tuple[int, int] = (32, 32)
    mask_ratio: float = 0.75
    mask_value: float = 0.0

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValidationError("mask_ratio must be in [0, 1]")

    def grid_shape(self, image_shape) -> tuple[int, int]:
        h, w = image_shape[-2:]
        ph, pw = self.patch_size
        if h % ph or w % pw:
            raise ShapeError(f"image ({h}, {w}) is not tiled by {ph}x{pw} patches")
        return h // ph, w // pw

    def n_masked(self, image_shape) -> int:
        gh, gw = self.grid_shape(image_shape)
        return int(round(self.mask_ratio * gh * gw))


def random_grid(shape, n_masked: int, rng: np.random.Generator) -> np.ndarray:
    n = shape[0] * shape[1]
    grid = np.zeros(n, dtype=bool)
    grid[rng.choice(n, size=n_masked, replace=False)] = True
    return grid.reshape(shape)


def expand_grid(grid, patch_size):
    """Patch grid -> pixel mask (works for numpy arrays and tensors, batched or not)."""
    ph, pw = patch_size
    if isinstance(grid, torch.Tensor):
        return grid.repeat_interleave(ph, dim=-2).repeat_interleave(pw, dim=-1)
    return np.repeat(np.repeat(grid, ph, axis=-2), pw, axis=-1)


def mim_mask(image2d, spec: MaskSpec, rng: np.random.Generator):
    """Set a random ``round(ratio * n_patches)`` patches to ``spec.mask_value``."""
    image2d = np.asarray(image2d)
    grid = random_grid(spec.grid_shape(image2d.shape), spec.n_masked(image2d.shape), rng)
    pixels = expand_grid(grid, spec.patch_size)
    masked = np.where(pixels, np.asarray(spec.mask_value, dtype=image2d.dtype), image2d)
    return masked, grid


def mask_batch(images: torch.Tensor, spec: MaskSpec, rng: np.random.Generator):
    """Mask a (B, 1, H, W) batch, one independent grid per image."""
    gshape = spec.grid_shape(images.shape)
    k = spec.n_masked(images.shape)
    grids = np.stack([random_grid(gshape, k, rng) for _ in range(images.shape[0])])
    grids_t = torch.from_numpy(grids).to(images.device)
    pixels = expand_grid(grids_t, spec.patch_size)[:, None]
    masked = images.masked_fill(pixels, spec.mask_value)
    return masked, grids_t


def mim_loss(prediction, original, grid) -> torch.Tensor:
    """Mean squared error over the pixels of masked patches only."""
    prediction = torch.as_tensor(prediction)
    original = torch.as_tensor(original, dtype=prediction.dtype)
    grid = torch.as_tensor(grid, dtype=torch.bool)
    if prediction.shape != original.shape:
        raise ValidationError(f"prediction {tuple(prediction.shape)} and original {tuple(original.shape)} differ")
    h, w = prediction.shape[-2:]
    gh, gw = grid.shape[-2:]
    if h % gh or w % gw:
        raise ValidationError(f"grid {gh}x{gw} does not tile image {h}x{w}")
    pixels = expand_grid(grid, (h // gh, w // gw))
    while pixels.ndim < prediction.ndim:
        pixels = pixels.unsqueeze(-3)
    pixels = pixels.expand_as(prediction)
    n = pixels.sum()
    if n == 0:
        return prediction.sum() * 0.0
    sq = (prediction - original) ** 2
    return torch.where(pixels, sq, torch.zeros_like(sq)).sum() / n
