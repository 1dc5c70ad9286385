"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .data import CineVolume, SliceSample, extract_slices
from .errors import ShapeError, ValidationError


def check_volumes(X) -> list[CineVolume]:
    """A single volume or a non-empty sequence of validated volumes."""
    if isinstance(X, CineVolume):
        X = [X]
    X = list(X)
    if not X:
        raise ValidationError("expected at least one CineVolume")
    for v in X:
        if not isinstance(v, CineVolume):
            raise ValidationError(f"expected CineVolume, got {type(v).__name__}")
        v.validate()
    ids = [v.subject_id for v in X]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate subject ids")
    return X


def check_images(X, divisor: int | None = None) -> np.ndarray:
    """Stack 2D images into a float32 ``(N, H, W)`` array."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ShapeError(f"expected images shaped (N, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValidationError("expected at least one image")
    if not np.isfinite(arr).all():
        raise ValidationError("images contain NaN or inf")
    if divisor and (arr.shape[1] % divisor or arr.shape[2] % divisor):
        raise ShapeError(f"image size {arr.shape[1:]} must be divisible by {divisor}")
    return arr


def check_slices(X) -> list:
    """Unlabeled training items: slices, volumes (expanded to all slices) or 2D arrays."""
    if isinstance(X, CineVolume):
        X = [X]
    if isinstance(X, np.ndarray):
        return list(check_images(X))
    items = []
    for x in X:
        if isinstance(x, CineVolume):
            items.extend(extract_slices(x))
        elif isinstance(x, SliceSample):
            items.append(x)
        else:
            items.extend(check_images(x))
    if not items:
        raise ValidationError("no training slices")
    return items
