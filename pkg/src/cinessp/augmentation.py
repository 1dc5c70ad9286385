"""2D intensity and spatial augmentation, paired views and multi-crop.

Every function takes an explicit ``numpy.random.Generator``; nothing here
touches global random state.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ValidationError

EPS = 1e-8


@dataclass
class AugmentationConfig:
    enabled: bool = True
    rotation_max_deg: float = 180.0
    scale_range: tuple[float, float] = (0.7, 1.4)
    flip_prob: float = 0.5
    elastic: dict = field(default_factory=lambda: {"prob": 0.2, "alpha": 6.0, "sigma": 4.0})
    gaussian_noise: dict = field(default_factory=lambda: {"prob": 0.15, "sigma_max": 0.1})
    gaussian_blur: dict = field(default_factory=lambda: {"prob": 0.2, "sigma_range": (0.5, 1.0)})
    brightness: dict = field(default_factory=lambda: {"prob": 0.15, "range": (0.75, 1.25)})
    contrast: dict = field(default_factory=lambda: {"prob": 0.15, "range": (0.75, 1.25)})
    gamma: dict = field(default_factory=lambda: {"prob": 0.3, "range": (0.7, 1.5)})
    low_res_simulation: dict = field(default_factory=lambda: {"prob": 0.25, "zoom_range": (0.5, 1.0)})
    target_size: tuple[int, int] = (256, 256)

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.target_size = tuple(int(s) for s in self.target_size)
        for name in ("gaussian_blur", "brightness", "contrast", "gamma", "low_res_simulation"):
            sub = dict(getattr(self, name))
            for k, v in sub.items():
                if isinstance(v, list):
                    sub[k] = tuple(v)
            setattr(self, name, sub)
        self.validate()

    def validate(self):
        probs = [self.flip_prob] + [getattr(self, n)["prob"] for n in
                                    ("elastic", "gaussian_noise", "gaussian_blur", "brightness",
                                     "contrast", "gamma", "low_res_simulation")]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValidationError("augmentation probabilities must lie in [0, 1]")
        ranges = [self.scale_range, self.gaussian_blur["sigma_range"], self.brightness["range"],
                  self.contrast["range"], self.gamma["range"], self.low_res_simulation["zoom_range"]]
        if any(lo > hi for lo, hi in ranges):
            raise ValidationError("augmentation ranges must be ordered lo <= hi")
        if min(self.target_size) < 1:
            raise ValidationError("target_size must be positive")

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class MultiCropConfig:
    n_global: int = 2
    n_local: int = 6
    global_size: tuple[int, int] = (256, 256)
    local_size: tuple[int, int] = (128, 128)
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)

    def __post_init__(self):
        self.global_size = tuple(int(s) for s in self.global_size)
        self.local_size = tuple(int(s) for s in self.local_size)
        self.global_scale = tuple(self.global_scale)
        self.local_scale = tuple(self.local_scale)
        if self.n_global < 2:
            raise ValidationError("multi-crop needs at least 2 global crops")
        if self.n_local < 0:
            raise ValidationError("n_local must be >= 0")
        if any(l >= g for l, g in zip(self.local_size, self.global_size)):
            raise ValidationError("local crop size must be strictly smaller than global crop size on every axis")

    def to_dict(self) -> dict:
        return _plain(asdict(self))


@dataclass
class SpatialParams:
    """Recorded spatial transform: output pixel -> source coordinate mapping."""

    input_shape: tuple[int, int]
    output_shape: tuple[int, int]
    matrix: np.ndarray  # 2x2, applied to centred output coordinates
    offset: np.ndarray  # source-space centre
    displacement: np.ndarray | None = None  # (2, H, W) elastic field in source pixels

    def coordinates(self) -> np.ndarray:
        h, w = self.output_shape
        grid = np.mgrid[0:h, 0:w].astype(np.float64)
        centred = grid - np.array([(h - 1) / 2, (w - 1) / 2])[:, None, None]
        coords = np.einsum("ij,jhw->ihw", self.matrix, centred) + self.offset[:, None, None]
        if self.displacement is not None:
            coords = coords + self.displacement
        return coords


def standardize(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    sd = float(image.std())
    if sd < EPS:
        return np.zeros_like(image)
    return ((image - image.mean()) / sd).astype(np.float32)


def apply_spatial(array: np.ndarray, params: SpatialParams, order: int) -> np.ndarray:
    """Resample ``array`` with ``params``; order 0 for label maps, 1 for images."""
    coords = params.coordinates()
    out = ndimage.map_coordinates(np.asarray(array, dtype=np.float64 if order else array.dtype), coords,
                                  order=order, mode="constant", cval=0.0, prefilter=False)
    return out.astype(array.dtype, copy=False)


def _resize_params(in_shape, out_shape) -> SpatialParams:
    sy = in_shape[0] / out_shape[0]
    sx = in_shape[1] / out_shape[1]
    return SpatialParams(
        input_shape=tuple(in_shape),
        output_shape=tuple(out_shape),
        matrix=np.diag([sy, sx]),
        offset=np.array([(in_shape[0] - 1) / 2, (in_shape[1] - 1) / 2]),
    )


def sample_spatial(in_shape, config: AugmentationConfig, rng: np.random.Generator) -> SpatialParams:
    params = _resize_params(in_shape, config.target_size)
    if not config.enabled:
        return params
    angle = math.radians(rng.uniform(-config.rotation_max_deg, config.rotation_max_deg))
    scale = rng.uniform(*config.scale_range)
    flips = rng.random(2) < config.flip_prob
    c, s = math.cos(angle), math.sin(angle)
    # zoom by `scale` means sampling the source with step 1/scale
    rot = np.array([[c, -s], [s, c]]) / scale
    flip = np.diag([-1.0 if flips[0] else 1.0, -1.0 if flips[1] else 1.0])
    params.matrix = params.matrix @ rot @ flip
    el = config.elastic
    if rng.random() < el["prob"]:
        h, w = config.target_size
        field_ = rng.uniform(-1, 1, size=(2, h, w))
        field_ = np.stack([ndimage.gaussian_filter(f, el["sigma"], mode="constant") for f in field_])
        peak = np.abs(field_).max()
        if peak > 0:
            field_ *= el["alpha"] / peak
        params.displacement = field_
    return params


def _intensity(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    img = image.astype(np.float64)
    if rng.random() < config.gaussian_noise["prob"]:
        sigma = rng.uniform(0, config.gaussian_noise["sigma_max"])
        img = img + rng.normal(0.0, sigma, size=img.shape)
    if rng.random() < config.gaussian_blur["prob"]:
        img = ndimage.gaussian_filter(img, rng.uniform(*config.gaussian_blur["sigma_range"]))
    if rng.random() < config.brightness["prob"]:
        img = img * rng.uniform(*config.brightness["range"])
    if rng.random() < config.contrast["prob"]:
        factor = rng.uniform(*config.contrast["range"])
        mean = img.mean()
        lo, hi = img.min(), img.max()
        img = np.clip((img - mean) * factor + mean, lo, hi)
    if rng.random() < config.low_res_simulation["prob"]:
        zoom = rng.uniform(*config.low_res_simulation["zoom_range"])
        small_shape = [max(1, int(round(s * zoom))) for s in img.shape]
        small = ndimage.zoom(img, [a / b for a, b in zip(small_shape, img.shape)], order=0)
        img = ndimage.zoom(small, [a / b for a, b in zip(img.shape, small.shape)], order=3)
        img = img[: image.shape[0], : image.shape[1]]
    if rng.random() < config.gamma["prob"]:
        gamma = rng.uniform(*config.gamma["range"])
        mean, sd = img.mean(), img.std()
        lo, hi = img.min(), img.max()
        span = hi - lo
        if span > EPS:
            img = np.power((img - lo) / span, gamma) * span + lo
            # keep first and second moments, as nnU-Net's gamma transform does
            new_sd = img.std()
            if new_sd > EPS:
                img = (img - img.mean()) / new_sd * sd + mean
    return img.astype(np.float32)


def augment(image2d, mask2d=None, config: AugmentationConfig | None = None,
            rng: np.random.Generator | None = None, return_params: bool = False):
    """Standardize, spatially transform, re-standardize and intensity-augment one slice.

    Returns ``(image, mask)``; ``mask`` is None when no mask is given. With
    ``return_params=True`` the recorded :class:`SpatialParams` is appended.
    """
    config = config or AugmentationConfig()
    if rng is None:
        rng = np.random.default_rng(0)
    image = standardize(image2d)
    if image.ndim != 2:
        raise ValidationError(f"augment expects a 2D slice, got shape {image.shape}")
    if mask2d is not None and np.shape(mask2d) != image.shape:
        raise ValidationError(f"mask shape {np.shape(mask2d)} != image shape {image.shape}")

    params = sample_spatial(image.shape, config, rng)
    if not config.enabled and image.shape == tuple(config.target_size):
        out = image.copy()
        out_mask = None if mask2d is None else np.asarray(mask2d).copy()
    else:
        # resampling (zero fill, zoom) shifts the moments, so standardize again
        out = standardize(apply_spatial(image, params, order=1))
        out_mask = None if mask2d is None else apply_spatial(np.asarray(mask2d), params, order=0)
    if config.enabled:
        out = _intensity(out, config, rng)
    out = out.astype(np.float32)
    if return_params:
        return out, out_mask, params
    return out, out_mask


def two_views(image2d, config: AugmentationConfig, rng: np.random.Generator):
    """Two independent augmentations of one slice (positive pair for contrastive learning)."""
    a, _ = augment(image2d, None, config, rng)
    b, _ = augment(image2d, None, config, rng)
    return a, b


def _random_crop(image: np.ndarray, scale_range, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape
    area = h * w * rng.uniform(*scale_range)
    log_ratio = (math.log(3 / 4), math.log(4 / 3))
    aspect = math.exp(rng.uniform(*log_ratio))
    ch = max(1, int(round(math.sqrt(area / aspect))))
    cw = max(1, int(round(math.sqrt(area * aspect))))
    pad_y, pad_x = max(0, ch - h), max(0, cw - w)
    if pad_y or pad_x:
        image = np.pad(image, ((pad_y // 2, pad_y - pad_y // 2), (pad_x // 2, pad_x - pad_x // 2)))
        h, w = image.shape
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return image[y0:y0 + ch, x0:x0 + cw]


def multi_crop(image2d, config: MultiCropConfig, aug: AugmentationConfig, rng: np.random.Generator):
    """Global and local crops, each independently augmented to its crop size."""
    image = standardize(image2d)
    lh, lw = config.local_size
    if image.shape[0] < lh or image.shape[1] < lw:
        py, px = max(0, lh - image.shape[0]), max(0, lw - image.shape[1])
        image = np.pad(image, ((py // 2, py - py // 2), (px // 2, px - px // 2)))
    globals_, locals_ = [], []
    for _ in range(config.n_global):
        crop = _random_crop(image, config.global_scale, rng)
        g, _ = augment(crop, None, replace(aug, target_size=config.global_size), rng)
        globals_.append(g)
    for _ in range(config.n_local):
        crop = _random_crop(image, config.local_scale, rng)
        l_, _ = augment(crop, None, replace(aug, target_size=config.local_size), rng)
        locals_.append(l_)
    return globals_, locals_


def worker_rng(base_seed: int, epoch: int, worker_id: int = 0) -> np.random.Generator:
    """Per-(seed, epoch, worker) stream so parallel loaders stay reproducible."""
    digest = hashlib.sha256(f"{base_seed}:{epoch}:{worker_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))
