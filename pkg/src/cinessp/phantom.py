"""Synthetic short-axis cine phantoms with analytically known labels.

Geometry per slice and frame: a disc (LV cavity) inside a ring (myocardium),
plus a crescent to one side (RV) obtained as a larger disc minus the dilated
LV+MYO disc. Cavity radius contracts sinusoidally over the cycle, so frame 0
is end diastole and frame ``frames // 2`` is end systole, and tapers towards
the apical slice.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CineVolume, VENDORS
from .errors import ValidationError

# mean intensity per class: background, LV blood pool, myocardium, RV blood pool
_CLASS_INTENSITY = np.array([0.15, 1.0, 0.35, 0.85])

# (gain, offset, noise multiplier, bias-field strength) per vendor group
_VENDOR_REGIMES = {
    "A": (1.0, 0.0, 1.0, 0.0),
    "B": (1.1, 0.02, 1.0, 0.1),
    "C": (0.7, 0.15, 1.6, 0.35),
    "D": (0.8, 0.1, 1.4, 0.3),
}


@dataclass
class PhantomSpec:
    n_subjects: int = 10
    slices: int | tuple[int, int] = 6
    frames: int = 8
    image_size: int = 64
    lv_radius: float = 0.14
    myo_thickness: float = 0.06
    rv_radius: float = 0.2
    rv_offset: float = 0.18
    apex_taper: float = 0.45
    contraction: float = 0.3
    noise: float = 0.04
    jitter: float = 0.04
    vendors: tuple[str, ...] = VENDORS
    seed: int = 0
    id_prefix: str = "phantom"

    def __post_init__(self):
        if isinstance(self.slices, list):
            self.slices = tuple(self.slices)
        self.vendors = tuple(self.vendors)
        self.validate()

    def slice_range(self) -> tuple[int, int]:
        if isinstance(self.slices, tuple):
            return self.slices
        return (self.slices, self.slices)

    def validate(self):
        lo, hi = self.slice_range()
        if self.n_subjects < 1 or lo < 1 or hi < lo or self.frames < 2 or self.image_size < 8:
            raise ValidationError("phantom counts must be positive (frames >= 2, image_size >= 8)")
        if min(self.lv_radius, self.myo_thickness, self.rv_radius) <= 0:
            raise ValidationError("phantom radii must be positive")
        if not 0 <= self.contraction < 1:
            raise ValidationError("contraction amplitude must be in [0, 1)")
        if not 0 <= self.apex_taper < 1:
            raise ValidationError("apex_taper must be in [0, 1)")
        for v in self.vendors:
            if v not in VENDORS:
                raise ValidationError(f"unknown vendor {v!r}")
        # worst case extent (largest jittered heart) must stay inside the unit field of view
        outer = max(self.lv_radius + self.myo_thickness, self.rv_radius) * (1 + self.jitter)
        reach = self.rv_offset + outer + 2 * self.jitter
        if reach >= 0.5:
            raise ValidationError(f"geometry leaves the field of view (extent {reach:.3f} >= 0.5)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slices"] = list(d["slices"]) if isinstance(d["slices"], tuple) else d["slices"]
        d["vendors"] = list(d["vendors"])
        return d


def _contraction_curve(frames: int) -> np.ndarray:
    t = np.arange(frames)
    return 0.5 * (1 - np.cos(2 * np.pi * t / frames))


def _render(spec: PhantomSpec, rng, n_slices: int, vendor: str):
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n]
    yy = (yy + 0.5) / n - 0.5
    xx = (xx + 0.5) / n - 0.5

    cy, cx = rng.uniform(-spec.jitter, spec.jitter, size=2)
    scale = 1 + rng.uniform(-spec.jitter, spec.jitter)
    r_lv0 = spec.lv_radius * scale
    thick = spec.myo_thickness * scale
    r_rv0 = spec.rv_radius * scale
    curve = _contraction_curve(spec.frames)

    labels = np.zeros((n_slices, spec.frames, n, n), dtype=np.uint8)
    for s in range(n_slices):
        taper = 1 - spec.apex_taper * (s / (n_slices - 1) if n_slices > 1 else 0.0)
        for t in range(spec.frames):
            squeeze = 1 - spec.contraction * curve[t]
            r_lv = r_lv0 * taper * squeeze
            r_epi = r_lv + thick * taper
            r_rv = r_rv0 * taper * (1 - 0.6 * spec.contraction * curve[t])
            d_lv = np.hypot(yy - cy, xx - cx)
            d_rv = np.hypot(yy - cy, xx - (cx - spec.rv_offset * taper))
            lab = np.zeros((n, n), dtype=np.uint8)
            lab[(d_rv <= r_rv) & (d_lv > r_epi + 0.5 / n)] = 3
            lab[(d_lv <= r_epi) & (d_lv > r_lv)] = 2
            lab[d_lv <= r_lv] = 1
            labels[s, t] = lab

    gain, offset, noise_mult, bias = _VENDOR_REGIMES[vendor]
    subject_gain = gain * (1 + rng.uniform(-0.1, 0.1))
    image = _CLASS_INTENSITY[labels] * subject_gain + offset
    field = 1 + bias * (xx + yy)
    image = image * field
    image = image + rng.normal(0.0, spec.noise * noise_mult, size=image.shape)
    return image.astype(np.float32), labels


def generate(spec: PhantomSpec) -> list[CineVolume]:
    """Deterministic list of phantom volumes; vendors cycle through ``spec.vendors``."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    lo, hi = spec.slice_range()
    volumes = []
    for i, child in enumerate(root.spawn(spec.n_subjects)):
        rng = np.random.default_rng(child)
        n_slices = int(rng.integers(lo, hi + 1))
        vendor = spec.vendors[i % len(spec.vendors)]
        image, labels = _render(spec, rng, n_slices, vendor)

        cavity = (labels == 1).sum(axis=(0, 2, 3))
        ed = int(np.argmax(cavity))
        minima = np.flatnonzero(cavity == cavity.min())
        es = spec.frames // 2 if spec.frames // 2 in minima else int(minima[0])
        if es == ed:
            es = spec.frames // 2
        volumes.append(
            CineVolume(
                subject_id=f"{spec.id_prefix}{i:04d}",
                image=image,
                masks={ed: labels[:, ed].astype(np.int64), es: labels[:, es].astype(np.int64)},
                phase_of={ed: "ED", es: "ES"},
                vendor=vendor,
                pixel_spacing=(1.5, 1.5, 8.0),
            )
        )
    return volumes
