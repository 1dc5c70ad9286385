"""Cine volume ingestion, slicing, splits and labeled subsets.

On-disk layout (one directory per subject)::

    <root>/<subject_id>/image.nii.gz   4D image stored as (row, col, slice, time)
    <root>/<subject_id>/label.nii.gz   optional 4D labels, unlabeled frames zero-filled
    <root>/<subject_id>/meta.json      {"subject_id", "vendor", "phases": {"<t>": "ED"|"ES"},
                                        "pixel_spacing": [row_mm, col_mm, slice_mm]}

In memory the image axes are reordered to (slice, time, row, col).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np

from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

VENDORS = ("A", "B", "C", "D")
PHASES = ("ED", "ES")
N_CLASSES = 4
CLASS_NAMES = {1: "LV", 2: "MYO", 3: "RV"}


@dataclass
class CineVolume:
    subject_id: str
    image: np.ndarray
    masks: dict[int, np.ndarray]
    phase_of: dict[int, str]
    vendor: str = "A"
    pixel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.masks = {int(t): np.asarray(m) for t, m in self.masks.items()}
        self.phase_of = {int(t): p for t, p in self.phase_of.items()}
        self.validate()

    @property
    def labeled_frames(self) -> set[int]:
        return set(self.masks)

    @property
    def n_slices(self) -> int:
        return self.image.shape[0]

    @property
    def n_frames(self) -> int:
        return self.image.shape[1]

    def frame_of(self, phase: str) -> int:
        for t, p in self.phase_of.items():
            if p == phase:
                return t
        raise KeyError(f"{self.subject_id} has no {phase} frame")

    def validate(self):
        if self.image.ndim != 4:
            raise ShapeError(f"{self.subject_id}: image must be 4D (slice, time, row, col), got shape {self.image.shape}")
        if self.vendor not in VENDORS:
            raise ValidationError(f"{self.subject_id}: unknown vendor {self.vendor!r}")
        expected = (self.image.shape[0],) + self.image.shape[2:]
        axis_names = ("slice", "row", "col")
        for t, mask in self.masks.items():
            if not 0 <= t < self.image.shape[1]:
                raise ValidationError(f"{self.subject_id}: labeled frame {t} outside time axis of length {self.image.shape[1]}")
            if mask.shape != expected:
                if mask.ndim != 3:
                    raise ShapeError(f"{self.subject_id}: mask for frame {t} must be 3D, got shape {mask.shape}")
                bad = [name for name, a, b in zip(axis_names, mask.shape, expected) if a != b]
                raise ShapeError(
                    f"{self.subject_id}: mask for frame {t} mismatches image on {', '.join(bad)} axis "
                    f"(mask {mask.shape}, image {expected})"
                )
            if mask.size and (mask.min() < 0 or mask.max() >= N_CLASSES):
                raise ValidationError(f"{self.subject_id}: label value out of range in frame {t} (allowed 0..{N_CLASSES - 1})")
        if set(self.phase_of) != set(self.masks):
            raise ValidationError(f"{self.subject_id}: phase tags {sorted(self.phase_of)} do not match labeled frames {sorted(self.masks)}")
        for t, p in self.phase_of.items():
            if p not in PHASES:
                raise ValidationError(f"{self.subject_id}: unknown phase {p!r} for frame {t}")


@dataclass
class SliceSample:
    subject_id: str
    slice_index: int
    time_index: int
    image2d: np.ndarray
    relative_position: float
    vendor: str
    mask2d: np.ndarray | None = None
    phase: str | None = None

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.subject_id, self.slice_index, self.time_index)


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sum(len(s) for s in sets) != len(set().union(*sets)):
            raise ValidationError("split lists are not pairwise disjoint")

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d["seed"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- I/O


def _read_nifti(path) -> np.ndarray:
    try:
        return np.asanyarray(nib.load(str(path)).dataobj)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise OSError(f"cannot decode {path}: {exc}") from exc


def load_volume(path, label_paths: dict | None = None, sidecar=None) -> CineVolume:
    """Load one subject.

    ``path`` is either a subject directory in the layout described in the module
    docstring or a 4D image file. ``label_paths`` maps a time index to a 3D label
    file stored as (row, col, slice); it overrides any 4D label file.
    """
    path = Path(path)
    if path.is_dir():
        image_path = path / "image.nii.gz"
        label4d_path = path / "label.nii.gz"
        sidecar = Path(sidecar) if sidecar else path / "meta.json"
    else:
        image_path = path
        label4d_path = None
        sidecar = Path(sidecar) if sidecar else None
    if not image_path.exists():
        raise FileNotFoundError(f"image file not found: {image_path}")

    raw = _read_nifti(image_path)
    if raw.ndim != 4:
        raise ShapeError(f"{image_path}: expected a 4D image, got {raw.ndim}D")
    image = np.transpose(raw, (2, 3, 0, 1))

    meta = {}
    if sidecar is not None and sidecar.exists():
        meta = json.loads(sidecar.read_text())
    subject_id = meta.get("subject_id", path.name if path.is_dir() else path.name.split(".")[0])
    phases = {int(t): p for t, p in meta.get("phases", {}).items()}

    masks = {}
    if label_paths:
        for t, lp in label_paths.items():
            lab = _read_nifti(lp)
            if lab.ndim != 3:
                raise ShapeError(f"{lp}: expected a 3D label file, got {lab.ndim}D")
            masks[int(t)] = np.transpose(lab, (2, 0, 1)).astype(np.int64)
    elif label4d_path is not None and label4d_path.exists():
        lab = _read_nifti(label4d_path)
        if lab.ndim != 4:
            raise ShapeError(f"{label4d_path}: expected a 4D label file, got {lab.ndim}D")
        lab = np.transpose(lab, (2, 3, 0, 1))
        if lab.shape[1] != image.shape[1]:
            raise ShapeError(f"{label4d_path}: label time axis {lab.shape[1]} != image time axis {image.shape[1]}")
        for t in phases:
            masks[t] = lab[:, t].astype(np.int64)
    if masks and not phases:
        raise ValidationError(f"{subject_id}: labels given without ED/ES tags in the sidecar")

    return CineVolume(
        subject_id=subject_id,
        image=image,
        masks=masks,
        phase_of={t: phases[t] for t in masks},
        vendor=meta.get("vendor", "A"),
        pixel_spacing=tuple(meta.get("pixel_spacing", (1.0, 1.0, 1.0))),
    )


def save_volume(volume: CineVolume, directory) -> Path:
    """Write ``volume`` in the subject-directory layout that :func:`load_volume` reads."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    affine = np.diag(list(volume.pixel_spacing) + [1.0])
    img = np.transpose(volume.image, (2, 3, 0, 1)).astype(np.float32)
    nib.save(nib.Nifti1Image(img, affine), str(directory / "image.nii.gz"))
    if volume.masks:
        lab = np.zeros(volume.image.shape, dtype=np.uint8)
        for t, m in volume.masks.items():
            lab[:, t] = m
        nib.save(nib.Nifti1Image(np.transpose(lab, (2, 3, 0, 1)), affine), str(directory / "label.nii.gz"))
    meta = {
        "subject_id": volume.subject_id,
        "vendor": volume.vendor,
        "phases": {str(t): p for t, p in sorted(volume.phase_of.items())},
        "pixel_spacing": list(volume.pixel_spacing),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return directory


def load_dataset(root, subject_ids=None) -> list[CineVolume]:
    """Load every subject directory under ``root`` (sorted by name)."""
    root = Path(root if root is not None else os.environ.get("CINESSP_DATA", "."))
    if subject_ids is None:
        dirs = sorted(p for p in root.iterdir() if (p / "image.nii.gz").exists())
    else:
        dirs = [root / s for s in subject_ids]
    return [load_volume(d) for d in dirs]


# ---------------------------------------------------------------------- slicing


def relative_position(slice_index: int, n_slices: int) -> float:
    if n_slices <= 1:
        return 0.5
    return slice_index / (n_slices - 1)


def extract_slices(volume: CineVolume, labeled_only: bool = False, phases=None) -> list[SliceSample]:
    """Cut a volume into 2D samples, ordered by time then slice.

    ``phases`` optionally restricts labeled samples to a subset of {"ED", "ES"}.
    """
    S, T = volume.n_slices, volume.n_frames
    if labeled_only:
        frames = sorted(volume.masks)
        if phases is not None:
            frames = [t for t in frames if volume.phase_of[t] in phases]
    else:
        frames = range(T)
    out = []
    for t in frames:
        mask = volume.masks.get(t)
        for s in range(S):
            out.append(
                SliceSample(
                    subject_id=volume.subject_id,
                    slice_index=s,
                    time_index=t,
                    image2d=volume.image[s, t],
                    relative_position=relative_position(s, S),
                    vendor=volume.vendor,
                    mask2d=None if mask is None else mask[s],
                    phase=volume.phase_of.get(t),
                )
            )
    return out


# ----------------------------------------------------------------------- splits


def _largest_remainder(counts: dict, total: int) -> dict:
    n = sum(counts.values())
    quotas = {k: total * c / n for k, c in counts.items()}
    alloc = {k: int(np.floor(q)) for k, q in quotas.items()}
    short = total - sum(alloc.values())
    # ties broken by stratum name so allocation is order independent
    order = sorted(counts, key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in order[:short]:
        alloc[k] += 1
    return alloc


def make_split(subject_ids, strata: dict, sizes, seed: int) -> SplitManifest:
    """Vendor-stratified test selection, then a random train/val division of the rest."""
    subject_ids = list(subject_ids)
    n_train, n_val, n_test = (int(s) for s in sizes)
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test != len(subject_ids):
        raise ValidationError(f"split sizes {tuple(sizes)} do not sum to the cohort size {len(subject_ids)}")
    if len(set(subject_ids)) != len(subject_ids):
        raise ValidationError("duplicate subject ids in cohort")
    rng = np.random.default_rng(seed)

    groups: dict[str, list[str]] = {}
    for sid in subject_ids:
        groups.setdefault(strata[sid], []).append(sid)
    alloc = _largest_remainder({k: len(v) for k, v in groups.items()}, n_test)

    test = []
    for stratum in sorted(groups):
        members = groups[stratum]
        picked = rng.permutation(len(members))[: alloc[stratum]]
        test.extend(members[i] for i in sorted(picked))
    chosen = set(test)
    rest = [s for s in subject_ids if s not in chosen]
    perm = rng.permutation(len(rest))
    train = [rest[i] for i in perm[:n_train]]
    val = [rest[i] for i in perm[n_train:]]
    return SplitManifest(train=train, val=val, test=test, seed=seed)


def sample_subset(train_subjects, n: int, seed: int) -> list[str]:
    train_subjects = list(train_subjects)
    if n > len(train_subjects) or n < 1:
        raise ValidationError(f"cannot sample {n} subjects from a pool of {len(train_subjects)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(train_subjects), size=n, replace=False)
    return [train_subjects[i] for i in idx]
