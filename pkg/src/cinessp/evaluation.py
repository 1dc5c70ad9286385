"""3D Dice evaluation, seed aggregation and result-table layouts."""

from __future__ import annotations

import csv
import io
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES, CineVolume
from .errors import ValidationError

logger = logging.getLogger(__name__)

FOREGROUND = (1, 2, 3)
METHOD_LABELS = {"scratch": "Baseline", "simclr": "SimCLR", "pcl": "PCL", "dino": "DINO", "mim": "MIM"}
VENDOR_STRATA = {"AB": ("A", "B"), "CD": ("C", "D")}


def dsc3d(pred, gt, class_id: int) -> float:
    """Dice of one class over a whole 3D volume; 1.0 when the class is absent from both."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


@dataclass
class DSCReport:
    rows: list[dict] = field(default_factory=list)
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if not 0.0 <= r["dsc"] <= 1.0:
                raise ValidationError(f"dsc out of [0, 1]: {r}")

    def filter(self, phase=None, vendors=None) -> "DSCReport":
        rows = [r for r in self.rows
                if (phase is None or r["phase"] == phase) and (vendors is None or r["vendor"] in vendors)]
        return DSCReport(rows, dict(self.tags))

    def per_class(self) -> dict[int, float]:
        out = {}
        for c in sorted({r["class_id"] for r in self.rows}):
            vals = [r["dsc"] for r in self.rows if r["class_id"] == c]
            out[c] = float(np.mean(vals))
        return out

    def per_class_std(self) -> dict[int, float]:
        """Sample standard deviation across rows (subjects and frames) per class."""
        out = {}
        for c in sorted({r["class_id"] for r in self.rows}):
            vals = [r["dsc"] for r in self.rows if r["class_id"] == c]
            out[c] = statistics.stdev(vals) if len(vals) > 1 else float("nan")
        return out

    @property
    def mean_dsc(self) -> float:
        """Mean over classes of the per-class means."""
        pc = self.per_class()
        if not pc:
            return float("nan")
        return float(np.mean(list(pc.values())))

    def strata_means(self, strata: str = "none") -> dict[str, float]:
        out = {"all": self.mean_dsc}
        if strata == "phase":
            for ph in ("ED", "ES"):
                out[ph] = self.filter(phase=ph).mean_dsc
        elif strata == "vendor":
            for name, group in VENDOR_STRATA.items():
                out[name] = self.filter(vendors=group).mean_dsc
        elif strata != "none":
            raise ValidationError(f"unknown strata {strata!r}; choose none, phase or vendor")
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["subject_id", "vendor", "phase", "time_index", "class_id", "class", "dsc"])
        writer.writeheader()
        for r in self.rows:
            writer.writerow({**r, "class": CLASS_NAMES.get(r["class_id"], str(r["class_id"]))})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "DSCReport":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({"subject_id": r["subject_id"], "vendor": r["vendor"], "phase": r["phase"],
                             "time_index": int(r["time_index"]), "class_id": int(r["class_id"]), "dsc": float(r["dsc"])})
        return cls(rows)


def evaluate(model_or_predictions, volumes: list[CineVolume], frames: dict | None = None,
             input_size=None, classes=FOREGROUND) -> DSCReport:
    """One row per (subject, labeled frame, class).

    ``model_or_predictions`` is a U-Net, a callable ``(volume, t) -> labels``, or
    a mapping ``(subject_id, t) -> labels``. ``frames`` optionally maps a
    subject id to the time indices to score; frames without labels are skipped
    with a warning.
    """
    from .supervised import predict_volume
    from .unet import UNet

    if isinstance(model_or_predictions, UNet):
        def predict(v, t):
            return predict_volume(model_or_predictions, v, t, input_size)
    elif callable(model_or_predictions):
        predict = model_or_predictions
    else:
        def predict(v, t):
            return model_or_predictions[(v.subject_id, t)]

    rows = []
    for v in volumes:
        wanted = sorted(v.masks) if frames is None else frames.get(v.subject_id, sorted(v.masks))
        for t in wanted:
            if t not in v.masks:
                logger.warning("%s: no labels for frame %s, skipped", v.subject_id, t)
                continue
            pred = predict(v, t)
            gt = v.masks[t]
            for c in classes:
                rows.append({"subject_id": v.subject_id, "vendor": v.vendor, "phase": v.phase_of[t],
                             "time_index": int(t), "class_id": int(c), "dsc": dsc3d(pred, gt, c)})
    return DSCReport(rows)


# ------------------------------------------------------------------ seeds/tables


@dataclass
class SeedStat:
    mean: float
    std: float
    n: int
    values: list[float]

    def format(self) -> str:
        return format_cell(self.mean, self.std)


def mean_std(values) -> SeedStat:
    vals = [float(v) for v in values]
    if any(math.isnan(v) for v in vals):
        # a stratum missing from some seed's test set
        return SeedStat(mean=float("nan"), std=float("nan"), n=len(vals), values=vals)
    std = statistics.stdev(vals) if len(vals) > 1 else float("nan")
    return SeedStat(mean=float(np.mean(vals)), std=std, n=len(vals), values=vals)


def format_cell(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "n/a"
    s = "nan" if math.isnan(std) else f"{std:.3f}"
    return f"{mean:.2f} ± {s}"


def aggregate_seeds(reports: list[DSCReport], phase=None, vendors=None) -> SeedStat:
    """Mean over seed-level mean DSCs with sample (n-1) standard deviation."""
    if not reports:
        raise ValidationError("no reports to aggregate")
    return mean_std([r.filter(phase, vendors).mean_dsc for r in reports])


@dataclass
class Table:
    header: list[str]
    rows: list[list[str]]
    title: str = ""

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(self.header)
        writer.writerows(self.rows)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_text(self) -> str:
        cols = list(zip(self.header, *self.rows))
        widths = [max(len(str(x)) for x in col) for col in cols]
        lines = []
        if self.title:
            lines.append(self.title)
        for r in [self.header] + self.rows:
            lines.append("  ".join(str(x).ljust(w) if i == 0 else str(x).rjust(w) for i, (x, w) in enumerate(zip(r, widths))))
        return "\n".join(lines)

    @classmethod
    def from_csv(cls, path) -> "Table":
        with open(path, newline="", encoding="utf-8") as fh:
            data = list(csv.reader(fh))
        return cls(header=data[0], rows=data[1:])


def subset_table(cells: dict, slice_counts: dict, methods=("scratch", "simclr", "pcl", "dino", "mim")) -> Table:
    """Rows: number of labeled subjects (mean slices); columns: training method.

    ``cells[(n_subjects, method)]`` is a list of per-seed reports.
    """
    sizes = sorted({n for n, _ in cells}, reverse=True)
    header = ["#subjects (#slices)"] + [METHOD_LABELS[m] for m in methods]
    rows = []
    for n in sizes:
        row = [f"{n} ({int(round(slice_counts[n]))})"]
        for m in methods:
            reps = cells.get((n, m))
            row.append(aggregate_seeds(reps).format() if reps else "")
        rows.append(row)
    return Table(header, rows, "Mean DSC across foreground classes by number of labeled subjects")


def phase_table(cells: dict) -> Table:
    """``cells[(pretraining, phase)]`` with pretraining in {"None", "All data"}, phase in {"ED", "ES"}."""
    header = ["Pretraining", "Fine-tuning", "Both time frames", "ED time frames", "ES time frames"]
    rows = []
    for phase in ("ED", "ES"):
        for pre in ("None", "All data"):
            reps = cells.get((pre, phase))
            if not reps:
                continue
            rows.append([pre, f"{phase} time frames", aggregate_seeds(reps).format(),
                         aggregate_seeds(reps, phase="ED").format(), aggregate_seeds(reps, phase="ES").format()])
    return Table(header, rows, "Generalization to unseen cardiac phases")


def vendor_table(cells: dict) -> Table:
    """``cells[(pretraining, group)]`` with group in {"AB", "CD"}."""
    header = ["Pretraining", "Fine-tuning", "All vendors", "Vendors A+B", "Vendors C+D"]
    rows = []
    for group, label in (("AB", "Vendors A+B"), ("CD", "Vendors C+D")):
        for pre in ("None", "All data"):
            reps = cells.get((pre, group))
            if not reps:
                continue
            rows.append([pre, label, aggregate_seeds(reps).format(),
                         aggregate_seeds(reps, vendors=VENDOR_STRATA["AB"]).format(),
                         aggregate_seeds(reps, vendors=VENDOR_STRATA["CD"]).format()])
    return Table(header, rows, "Generalization to unseen vendors")


def augmentation_table(cells: dict) -> Table:
    """``cells["Yes" | "No"]``: baseline reports trained with / without augmentation."""
    header = ["Data augmentation", "ED time frames", "ES time frames", "Vendors A+B", "Vendors C+D"]
    rows = []
    for label in ("Yes", "No"):
        reps = cells.get(label)
        if not reps:
            continue
        rows.append([label, aggregate_seeds(reps, phase="ED").format(), aggregate_seeds(reps, phase="ES").format(),
                     aggregate_seeds(reps, vendors=VENDOR_STRATA["AB"]).format(),
                     aggregate_seeds(reps, vendors=VENDOR_STRATA["CD"]).format()])
    return Table(header, rows, "Baseline with and without data augmentation")


def per_class_table(cells: dict, methods=("scratch", "simclr", "pcl", "dino", "mim")) -> Table:
    """Per-class mean DSC ± mean (over seeds) of the across-subject sample std."""
    header = ["Class"] + [METHOD_LABELS[m] for m in methods]
    rows = []
    for c in FOREGROUND:
        row = [CLASS_NAMES[c]]
        for m in methods:
            reps = cells.get(m)
            if not reps:
                row.append("")
                continue
            means = [r.per_class()[c] for r in reps]
            stds = [r.per_class_std()[c] for r in reps]
            row.append(format_cell(float(np.mean(means)), float(np.mean(stds))))
        rows.append(row)
    return Table(header, rows, "Mean DSC per foreground class")
