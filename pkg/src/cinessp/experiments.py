"""Experiment orchestration: single runs with manifests, and protocol grids."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._training import write_loss_csv
from .config import ExperimentConfig
from .data import CineVolume, SplitManifest, _largest_remainder, extract_slices, load_dataset, make_split
from .errors import ValidationError
from .evaluation import (DSCReport, augmentation_table, evaluate, per_class_table, phase_table,
                         subset_table, vendor_table)
from .ssp.pretrain import SSP_METHODS, pretrain
from .supervised import labeled_slices, select_volumes, train
from .unet import Checkpoint

logger = logging.getLogger(__name__)

DATA_ENV = "CINESSP_DATA"
TRANSFER_POLICY = {"simclr": "encoder_only", "pcl": "encoder_only", "dino": "encoder_only",
                   "mim": "encoder_decoder_no_output"}
EXPERIMENTS = ("subsets", "phase", "vendor", "augmentation")


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Dataset:
    volumes: dict[str, CineVolume]
    split: SplitManifest
    root: str | None = None
    input_hashes: dict[str, str] = field(default_factory=dict)

    def subjects(self, names) -> list[CineVolume]:
        return [self.volumes[s] for s in names]

    @property
    def train(self):
        return self.subjects(self.split.train)

    @property
    def val(self):
        return self.subjects(self.split.val)

    @property
    def test(self):
        return self.subjects(self.split.test)


def default_split(volumes: list[CineVolume], fractions, seed: int) -> SplitManifest:
    ids = [v.subject_id for v in volumes]
    sizes = _largest_remainder({"train": fractions[0], "val": fractions[1], "test": fractions[2]}, len(ids))
    return make_split(ids, {v.subject_id: v.vendor for v in volumes},
                      (sizes["train"], sizes["val"], sizes["test"]), seed)


def load_data(config: ExperimentConfig) -> Dataset:
    root = config.data.get("root") or os.environ.get(DATA_ENV)
    if not root:
        raise ValidationError(f"no data root: set data.root in the config or the {DATA_ENV} environment variable")
    root = Path(root)
    volumes = load_dataset(root)
    if not volumes:
        raise ValidationError(f"no subjects found under {root}")
    hashes = {}
    for v in volumes:
        for f in sorted((root / v.subject_id).glob("*")):
            hashes[str(f.relative_to(root))] = git_blob_hash(f)
    split_path = config.data.get("split")
    if split_path:
        split = SplitManifest.load(split_path)
        hashes[str(split_path)] = git_blob_hash(split_path)
    else:
        split = default_split(volumes, config.data["split_fractions"], config.data["split_seed"])
    return Dataset({v.subject_id: v for v in volumes}, split, str(root), hashes)


def dataset_from_volumes(volumes: list[CineVolume], split: SplitManifest | None = None,
                         fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Dataset:
    """In-memory dataset (e.g. straight from the phantom generator)."""
    split = split or default_split(volumes, fractions, seed)
    return Dataset({v.subject_id: v for v in volumes}, split)


# ---------------------------------------------------------------------- manifests


def _artifact(out_dir: Path, path: Path) -> dict:
    return {"path": str(path.relative_to(out_dir)), "sha256": sha256_file(path)}


def write_manifest(out_dir: Path, manifest: dict) -> Path:
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def verify_manifest(path) -> list[str]:
    """Problems found (missing or altered artifacts); empty when the manifest checks out."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    problems = []
    for name, art in manifest.get("artifacts", {}).items():
        f = path.parent / art["path"]
        if not f.exists():
            problems.append(f"{name}: missing {f}")
        elif sha256_file(f) != art["sha256"]:
            problems.append(f"{name}: hash mismatch for {f}")
    return problems


def run_dir(config: ExperimentConfig) -> Path:
    name = config.name or f"{config.kind}-{config.method}-{config.digest()[:10]}"
    return Path(config.output_dir) / name


def run_experiment(config: ExperimentConfig, dataset: Dataset | None = None,
                   init_checkpoint: Checkpoint | None = None) -> dict:
    """Execute one configured run for every seed and write ``manifest.json``."""
    dataset = dataset or load_data(config)
    out_dir = run_dir(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.yaml")
    manifest = {
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "inputs": dict(dataset.input_hashes),
        "split": dataset.split.to_dict(),
        "artifacts": {"config": _artifact(out_dir, out_dir / "config.yaml")},
        "results": {},
    }

    if config.kind == "pretrain":
        slices = [s for v in dataset.train for s in extract_slices(v, labeled_only=False)]
        for seed in config.seeds:
            ckpt, history = pretrain(config.method, slices, config.pretrain_config(seed))
            ck = ckpt.save(out_dir / f"pretrain_seed{seed}.pt")
            log = write_loss_csv(out_dir / f"loss_seed{seed}.csv", history)
            manifest["artifacts"][f"checkpoint_seed{seed}"] = _artifact(out_dir, ck)
            manifest["artifacts"][f"loss_seed{seed}"] = _artifact(out_dir, log)
            manifest["results"][str(seed)] = {"final_loss": history[-1]["loss"], "n_slices": len(slices)}

    elif config.kind in ("train", "finetune"):
        if init_checkpoint is None and config.init != "scratch":
            init_checkpoint = Checkpoint.load(config.init)
        for seed in config.seeds:
            cfg = config.train_config(seed)
            result = train(cfg, dataset.train, dataset.val, init_checkpoint=init_checkpoint)
            ck = result.final.save(out_dir / f"final_seed{seed}.pt")
            manifest["artifacts"][f"final_seed{seed}"] = _artifact(out_dir, ck)
            if result.best is not None:
                best = result.best.save(out_dir / f"best_seed{seed}.pt")
                manifest["artifacts"][f"best_seed{seed}"] = _artifact(out_dir, best)
            log = write_loss_csv(out_dir / f"history_seed{seed}.csv", result.history)
            manifest["artifacts"][f"history_seed{seed}"] = _artifact(out_dir, log)
            entry = {"subjects": result.subjects,
                     "n_slices": len(labeled_slices(select_volumes(dataset.train, cfg), cfg.phases))}
            if dataset.split.test:
                report = evaluate(result.final.build_model(), dataset.test, input_size=cfg.augmentation.target_size)
                rp = out_dir / f"report_seed{seed}.csv"
                report.to_csv(rp)
                manifest["artifacts"][f"report_seed{seed}"] = _artifact(out_dir, rp)
                entry["dsc"] = report.strata_means(config.strata)
            if result.transfer is not None:
                entry["transfer"] = {k: result.transfer[k] for k in ("policy", "n_transferred", "n_initialized")}
            manifest["results"][str(seed)] = entry

    else:
        ckpt = Checkpoint.load(config.checkpoint)
        model = ckpt.build_model()
        volumes = list(dataset.volumes.values()) if config.data.get("evaluate_on") == "all" else dataset.test
        size = config.augmentation.get("target_size")
        report = evaluate(model, volumes, input_size=tuple(size) if size else None)
        rp = out_dir / "report.csv"
        report.to_csv(rp)
        manifest["artifacts"]["report"] = _artifact(out_dir, rp)
        manifest["results"]["dsc"] = report.strata_means(config.strata)
        manifest["results"]["per_class"] = {str(k): v for k, v in report.per_class().items()}

    write_manifest(out_dir, manifest)
    manifest["path"] = str(out_dir / "manifest.json")
    return manifest


def rerun(manifest_path, output_dir, dataset: Dataset | None = None) -> dict:
    """Re-execute the run described by a manifest into ``output_dir``."""
    manifest = json.loads(Path(manifest_path).read_text())
    config = ExperimentConfig.from_dict(manifest["config"])
    config = replace(config, output_dir=str(output_dir))
    return run_experiment(config, dataset)


# ----------------------------------------------------------------------------- grid


@dataclass
class GridResult:
    manifests: list[dict]  # one per (cell, seed) run
    tables: dict[str, str]
    pretrain_manifests: list[dict] = field(default_factory=list)


def _cell_config(base: ExperimentConfig, init: str, checkpoint: str | None, seed: int, name: str, **selector):
    kind = "train" if init == "scratch" else "finetune"
    return replace(base, kind=kind, method=init, preset=None, seeds=[seed], name=name,
                   init=checkpoint or "scratch",
                   policy=None if init == "scratch" else TRANSFER_POLICY[init],
                   selector={**base.selector, **selector})


def _run_cell(args):
    config, dataset = args
    return run_experiment(config, dataset)


def _overrides_for(method, pretrain_overrides):
    po = pretrain_overrides or {}
    # keyed by method only when every key names a method; {"dino": {...}} alone reads as keyed
    if po and all(k in SSP_METHODS for k in po):
        return dict(po.get(method, {}))
    return dict(po)


def _pretrain_checkpoints(base: ExperimentConfig, methods, dataset, pretrain_overrides, checkpoints, out_root):
    paths = dict(checkpoints or {})
    manifests = []
    for m in methods:
        if m in paths:
            continue
        cfg = ExperimentConfig(kind="pretrain", method=m, seeds=[base.seeds[0]], data=base.data,
                               overrides=_overrides_for(m, pretrain_overrides),
                               unet=base.unet, augmentation=base.augmentation,
                               output_dir=str(out_root), name=f"pretrain-{m}")
        man = run_experiment(cfg, dataset)
        manifests.append(man)
        paths[m] = str(Path(man["path"]).parent / man["artifacts"][f"checkpoint_seed{base.seeds[0]}"]["path"])
    return paths, manifests


def grid(config: ExperimentConfig, subjects=(None, 50, 25, 15, 10), seeds=(0, 1, 2),
         inits=("scratch", "simclr", "pcl", "dino", "mim"), experiment: str = "subsets",
         dataset: Dataset | None = None, pretrain_overrides: dict | None = None,
         checkpoints: dict | None = None, workers: int = 1) -> GridResult:
    """Run a protocol grid and write its result table(s) as CSV and aligned text.

    ``subjects`` entries are subset sizes (None = all training subjects).
    ``pretrain_overrides`` are applied to the pretraining runs, either flat or
    keyed by method; ``checkpoints`` maps methods to existing pretrained files.
    For the phase and vendor experiments the pretrained arm uses ``config.method``
    when it names a pretraining method, else MIM.
    """
    if experiment not in EXPERIMENTS:
        raise ValidationError(f"experiment must be one of {EXPERIMENTS}")
    dataset = dataset or load_data(config)
    out_root = Path(config.output_dir) / (config.name or f"grid-{experiment}")
    out_root.mkdir(parents=True, exist_ok=True)
    base = replace(config, output_dir=str(out_root), name=None)
    seeds = list(seeds)
    ssp = config.method if config.method in SSP_METHODS else "mim"

    if experiment == "subsets":
        need = [m for m in inits if m != "scratch"]
    elif experiment in ("phase", "vendor"):
        need = [ssp]
    else:
        need = []
    ckpt_paths, pre_manifests = _pretrain_checkpoints(base, need, dataset, pretrain_overrides, checkpoints, out_root)

    jobs = []  # (cell key, config)
    if experiment == "subsets":
        n_all = len(dataset.split.train)
        for n in subjects:
            label = n_all if n is None else int(n)
            for init in inits:
                for seed in seeds:
                    name = f"n{label}-{init}-seed{seed}"
                    jobs.append(((label, init), _cell_config(base, init, ckpt_paths.get(init), seed, name,
                                                             subjects=None if n is None else int(n))))
    elif experiment == "phase":
        for phase in ("ED", "ES"):
            for pre, init in (("None", "scratch"), ("All data", ssp)):
                for seed in seeds:
                    name = f"phase{phase}-{init}-seed{seed}"
                    jobs.append(((pre, phase), _cell_config(base, init, ckpt_paths.get(init), seed, name, phases=phase)))
    elif experiment == "vendor":
        for group in ("AB", "CD"):
            for pre, init in (("None", "scratch"), ("All data", ssp)):
                for seed in seeds:
                    name = f"vendor{group}-{init}-seed{seed}"
                    jobs.append(((pre, group), _cell_config(base, init, None if init == "scratch" else ckpt_paths[init],
                                                            seed, name, vendors=group)))
    else:
        for label, enabled in (("Yes", True), ("No", False)):
            for seed in seeds:
                cfg = _cell_config(base, "scratch", None, seed, f"aug{label}-seed{seed}")
                cfg = replace(cfg, augmentation={**cfg.augmentation, "enabled": enabled})
                jobs.append((label, cfg))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, [(cfg, dataset) for _, cfg in jobs]))
    else:
        results = [run_experiment(cfg, dataset) for _, cfg in jobs]

    cells: dict = {}
    slice_counts: dict = {}
    for (key, _), man in zip(jobs, results):
        out_dir = Path(man["path"]).parent
        for seed, entry in man["results"].items():
            report = DSCReport.from_csv(out_dir / man["artifacts"][f"report_seed{seed}"]["path"])
            cells.setdefault(key, []).append(report)
            if experiment == "subsets":
                slice_counts.setdefault(key[0], {})[seed] = entry["n_slices"]

    tables = {}
    if experiment == "subsets":
        counts = {n: float(np.mean(list(v.values()))) for n, v in slice_counts.items()}
        main = subset_table(cells, counts, methods=tuple(inits))
        largest = max(counts)
        per_class = per_class_table({m: cells[(largest, m)] for m in inits}, methods=tuple(inits))
        written = {"table_subsets": main, "table_per_class": per_class}
    elif experiment == "phase":
        written = {"table_phase": phase_table(cells)}
    elif experiment == "vendor":
        written = {"table_vendor": vendor_table(cells)}
    else:
        written = {"table_augmentation": augmentation_table(cells)}
    for stem, table in written.items():
        table.to_csv(out_root / f"{stem}.csv")
        (out_root / f"{stem}.txt").write_text(table.to_text() + "\n", encoding="utf-8")
        tables[stem] = str(out_root / f"{stem}.csv")
    return GridResult(manifests=results, tables=tables, pretrain_manifests=pre_manifests)
