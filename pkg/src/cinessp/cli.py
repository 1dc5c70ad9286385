"""Command line entry point: ``cinessp <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from ._training import write_loss_csv
from .config import ExperimentConfig
from .data import SplitManifest, extract_slices, load_dataset, make_split, save_volume
from .errors import DivergenceError, ValidationError
from .evaluation import evaluate
from .experiments import DATA_ENV, EXPERIMENTS, grid, load_data, run_experiment
from .phantom import PhantomSpec, generate
from .ssp.pretrain import SSP_METHODS, pretrain
from .unet import POLICIES, Checkpoint

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 2, 3


def _read_mapping(path) -> dict:
    if path is None:
        return {}
    return yaml.safe_load(Path(path).read_text()) or {}


def _base_config(args, **fields) -> ExperimentConfig:
    raw = _read_mapping(getattr(args, "config", None))
    raw.update({k: v for k, v in fields.items() if v is not None})
    if getattr(args, "data", None):
        raw["data"] = {**raw.get("data", {}), "root": args.data}
    if getattr(args, "split", None):
        raw["data"] = {**raw.get("data", {}), "split": args.split}
    return ExperimentConfig.from_dict(raw)


def cmd_synth(args):
    spec = PhantomSpec(**_read_mapping(args.spec)) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    for v in generate(spec):
        save_volume(v, out / v.subject_id)
    (out / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    print(f"wrote {spec.n_subjects} subjects to {out}")


def cmd_split(args):
    volumes = load_dataset(args.data)
    ids = [v.subject_id for v in volumes]
    split = make_split(ids, {v.subject_id: v.vendor for v in volumes}, args.sizes, args.seed)
    split.save(args.out)
    print(json.dumps({k: len(v) for k, v in split.to_dict().items() if k != "seed"}))


def cmd_pretrain(args):
    config = _base_config(args, kind="pretrain", method=args.method, preset=args.method)
    dataset = load_data(config)
    slices = [s for v in dataset.train for s in extract_slices(v)]
    ckpt, history = pretrain(args.method, slices, config.pretrain_config(args.seed))
    out = Path(args.out)
    ckpt.save(out)
    write_loss_csv(out.with_suffix(".csv"), history)
    print(f"saved {out} (final loss {history[-1]['loss']:.5f})")


def _selector(args) -> dict:
    subjects = None if args.subjects in (None, "all") else int(args.subjects)
    return {"subjects": subjects, "phases": args.phase, "vendors": args.vendors}


def cmd_finetune(args):
    raw = _read_mapping(args.config)
    aug = dict(raw.get("augmentation", {}))
    if args.no_augmentation:
        aug["enabled"] = False
    kind = "train" if args.init == "scratch" else "finetune"
    method = args.method or ("scratch" if kind == "train" else Checkpoint.load(args.init).meta.get("method", "mim"))
    config = _base_config(args, kind=kind, method=method,
                          init=args.init, policy=None if kind == "train" else args.policy,
                          seeds=[args.seed], selector=_selector(args), augmentation=aug,
                          output_dir=args.out_dir, name=args.name)
    manifest = run_experiment(config)
    print(json.dumps({"manifest": manifest["path"], "results": manifest["results"]}, indent=2))


def cmd_evaluate(args):
    ckpt = Checkpoint.load(args.checkpoint)
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise ValidationError(f"no data root: pass --data or set {DATA_ENV}")
    volumes = load_dataset(root)
    if args.split:
        test = set(SplitManifest.load(args.split).test)
        volumes = [v for v in volumes if v.subject_id in test]
    size = ckpt.meta.get("train_config", {}).get("augmentation", {}).get("target_size")
    report = evaluate(ckpt.build_model(), volumes, input_size=tuple(size) if size else None)
    report.to_csv(args.out)
    means = report.strata_means(args.strata)
    print(json.dumps({k: None if math.isnan(v) else v for k, v in means.items()}, indent=2))


def cmd_grid(args):
    config = _base_config(args, output_dir=args.out_dir)
    subjects = [None if s == "all" else int(s) for s in args.subjects]
    pre = _read_mapping(args.pretrain_config)
    result = grid(config, subjects=subjects, seeds=args.seeds, inits=args.inits, experiment=args.experiment,
                  pretrain_overrides=pre, workers=args.workers)
    for name, path in result.tables.items():
        print(f"{name}: {path}")
        print(Path(path).with_suffix(".txt").read_text(encoding="utf-8"))


def cmd_inspect(args):
    print(Checkpoint.load(args.checkpoint).summary())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cinessp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic phantom subjects")
    p.add_argument("--spec", help="YAML/JSON phantom spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="vendor-stratified train/val/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--sizes", type=int, nargs=3, required=True, metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--method", choices=SSP_METHODS, required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path; the loss log goes next to it as .csv")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised training from scratch or a checkpoint")
    p.add_argument("--init", default="scratch", help="checkpoint path or 'scratch'")
    p.add_argument("--policy", choices=sorted(POLICIES), default="encoder_only")
    p.add_argument("--method", help="label of the pretraining method (defaults from --init)")
    p.add_argument("--subjects", default="all", help="number of training subjects or 'all'")
    p.add_argument("--phase", choices=("all", "ED", "ES"), default="all")
    p.add_argument("--vendors", choices=("all", "AB", "CD"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augmentation", action="store_true")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--name")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="3D Dice of a checkpoint on labeled volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", help="evaluate only the test subjects of this split")
    p.add_argument("--strata", choices=("none", "phase", "vendor"), default="none")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="run an experiment protocol grid and write result tables")
    p.add_argument("--experiment", choices=EXPERIMENTS, default="subsets")
    p.add_argument("--config")
    p.add_argument("--pretrain-config", help="YAML overrides for pretraining runs")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--subjects", nargs="+", default=["all", "50", "25", "15", "10"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--inits", nargs="+", default=["scratch", "simclr", "pcl", "dino", "mim"],
                   choices=("scratch",) + SSP_METHODS)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", default="runs")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint groups, shapes and metadata")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
