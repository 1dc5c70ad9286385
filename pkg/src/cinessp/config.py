"""Declarative experiment configuration (YAML) resolved against the shipped presets."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ValidationError
from .presets import TABLE_KEYS, preset
from .ssp.pretrain import SSP_METHODS, PretrainConfig
from .supervised import TrainRunConfig

KINDS = ("pretrain", "train", "finetune", "evaluate")
OVERRIDE_KEYS = set(TABLE_KEYS) | {"steps_per_epoch", "device", "val_every", "temperature", "pcl_threshold",
                                   "projection", "dino", "multicrop", "mask"}


@dataclass
class ExperimentConfig:
    kind: str = "train"
    method: str = "scratch"
    preset: str | None = None
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    data: dict = field(default_factory=lambda: {"root": None, "split": None, "split_seed": 0,
                                                "split_fractions": [0.6, 0.2, 0.2]})
    selector: dict = field(default_factory=lambda: {"subjects": None, "phases": "all", "vendors": "all"})
    init: str = "scratch"
    policy: str | None = None
    checkpoint: str | None = None
    strata: str = "none"
    overrides: dict = field(default_factory=dict)
    unet: dict = field(default_factory=dict)
    augmentation: dict = field(default_factory=dict)
    output_dir: str = "runs"
    name: str | None = None

    def __post_init__(self):
        defaults = ExperimentConfig.__dataclass_fields__
        self.data = {**defaults["data"].default_factory(), **(self.data or {})}
        self.selector = {**defaults["selector"].default_factory(), **(self.selector or {})}
        self.seeds = [int(s) for s in self.seeds]
        if self.preset is None:
            self.preset = self.default_preset()
        self.validate()

    def default_preset(self) -> str | None:
        if self.kind == "pretrain":
            return self.method
        if self.kind == "train":
            return "baseline"
        if self.kind == "finetune":
            return "baseline" if self.init == "scratch" else "finetune"
        return None

    def validate(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ValidationError("seeds must be non-empty")
        conflicts = []
        if self.kind == "pretrain":
            if self.method not in SSP_METHODS:
                conflicts.append("method")
            if self.preset != self.method:
                conflicts.append("preset")
        elif self.kind in ("train", "finetune"):
            if self.preset not in ("baseline", "finetune"):
                conflicts.append("preset")
            if self.preset == "finetune" and self.init == "scratch":
                conflicts += ["preset", "init"]
            if self.kind == "train" and self.init != "scratch":
                conflicts += ["kind", "init"]
        elif self.kind == "evaluate" and not self.checkpoint:
            conflicts.append("checkpoint")
        unknown = sorted(set(self.overrides) - OVERRIDE_KEYS)
        conflicts += [f"overrides.{k}" for k in unknown]
        if conflicts:
            raise ValidationError(f"conflicting or invalid config keys: {', '.join(dict.fromkeys(conflicts))}")

    # ------------------------------------------------------------ resolution

    def hyperparameters(self) -> dict:
        if self.preset is None:
            return {}
        p = preset(self.preset)
        table = p.pop("table")
        table.update(p)
        for k, v in copy.deepcopy(self.overrides).items():
            if isinstance(v, dict) and isinstance(table.get(k), dict):
                table[k] = {**table[k], **v}
            else:
                table[k] = v
        return table

    def pretrain_config(self, seed: int) -> PretrainConfig:
        hp = self.hyperparameters()
        hp.pop("optimizer", None)
        return PretrainConfig(method=self.method, seed=seed, unet=dict(self.unet),
                              augmentation=dict(self.augmentation), **hp)

    def train_config(self, seed: int) -> TrainRunConfig:
        hp = {k: v for k, v in self.hyperparameters().items() if k in TrainRunConfig.__dataclass_fields__}
        return TrainRunConfig(seed=seed, unet=dict(self.unet), augmentation=dict(self.augmentation),
                              init=self.init, policy=self.policy, subjects=self.selector.get("subjects"),
                              phases=self.selector.get("phases", "all"), vendors=self.selector.get("vendors", "all"),
                              **hp)

    # ----------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()
