"""Access to the shipped hyperparameter presets (``presets.yaml``)."""

from __future__ import annotations

import copy
from functools import lru_cache
from importlib import resources

import yaml

from .errors import ValidationError

TABLE_KEYS = ("epochs", "lr", "scheduler", "optimizer", "nesterov", "momentum",
              "weight_decay", "batch_size", "mixed_precision")
PRESET_NAMES = ("baseline", "simclr", "pcl", "dino", "mim", "finetune")


@lru_cache(maxsize=1)
def _load() -> dict:
    text = resources.files("cinessp").joinpath("presets.yaml").read_text()
    return yaml.safe_load(text)


def load_presets() -> dict:
    return copy.deepcopy(_load())


def preset(name: str) -> dict:
    presets = _load()
    if name not in presets:
        raise ValidationError(f"unknown preset {name!r}; available: {sorted(presets)}")
    return copy.deepcopy(presets[name])


def preset_table(name: str) -> dict:
    return preset(name)["table"]
