"""Helpers shared by the pretraining and supervised loops."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .errors import DivergenceError

logger = logging.getLogger(__name__)


def make_sgd(params, lr, momentum, nesterov, weight_decay):
    params = [p for p in params if p.requires_grad]
    return torch.optim.SGD(params, lr=lr, momentum=momentum, nesterov=nesterov, weight_decay=weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def epoch_batches(n_items: int, batch_size: int, seed: int, epoch: int, max_steps: int | None = None,
                  min_batch: int = 1):
    """Shuffled index batches for one epoch; the trailing partial batch is dropped
    when at least one full batch exists. ``max_steps`` caps (or, by cycling, extends)
    the number of batches so small subsets keep a fixed step count."""
    rng = np.random.default_rng([seed, epoch, 7919])
    bs = min(batch_size, n_items)
    if bs < min_batch:
        return []
    batches = []
    while True:
        order = rng.permutation(n_items)
        full = len(order) // bs
        batches.extend(order[i * bs:(i + 1) * bs] for i in range(full))
        if max_steps is None or len(batches) >= max_steps:
            break
    return batches if max_steps is None else batches[:max_steps]


def check_finite(loss, epoch, step):
    value = float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss ({value}) at epoch {epoch}, step {step}", epoch=epoch, step=step)
    return value


def autocast_context(enabled: bool, device: str):
    if enabled and device.startswith("cuda") and torch.cuda.is_available():
        return torch.autocast("cuda", dtype=torch.float16)
    if enabled:
        logger.info("mixed precision requested but only used on CUDA; running in float32")
    return contextlib.nullcontext()


def write_loss_csv(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    with path.open("w", newline="") as fh:
        fields = list(dict.fromkeys(k for r in rows for k in r))
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path
