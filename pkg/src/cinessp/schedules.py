"""Learning-rate and momentum schedules (per-epoch granularity)."""

import math

from .errors import ValidationError


def cosine_lr(base_lr: float, epoch: int, total_epochs: int, final_lr: float = 0.0) -> float:
    t = min(max(epoch, 0), total_epochs) / total_epochs
    return final_lr + 0.5 * (base_lr - final_lr) * (1 + math.cos(math.pi * t))


def polynomial_lr(base_lr: float, epoch: int, total_epochs: int, exponent: float = 0.9) -> float:
    t = min(max(epoch, 0), total_epochs) / total_epochs
    return base_lr * (1 - t) ** exponent


def ema_momentum(base: float, step: int, total_steps: int, final: float = 1.0) -> float:
    """Cosine ramp of the teacher momentum from ``base`` to ``final``."""
    if total_steps <= 1:
        return base
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return final - (final - base) * (math.cos(math.pi * t) + 1) / 2


SCHEDULERS = {"cosine": cosine_lr, "polynomial": polynomial_lr}


def lr_at(scheduler: str, base_lr: float, epoch: int, total_epochs: int) -> float:
    try:
        fn = SCHEDULERS[scheduler]
    except KeyError:
        raise ValidationError(f"unknown scheduler {scheduler!r}") from None
    return fn(base_lr, epoch, total_epochs)
