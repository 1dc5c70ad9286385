"""Self-distillation with a gradient-free EMA teacher."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError


class DINONetwork(nn.Module):
    """Backbone embedding followed by the DINO head: crops -> head logits."""

    def __init__(self, unet):
        super().__init__()
        if unet.dino_head is None:
            raise ValidationError("attach a DINO head before building the DINO network")
        self.unet = unet

    def forward(self, x):
        return self.unet.dino_head(self.unet.embed(x))


@dataclass
class TeacherState:
    network: nn.Module
    center: torch.Tensor
    momentum: float = 0.996

    def __post_init__(self):
        for p in self.network.parameters():
            p.requires_grad_(False)


def make_teacher(student: nn.Module, out_dim: int, momentum: float = 0.996) -> TeacherState:
    teacher = copy.deepcopy(student)
    dtype = next(student.parameters()).dtype
    return TeacherState(network=teacher, center=torch.zeros(1, out_dim, dtype=dtype), momentum=momentum)


def dino_loss(student_out: list, teacher_out: list, center: torch.Tensor,
              student_temp: float = 0.1, teacher_temp: float = 0.04) -> torch.Tensor:
    """Mean cross-entropy over (teacher view, student view) pairs with distinct views.

    ``teacher_out[i]`` and ``student_out[i]`` for ``i < len(teacher_out)`` come
    from the same global crop and are not paired with each other.
    """
    targets = [F.softmax((t - center) / teacher_temp, dim=-1).detach() for t in teacher_out]
    total = 0.0
    n_terms = 0
    for iq, q in enumerate(targets):
        for v, s in enumerate(student_out):
            if v == iq:
                continue
            total = total + torch.sum(-q * F.log_softmax(s / student_temp, dim=-1), dim=-1).mean()
            n_terms += 1
    if n_terms == 0:
        raise ValidationError("DINO loss needs at least one cross-view pair")
    return total / n_terms


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float):
    student_params = dict(student.named_parameters())
    for name, tp in teacher.named_parameters():
        tp.mul_(momentum).add_(student_params[name].detach(), alpha=1 - momentum)


def _forward_crops(network: nn.Module, crops: list) -> list:
    """Run crops through ``network`` grouped by resolution, keeping crop order."""
    out = [None] * len(crops)
    by_shape: dict[tuple, list[int]] = {}
    for i, c in enumerate(crops):
        by_shape.setdefault(tuple(c.shape[1:]), []).append(i)
    for idx in by_shape.values():
        res = network(torch.cat([crops[i] for i in idx]))
        for i, chunk in zip(idx, res.chunk(len(idx))):
            out[i] = chunk
    return out


def dino_step(student: nn.Module, teacher_state: TeacherState, globals_: list, locals_: list,
              optimizer: torch.optim.Optimizer, student_temp: float = 0.1, teacher_temp: float = 0.04,
              ema_m: float | None = None, center_m: float = 0.9):
    """One optimisation step: student update, then teacher EMA and centre update.

    ``globals_`` / ``locals_`` are lists of batched crops, one tensor per crop index.
    """
    if len(globals_) < 2:
        raise ValidationError(f"DINO needs at least 2 global crops, got {len(globals_)}")
    m = teacher_state.momentum if ema_m is None else ema_m
    with torch.no_grad():
        teacher_out = _forward_crops(teacher_state.network, list(globals_))
    student_out = _forward_crops(student, list(globals_) + list(locals_))
    loss = dino_loss(student_out, teacher_out, teacher_state.center, student_temp, teacher_temp)
    if torch.isfinite(loss):
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        ema_update(teacher_state.network, student, m)
        with torch.no_grad():
            batch_center = torch.cat(teacher_out).mean(dim=0, keepdim=True)
            teacher_state.center = teacher_state.center * center_m + batch_center * (1 - center_m)
    teacher_state.momentum = m
    return loss.detach(), teacher_state
