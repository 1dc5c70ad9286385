"""NT-Xent (SimCLR) and positional contrastive (PCL) losses.

Embeddings use block layout: rows ``0..N-1`` are the first view of each
source image and rows ``N..2N-1`` the second view, so the positive partner of
row ``i`` is ``(i + N) mod 2N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ValidationError


@dataclass
class ContrastiveBatch:
    embeddings: torch.Tensor
    positions: torch.Tensor | None = None
    source_ids: list | None = None

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] % 2:
            raise ValidationError(f"embeddings must be a (2N, D) matrix, got {tuple(self.embeddings.shape)}")

    @property
    def n_sources(self) -> int:
        return self.embeddings.shape[0] // 2


def _embeddings(batch) -> torch.Tensor:
    emb = batch.embeddings if isinstance(batch, ContrastiveBatch) else batch
    if emb.ndim != 2 or emb.shape[0] % 2:
        raise ValidationError(f"embeddings must be a (2N, D) matrix, got {tuple(emb.shape)}")
    return emb


def _logits(emb: torch.Tensor, temperature: float) -> torch.Tensor:
    z = F.normalize(emb, dim=1)
    sim = z @ z.T / temperature
    eye = torch.eye(sim.shape[0], dtype=torch.bool, device=sim.device)
    return sim.masked_fill(eye, float("-inf"))


def nt_xent_loss(batch, temperature: float = 0.1) -> torch.Tensor:
    emb = _embeddings(batch)
    two_n = emb.shape[0]
    n = two_n // 2
    if n < 2:
        raise ValidationError("NT-Xent needs at least 2 source images (no negatives otherwise)")
    logits = _logits(emb, temperature)
    pos = (torch.arange(two_n, device=emb.device) + n) % two_n
    log_prob = logits[torch.arange(two_n), pos] - torch.logsumexp(logits, dim=1)
    return -log_prob.mean()


def pcl_pair_mask(positions, threshold: float) -> torch.Tensor:
    """(2N, 2N) positive-pair matrix; each view inherits its source's relative position."""
    pos = torch.as_tensor(np.asarray(positions, dtype=np.float64))
    both = torch.cat([pos, pos])
    mask = (both[:, None] - both[None, :]).abs() < threshold
    mask.fill_diagonal_(False)
    return mask


def pcl_loss(batch, positions=None, threshold: float = 0.1, temperature: float = 0.1) -> torch.Tensor:
    """Multi-positive contrastive loss; anchors without any positive are skipped."""
    emb = _embeddings(batch)
    if positions is None:
        positions = batch.positions
    if isinstance(positions, torch.Tensor):
        positions = positions.detach().cpu().numpy()
    if len(positions) * 2 != emb.shape[0]:
        raise ValidationError(f"{len(positions)} positions for {emb.shape[0]} embedding rows")
    positive = pcl_pair_mask(positions, threshold).to(emb.device)
    counts = positive.sum(dim=1)
    anchors = counts > 0
    if not bool(anchors.any()):
        raise ValidationError("no anchor in the batch has a positive pair")
    logits = _logits(emb, temperature)
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    # -inf on the diagonal is never selected by the positive mask
    summed = torch.where(positive, log_prob, torch.zeros_like(log_prob)).sum(dim=1)
    per_anchor = -summed[anchors] / counts[anchors]
    return per_anchor.mean()
