"""Supervised segmentation training (from scratch or fine-tuning) and slice-wise prediction."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import _training
from .augmentation import AugmentationConfig, augment, worker_rng
from .data import CineVolume, extract_slices, sample_subset
from .errors import ValidationError
from .presets import preset_table
from .schedules import lr_at
from .unet import Checkpoint, UNet, UNetConfig, build_unet, transfer_weights

logger = logging.getLogger(__name__)

VENDOR_GROUPS = {"all": None, "AB": ("A", "B"), "CD": ("C", "D")}
PHASE_CHOICES = {"all": None, "ED": ("ED",), "ES": ("ES",)}


@dataclass
class TrainRunConfig:
    epochs: int = 1000
    lr: float = 0.01
    scheduler: str = "polynomial"
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    batch_size: int = 32
    mixed_precision: bool = False
    steps_per_epoch: int = 250
    seed: int = 0
    device: str = "cpu"
    unet: UNetConfig = field(default_factory=UNetConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    init: str = "scratch"  # "scratch" or a checkpoint path
    policy: str | None = None
    subjects: int | None = None  # None = all selected subjects
    phases: str = "all"
    vendors: str = "all"
    val_every: int = 0  # epochs between validation passes; 0 = only at the end

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.phases not in PHASE_CHOICES:
            raise ValidationError(f"phases must be one of {sorted(PHASE_CHOICES)}")
        if self.vendors not in VENDOR_GROUPS:
            raise ValidationError(f"vendors must be one of {sorted(VENDOR_GROUPS)}")
        if self.init != "scratch" and self.policy is None:
            self.policy = "encoder_only"

    @classmethod
    def from_preset(cls, name: str = "baseline", **overrides) -> "TrainRunConfig":
        table = {k: v for k, v in preset_table(name).items() if k != "optimizer"}
        table.update(overrides)
        return cls(**table)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet"] = self.unet.to_dict()
        d["augmentation"] = self.augmentation.to_dict()
        return d


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint | None
    history: list[dict]
    subjects: list[str]
    transfer: dict | None = None


# ------------------------------------------------------------------------- loss


def deep_supervision_weights(n: int) -> torch.Tensor:
    w = torch.tensor([0.5**s for s in range(n)], dtype=torch.float64)
    return w / w.sum()


def soft_dice_loss(logits, target, smooth=1.0, include_background=False):
    """1 - mean over classes of batch soft Dice."""
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, logits.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    start = 0 if include_background else 1
    probs, onehot = probs[:, start:], onehot[:, start:]
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    return 1 - dice.mean()


def segmentation_loss(logits_pyramid, mask, ds_weights=None, smooth=1.0) -> torch.Tensor:
    """Weighted sum over supervision scales of cross-entropy plus soft Dice."""
    if isinstance(logits_pyramid, torch.Tensor):
        logits_pyramid = [logits_pyramid]
    mask = torch.as_tensor(mask)
    if mask.ndim == 2:
        mask = mask[None]
    mask = mask.long()
    n_classes = logits_pyramid[0].shape[1]
    if mask.numel() and (int(mask.min()) < 0 or int(mask.max()) >= n_classes):
        raise ValidationError(f"mask contains labels outside 0..{n_classes - 1}")
    weights = deep_supervision_weights(len(logits_pyramid)) if ds_weights is None else torch.as_tensor(ds_weights, dtype=torch.float64)
    weights = weights / weights.sum()
    total = 0.0
    for w, logits in zip(weights, logits_pyramid):
        if logits.shape[-2:] != mask.shape[-2:]:
            target = F.interpolate(mask[:, None].float(), size=logits.shape[-2:], mode="nearest")[:, 0].long()
        else:
            target = mask
        ce = F.cross_entropy(logits, target)
        total = total + float(w) * (ce + soft_dice_loss(logits, target, smooth))
    return total


# --------------------------------------------------------------------- data prep


def select_volumes(volumes: list[CineVolume], config: TrainRunConfig) -> list[CineVolume]:
    group = VENDOR_GROUPS[config.vendors]
    pool = [v for v in volumes if group is None or v.vendor in group]
    if config.subjects is not None:
        chosen = set(sample_subset([v.subject_id for v in pool], config.subjects, config.seed))
        pool = [v for v in pool if v.subject_id in chosen]
    return pool


def labeled_slices(volumes, phases: str = "all"):
    return [s for v in volumes for s in extract_slices(v, labeled_only=True, phases=PHASE_CHOICES[phases])]


def _batch(slices, idx, aug: AugmentationConfig, rng, device):
    images, masks = [], []
    for i in idx:
        img, m = augment(slices[i].image2d, slices[i].mask2d, aug, rng)
        images.append(img)
        masks.append(m)
    x = torch.from_numpy(np.stack(images)[:, None]).to(device)
    y = torch.from_numpy(np.stack(masks).astype(np.int64)).to(device)
    return x, y


# ----------------------------------------------------------------------- predict


@torch.no_grad()
def predict_logits(model: UNet, volume: CineVolume, time_index: int, input_size=None) -> torch.Tensor:
    """(S, C, rows, cols) logits at native resolution."""
    if time_index not in range(volume.n_frames):
        raise ValidationError(f"{volume.subject_id} has no frame {time_index}")
    native = volume.image.shape[-2:]
    input_size = tuple(input_size or native)
    aug = AugmentationConfig(enabled=False, target_size=input_size)
    x = np.stack([augment(volume.image[s, time_index], None, aug)[0] for s in range(volume.n_slices)])
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    logits = model.segment(torch.from_numpy(x[:, None]).to(device)).float()
    model.train(was_training)
    if tuple(logits.shape[-2:]) != tuple(native):
        logits = F.interpolate(logits, size=native, mode="bilinear", align_corners=False)
    return logits.cpu()


def predict_volume(model: UNet, volume: CineVolume, time_index: int, input_size=None) -> np.ndarray:
    """Slice-wise argmax restacked to (slice, row, col)."""
    return predict_logits(model, volume, time_index, input_size).argmax(dim=1).numpy().astype(np.int64)


# ------------------------------------------------------------------------- train


def _mean_dsc(model, volumes, input_size):
    from .evaluation import evaluate

    if not volumes:
        return float("nan")
    return evaluate(model, volumes, input_size=input_size).mean_dsc


def train(config: TrainRunConfig, volumes: list[CineVolume], val_volumes: list[CineVolume] | None = None,
          init_checkpoint: Checkpoint | None = None, progress=None) -> TrainResult:
    """Train the segmentation U-Net; deterministic for a fixed (config, seed).

    When fine-tuning, pass the pretrained :class:`Checkpoint` as
    ``init_checkpoint`` (or a path in ``config.init``). Every epoch runs
    ``config.steps_per_epoch`` batches regardless of how many slices the subset has.
    """
    selected = select_volumes(volumes, config)
    slices = labeled_slices(selected, config.phases)
    if not slices:
        raise ValidationError("data selection is empty: no labeled slices match the configured subjects/phase/vendor")

    device = config.device
    model = build_unet(config.unet, seed=config.seed)
    transfer = None
    if init_checkpoint is None and config.init != "scratch":
        init_checkpoint = Checkpoint.load(config.init)
    if init_checkpoint is not None:
        transfer = transfer_weights(init_checkpoint, model, config.policy or "encoder_only").to_dict()
        logger.info("transferred %d tensors, initialized %d", transfer["n_transferred"], transfer["n_initialized"])
    model.to(device)
    optimizer = _training.make_sgd(model.parameters(), config.lr, config.momentum, config.nesterov, config.weight_decay)
    amp = _training.autocast_context(config.mixed_precision, device)
    input_size = config.augmentation.target_size
    logger.info("training on %d slices from %d subjects, %d steps/epoch", len(slices), len(selected), config.steps_per_epoch)

    method = init_checkpoint.meta.get("method", "scratch") if init_checkpoint is not None else "scratch"
    history = []
    best, best_dsc = None, -1.0
    for epoch in range(config.epochs):
        lr = lr_at(config.scheduler, config.lr, epoch, config.epochs)
        _training.set_lr(optimizer, lr)
        rng = worker_rng(config.seed, epoch)
        model.train()
        losses = []
        for step, idx in enumerate(_training.epoch_batches(len(slices), config.batch_size, config.seed, epoch,
                                                           config.steps_per_epoch)):
            x, y = _batch(slices, idx, config.augmentation, rng, device)
            with amp:
                out = model(x)
            loss = segmentation_loss([o.float() for o in out] if isinstance(out, list) else out.float(), y)
            losses.append(_training.check_finite(loss, epoch, step))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
        last = epoch == config.epochs - 1
        if val_volumes and (last or (config.val_every and (epoch + 1) % config.val_every == 0)):
            row["val_dsc"] = _mean_dsc(model, val_volumes, input_size)
            if row["val_dsc"] > best_dsc:
                best_dsc = row["val_dsc"]
                best = Checkpoint.from_model(model, method, epoch + 1, config.seed,
                                             extra={"selection": "best_val_dsc", "val_dsc": best_dsc})
        history.append(row)
        logger.info("train epoch %d lr %.5g loss %.5f", epoch, lr, row["train_loss"])
        if progress is not None:
            progress(row)

    final = Checkpoint.from_model(model, method, config.epochs, config.seed,
                                  extra={"selection": "final", "finetuned": init_checkpoint is not None,
                                         "train_config": config.to_dict(),
                                         "subjects": [v.subject_id for v in selected]})
    return TrainResult(final=final, best=best, history=history,
                       subjects=[v.subject_id for v in selected], transfer=transfer)
