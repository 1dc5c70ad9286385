"""Pretraining loop for the four self-supervised methods."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .. import _training
from ..augmentation import AugmentationConfig, MultiCropConfig, augment, multi_crop, two_views, worker_rng
from ..errors import ValidationError
from ..presets import preset
from ..schedules import ema_momentum, lr_at
from ..unet import Checkpoint, UNetConfig, attach_dino_head, attach_projection_head, build_unet
from .contrastive import nt_xent_loss, pcl_loss
from .dino import DINONetwork, dino_step, make_teacher
from .masking import MaskSpec, mask_batch, mim_loss

logger = logging.getLogger(__name__)

SSP_METHODS = ("simclr", "pcl", "dino", "mim")


@dataclass
class PretrainConfig:
    method: str
    epochs: int = 100
    lr: float = 0.1
    scheduler: str = "cosine"
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 1e-4
    batch_size: int = 64
    mixed_precision: bool = False
    steps_per_epoch: int | None = None
    seed: int = 0
    device: str = "cpu"
    unet: UNetConfig = field(default_factory=UNetConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    temperature: float = 0.1
    pcl_threshold: float = 0.1
    projection: dict = field(default_factory=lambda: {"out_dim": 128, "hidden_dim": 512})
    dino: dict = field(default_factory=lambda: {
        "out_dim": 8192, "hidden_dim": 2048, "bottleneck_dim": 256, "student_temp": 0.1,
        "teacher_temp": 0.04, "ema_momentum": 0.996, "center_momentum": 0.9, "export": "teacher"})
    multicrop: MultiCropConfig = field(default_factory=MultiCropConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)

    def __post_init__(self):
        if self.method not in SSP_METHODS:
            raise ValidationError(f"unknown pretraining method {self.method!r}; choose from {SSP_METHODS}")
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        self.dino = {**PretrainConfig.__dataclass_fields__["dino"].default_factory(), **self.dino}
        if isinstance(self.multicrop, dict):
            self.multicrop = MultiCropConfig(**self.multicrop)
        if isinstance(self.mask, dict):
            self.mask = MaskSpec(**self.mask)
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("lr must be > 0, epochs >= 1 and batch_size >= 1")
        if self.method == "mim" and not self.unet.reconstruction:
            # reconstruction variant: deep supervision heads removed, one 1-channel output
            self.unet = UNetConfig(**{**self.unet.to_dict(), "reconstruction": True, "deep_supervision": False})

    @classmethod
    def from_preset(cls, method: str, **overrides) -> "PretrainConfig":
        p = preset(method)
        kwargs = {k: v for k, v in p.pop("table").items() if k != "optimizer"}
        for key in ("temperature", "pcl_threshold", "multicrop", "mask"):
            if key in p:
                kwargs[key] = p[key]
        if "dino" in p:
            kwargs["dino"] = {**PretrainConfig.__dataclass_fields__["dino"].default_factory(), **p["dino"]}
        for key, value in overrides.items():
            # partial dict overrides refine the preset instead of replacing it
            if isinstance(value, dict) and isinstance(kwargs.get(key), dict):
                value = {**kwargs[key], **value}
            kwargs[key] = value
        return cls(method=method, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet"] = self.unet.to_dict()
        d["augmentation"] = self.augmentation.to_dict()
        d["multicrop"] = self.multicrop.to_dict()
        d["mask"] = {"patch_size": list(self.mask.patch_size), "mask_ratio": self.mask.mask_ratio,
                     "mask_value": self.mask.mask_value}
        return d


def build_pretrain_model(config: PretrainConfig):
    model = build_unet(config.unet, seed=config.seed)
    if config.method in ("simclr", "pcl"):
        attach_projection_head(model, config.projection["out_dim"], config.projection["hidden_dim"], seed=config.seed)
    elif config.method == "dino":
        attach_dino_head(model, config.dino["out_dim"], config.dino["hidden_dim"], config.dino["bottleneck_dim"],
                         seed=config.seed)
    return model


def _images(slices) -> list[np.ndarray]:
    out = []
    for s in slices:
        out.append(s.image2d if hasattr(s, "image2d") else np.asarray(s))
    return out


def _positions(slices) -> np.ndarray:
    return np.array([getattr(s, "relative_position", 0.5) for s in slices], dtype=np.float64)


def _to_tensor(arrays, device) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)[:, None].astype(np.float32)).to(device)


def pretrain(method: str, data, config: PretrainConfig | None = None, progress=None):
    """Pretrain on unlabeled slices; returns ``(checkpoint, history)``.

    ``data`` is a sequence of :class:`~cinessp.data.SliceSample` (or bare 2D arrays,
    in which case PCL positions default to 0.5). ``history`` holds one row per
    epoch with the mean training loss and the learning rate.
    """
    config = config or PretrainConfig.from_preset(method)
    if config.method != method:
        raise ValidationError(f"config is for {config.method!r}, asked to run {method!r}")
    images = _images(data)
    positions = _positions(data)
    n = len(images)
    min_batch = 1 if method == "mim" else 2
    if n < min_batch:
        raise ValidationError(f"{method} pretraining needs at least {min_batch} slices, got {n}")

    device = config.device
    model = build_pretrain_model(config).to(device)
    if method == "dino":
        student = DINONetwork(model)
        teacher = make_teacher(student, config.dino["out_dim"], config.dino["ema_momentum"])
        params = student.parameters()
    else:
        params = model.parameters()
    optimizer = _training.make_sgd(params, config.lr, config.momentum, config.nesterov, config.weight_decay)
    aug = config.augmentation
    steps_per_epoch = config.steps_per_epoch or max(1, n // min(config.batch_size, n))
    total_steps = config.epochs * steps_per_epoch
    amp = _training.autocast_context(config.mixed_precision, device)

    history = []
    global_step = 0
    for epoch in range(config.epochs):
        lr = lr_at(config.scheduler, config.lr, epoch, config.epochs)
        _training.set_lr(optimizer, lr)
        rng = worker_rng(config.seed, epoch)
        batches = _training.epoch_batches(n, config.batch_size, config.seed, epoch, steps_per_epoch, min_batch)
        model.train()
        losses = []
        for step, idx in enumerate(batches):
            if method in ("simclr", "pcl"):
                views = [two_views(images[i], aug, rng) for i in idx]
                x = _to_tensor([v[0] for v in views] + [v[1] for v in views], device)
                with amp:
                    z = model.projection_head(model.embed(x))
                z = z.float()
                if method == "simclr":
                    loss = nt_xent_loss(z, config.temperature)
                else:
                    loss = pcl_loss(z, positions[idx], config.pcl_threshold, config.temperature)
            elif method == "mim":
                x = _to_tensor([augment(images[i], None, aug, rng)[0] for i in idx], device)
                masked, grids = mask_batch(x, config.mask, rng)
                with amp:
                    pred = model(masked)
                loss = mim_loss(pred.float(), x, grids)
            else:
                crops = [multi_crop(images[i], config.multicrop, aug, rng) for i in idx]
                g = [_to_tensor([c[0][k] for c in crops], device) for k in range(config.multicrop.n_global)]
                l_ = [_to_tensor([c[1][k] for c in crops], device) for k in range(config.multicrop.n_local)]
                m = ema_momentum(config.dino["ema_momentum"], global_step, total_steps)
                with amp:
                    loss, teacher = dino_step(student, teacher, g, l_, optimizer, config.dino["student_temp"],
                                              config.dino["teacher_temp"], m, config.dino["center_momentum"])
                losses.append(_training.check_finite(loss, epoch, step))
                global_step += 1
                continue
            value = _training.check_finite(loss, epoch, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(value)
            global_step += 1
        row = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)) if losses else float("nan"),
               "steps": len(losses)}
        history.append(row)
        logger.info("pretrain %s epoch %d lr %.5g loss %.5f", method, epoch, lr, row["loss"])
        if progress is not None:
            progress(row)

    export = model
    if method == "dino" and config.dino.get("export", "teacher") == "teacher":
        export = teacher.network.unet
    ckpt = Checkpoint.from_model(export, method, epoch=config.epochs, seed=config.seed,
                                 extra={"loss_trace": [r["loss"] for r in history],
                                        "pretrain_config": config.to_dict()})
    return ckpt, history


@torch.no_grad()
def masked_mse(checkpoint_or_model, images, spec: MaskSpec, seed: int = 0) -> float:
    """Held-out masked-patch MSE of a reconstruction model on standardized images."""
    from ..augmentation import standardize

    model = checkpoint_or_model.build_model() if isinstance(checkpoint_or_model, Checkpoint) else checkpoint_or_model
    model.eval()
    x = _to_tensor([standardize(im) for im in images], next(model.parameters()).device)
    masked, grids = mask_batch(x, spec, np.random.default_rng(seed))
    return float(mim_loss(model(masked), x, grids))
