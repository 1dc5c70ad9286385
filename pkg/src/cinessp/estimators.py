"""scikit-learn style wrappers around pretraining and segmentation training."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augmentation import AugmentationConfig, augment
from .errors import ValidationError
from .evaluation import evaluate
from .ssp.pretrain import SSP_METHODS, PretrainConfig, pretrain
from .supervised import TrainRunConfig, predict_volume, train
from .unet import Checkpoint
from .validation import check_images, check_slices, check_volumes

_BUDGET = ("epochs", "steps_per_epoch", "batch_size", "lr")


def _overrides(est) -> dict:
    out = {k: getattr(est, k) for k in _BUDGET if getattr(est, k) is not None}
    if est.unet is not None:
        out["unet"] = dict(est.unet)
    if est.augmentation is not None:
        out["augmentation"] = dict(est.augmentation)
    return out


def _input_size(checkpoint: Checkpoint):
    size = checkpoint.meta.get("train_config", checkpoint.meta.get("pretrain_config", {}))
    size = size.get("augmentation", {}).get("target_size")
    return tuple(size) if size else None


@torch.no_grad()
def _embed(model, images: np.ndarray, size) -> np.ndarray:
    cfg = AugmentationConfig(enabled=False, target_size=size or images.shape[1:])
    x = np.stack([augment(im, None, cfg)[0] for im in images])[:, None]
    was = model.training
    model.eval()
    out = model.embed(torch.from_numpy(x)).numpy()
    model.train(was)
    return out


class SelfSupervisedPretrainer(TransformerMixin, BaseEstimator):
    """Pretrain a U-Net without labels; ``transform`` returns bottleneck embeddings.

    ``fit`` accepts volumes, slices or raw 2D images. Budget parameters left as
    None fall back to the method's preset.
    """

    def __init__(self, method="mim", epochs=None, steps_per_epoch=None, batch_size=None, lr=None,
                 unet=None, augmentation=None, seed=0, device="cpu"):
        self.method = method
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.unet = unet
        self.augmentation = augmentation
        self.seed = seed
        self.device = device

    def fit(self, X, y=None):
        if self.method not in SSP_METHODS:
            raise ValidationError(f"method must be one of {SSP_METHODS}")
        data = check_slices(X)
        config = PretrainConfig.from_preset(self.method, seed=self.seed, device=self.device, **_overrides(self))
        self.checkpoint_, self.history_ = pretrain(self.method, data, config)
        self.model_ = self.checkpoint_.build_model()
        self.n_features_out_ = self.model_.embed_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return _embed(self.model_, check_images(X), _input_size(self.checkpoint_))


class CardiacSegmenter(BaseEstimator):
    """U-Net segmenter trained from scratch or fine-tuned from a pretrained checkpoint.

    ``init`` is "scratch", a checkpoint path, a :class:`Checkpoint` or a fitted
    :class:`SelfSupervisedPretrainer`.
    """

    def __init__(self, preset="baseline", init="scratch", policy=None, epochs=None, steps_per_epoch=None,
                 batch_size=None, lr=None, unet=None, augmentation=None, subjects=None, phases="all",
                 vendors="all", seed=0, device="cpu"):
        self.preset = preset
        self.init = init
        self.policy = policy
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.unet = unet
        self.augmentation = augmentation
        self.subjects = subjects
        self.phases = phases
        self.vendors = vendors
        self.seed = seed
        self.device = device

    def _init_checkpoint(self):
        init = self.init
        if isinstance(init, SelfSupervisedPretrainer):
            check_is_fitted(init, "checkpoint_")
            return init.checkpoint_
        if isinstance(init, Checkpoint):
            return init
        if init in (None, "scratch"):
            return None
        return Checkpoint.load(init)

    def fit(self, X, y=None, X_val=None):
        """Train on labeled volumes; ``y`` is ignored (labels live in the volumes)."""
        volumes = check_volumes(X)
        ckpt = self._init_checkpoint()
        config = TrainRunConfig.from_preset(self.preset, seed=self.seed, device=self.device,
                                            init="scratch" if ckpt is None else "checkpoint",
                                            policy=self.policy, subjects=self.subjects, phases=self.phases,
                                            vendors=self.vendors, **_overrides(self))
        val = check_volumes(X_val) if X_val is not None else None
        result = train(config, volumes, val, init_checkpoint=ckpt)
        self.checkpoint_ = result.final
        self.history_ = result.history
        self.subjects_ = result.subjects
        self.transfer_ = result.transfer
        self.input_size_ = config.augmentation.target_size
        self.model_ = result.final.build_model()
        return self

    def predict(self, X):
        """Per volume, a dict ``{time_index: (slice, row, col) labels}`` over its labeled frames.

        Volumes without labels are predicted at every frame.
        """
        check_is_fitted(self, "model_")
        out = []
        for v in check_volumes(X):
            frames = v.labeled_frames or range(v.n_frames)
            out.append({t: predict_volume(self.model_, v, t, self.input_size_) for t in frames})
        return out

    def predict_images(self, X) -> np.ndarray:
        """Label maps for a stack of 2D images at their native size."""
        check_is_fitted(self, "model_")
        images = check_images(X)
        cfg = AugmentationConfig(enabled=False, target_size=self.input_size_)
        x = torch.from_numpy(np.stack([augment(im, None, cfg)[0] for im in images])[:, None])
        with torch.no_grad():
            self.model_.eval()
            logits = self.model_.segment(x).float()
            if tuple(logits.shape[-2:]) != images.shape[1:]:
                logits = torch.nn.functional.interpolate(logits, size=images.shape[1:], mode="bilinear",
                                                         align_corners=False)
        return logits.argmax(dim=1).numpy().astype(np.int64)

    def score(self, X, y=None) -> float:
        """Mean 3D Dice over foreground classes on the labeled frames of ``X``."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_volumes(X), input_size=self.input_size_).mean_dsc
