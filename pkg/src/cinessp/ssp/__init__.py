"""Self-supervised objectives (SimCLR, PCL, DINO, MIM) and the pretraining loop."""

from .contrastive import ContrastiveBatch, nt_xent_loss, pcl_loss, pcl_pair_mask
from .dino import TeacherState, dino_loss, dino_step, make_teacher
from .masking import MaskSpec, mask_batch, mim_loss, mim_mask
from .pretrain import PretrainConfig, pretrain

__all__ = [
    "ContrastiveBatch", "nt_xent_loss", "pcl_loss", "pcl_pair_mask",
    "TeacherState", "dino_loss", "dino_step", "make_teacher",
    "MaskSpec", "mask_batch", "mim_loss", "mim_mask",
    "PretrainConfig", "pretrain",
]
