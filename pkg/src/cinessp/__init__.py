"""Self-supervised pretraining and U-Net segmentation for short-axis cine cardiac MRI."""

from .augmentation import AugmentationConfig, MultiCropConfig, augment, multi_crop, two_views
from .config import ExperimentConfig
from .data import CineVolume, SliceSample, SplitManifest, extract_slices, load_dataset, load_volume, make_split, sample_subset
from .errors import DivergenceError, ShapeError, TransferError, ValidationError
from .estimators import CardiacSegmenter, SelfSupervisedPretrainer
from .evaluation import DSCReport, dsc3d, evaluate
from .experiments import grid, run_experiment
from .phantom import PhantomSpec, generate
from .presets import preset
from .ssp import PretrainConfig, pretrain
from .supervised import TrainRunConfig, predict_volume, train
from .unet import Checkpoint, UNet, UNetConfig, build_unet, transfer_weights

__version__ = "0.1.0"
