"""Shape-biased contrastive predictive coding on overlapping image patches."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .estimators import PatchProbeClassifier, ShapeBiasedCPC, check_images
from .imaging import DESK_GRID, FULL_GRID, GridSpec, extract_grid
from .loss import LossWeights, combined_loss, contrastive_loss
from .models import AutoregressorConfig, EncoderConfig, ModelConfig
from .sequencing import Direction, enumerate_anchors, make_samples
from .training import FinetuneConfig, MetricsRecord, PretrainConfig, finetune, linear_probe, pretrain

__version__ = "0.1.0"

__all__ = [
    "AutoregressorConfig",
    "Checkpoint",
    "DESK_GRID",
    "Direction",
    "EncoderConfig",
    "FinetuneConfig",
    "GridSpec",
    "LossWeights",
    "MetricsRecord",
    "ModelConfig",
    "FULL_GRID",
    "PatchProbeClassifier",
    "PretrainConfig",
    "ShapeBiasedCPC",
    "check_images",
    "combined_loss",
    "contrastive_loss",
    "enumerate_anchors",
    "extract_grid",
    "finetune",
    "linear_probe",
    "load_checkpoint",
    "make_samples",
    "pretrain",
    "save_checkpoint",
]
