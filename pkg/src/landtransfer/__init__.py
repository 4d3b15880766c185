"""Transferable land-cover classification from patch-based pseudo-labelled fine-tuning.

Stages: multi-scale patch sampling on labelled source scenes, pre-training a
small patch classifier, mining confident pseudo-labelled target patches that
survive a nearest-neighbour check against source embeddings, fine-tuning,
specificity-weighted multi-scale fusion into a patch-wise map, and majority
voting over a hierarchical segmentation.
"""

from .raster import BACKGROUND, LabelMask, MultibandRaster, read_mask, read_raster, write_mask, write_raster
from .patching import ScaleConfig
from .classifier import ClassifierModel, TrainConfig, fine_tune, train
from .transfer import TransferConfig, build_finetune_set
from .fusion import classify_map, fuse, specificity_weight
from .segmentation import SegConfig, segment
from .voting import majority_vote
from .metrics import confusion, kappa, overall_accuracy, users_accuracy
from .pipeline import PipelineConfig, run_all

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND",
    "ClassifierModel",
    "LabelMask",
    "MultibandRaster",
    "PipelineConfig",
    "ScaleConfig",
    "SegConfig",
    "TrainConfig",
    "TransferConfig",
    "build_finetune_set",
    "classify_map",
    "confusion",
    "fine_tune",
    "fuse",
    "kappa",
    "majority_vote",
    "overall_accuracy",
    "read_mask",
    "read_raster",
    "run_all",
    "segment",
    "specificity_weight",
    "train",
    "users_accuracy",
    "write_mask",
    "write_raster",
]
