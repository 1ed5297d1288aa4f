"""Two-stage 3D contextual-transformer U-Net for tubular-structure
segmentation, with airway-tree metrics and synthetic phantoms."""

from .cot import CoTParams, CoTTrace, cot_backward, cot_forward, cot_init
from .gradcheck import GradCheckReport, grad_check
from .losses import LossValue, dice_loss, focal_loss, total_loss
from .metrics import (
    AirwayStats,
    MetricReport,
    SkeletonTree,
    airway_stats,
    branches_detected,
    confusion_metrics,
    decompose_branches,
    dsc,
    evaluate_case,
    skeletonize,
    tree_length_detected,
)
from .phantom import PhantomCase, PhantomRanges, PhantomSpec, generate_tree_mask, make_dataset, synthesize_ct
from .pipeline import (
    StageModel,
    TwoStageModel,
    TwoStageResult,
    crop_to_lung,
    largest_connected_component,
    make_stage2_labels,
    plan_tiling,
    preprocess,
    stitch,
    two_stage_infer,
)
from .train import TrainConfig, adam_step, train
from .unet import UNetConfig, load_checkpoint, predict_patch, save_checkpoint, unet_init
from .volume import Volume, read_volume, write_volume

__all__ = [
    "AirwayStats", "CoTParams", "CoTTrace", "GradCheckReport", "LossValue",
    "MetricReport", "PhantomCase", "PhantomRanges", "PhantomSpec",
    "SkeletonTree", "StageModel", "TrainConfig", "TwoStageModel",
    "TwoStageResult", "UNetConfig", "Volume",
    "adam_step", "airway_stats", "branches_detected", "confusion_metrics",
    "cot_backward", "cot_forward", "cot_init", "crop_to_lung",
    "decompose_branches", "dice_loss", "dsc", "evaluate_case",
    "focal_loss", "generate_tree_mask", "grad_check",
    "largest_connected_component", "load_checkpoint", "make_dataset",
    "make_stage2_labels", "plan_tiling", "predict_patch", "preprocess",
    "read_volume", "save_checkpoint", "skeletonize", "stitch",
    "synthesize_ct", "total_loss", "train", "tree_length_detected",
    "two_stage_infer", "unet_init", "write_volume",
]

__version__ = "0.1.0"
