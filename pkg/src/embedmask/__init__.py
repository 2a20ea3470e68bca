"""Embedding-coupling instance segmentation on synthetic scenes.

The package trains a small anchor-free detector whose proposals carry an
embedding center and a learnable margin; pixels join an instance mask
when their embedding falls inside the proposal's margin. Everything
runs on a self-contained numpy autodiff core.

The scikit-learn-style entry point is :class:`EmbedMaskSegmenter`; the
lower-level pieces (losses, sampling, training loop, evaluator, CLI)
live in the submodules.
"""

from .autodiff import Tensor, backward, bilinear_resize, checking, finite_diff_check
from .coupling import (ClusterCenter, LossWeights, MarginConfig, aggregate_center,
                       gaussian_phi, hard_assign, hinge_loss, lovasz_grad,
                       lovasz_hinge, mask_loss, smooth_loss)
from .estimator import EmbedMaskSegmenter
from .evaluation import EvalReport, evaluate, run_ablation
from .geometry import BitMask, Box, box_iou, expand_box, mask_iou, rle_decode, rle_encode
from .inference import PredictedInstance, infer_masks, nms
from .model import HeadOutputs, ModelConfig, ModelParams, forward, init_params
from .scenes import CATEGORIES, InstanceTarget, Scene, SceneSpec, generate_dataset, generate_scene
from .training import LossBreakdown, TrainConfig, total_loss, train
from .validation import NotFittedError

__version__ = "0.1.0"

__all__ = [
    "BitMask", "Box", "CATEGORIES", "ClusterCenter", "EmbedMaskSegmenter",
    "EvalReport", "HeadOutputs", "InstanceTarget", "LossBreakdown", "LossWeights",
    "MarginConfig", "ModelConfig", "ModelParams", "NotFittedError",
    "PredictedInstance", "Scene", "SceneSpec", "Tensor", "TrainConfig",
    "aggregate_center", "backward", "bilinear_resize", "box_iou", "checking",
    "evaluate", "expand_box", "finite_diff_check", "forward", "gaussian_phi",
    "generate_dataset", "generate_scene", "hard_assign", "hinge_loss",
    "infer_masks", "init_params", "lovasz_grad", "lovasz_hinge", "mask_iou",
    "mask_loss", "nms", "rle_decode", "rle_encode", "run_ablation",
    "smooth_loss", "total_loss", "train",
]
