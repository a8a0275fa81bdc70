"""Differentiable Gaussian splatting with order-independent transparency.

Training only touches an active subset of Gaussians once the scene has
settled; the frozen remainder lives in per-view pre-rendered accumulators.
"""

from .activeset import ActiveSetState, PreRenderCache, subsample_views, update_active_set
from .backward import GradientBuffer, backward_oit, finite_diff_oracle
from .camera import Camera, cull, project
from .errors import ContractViolation, DatasetError, InvalidParameterError, OITSplatError
from .io import Dataset, generate_fixture, load_checkpoint, load_dataset, read_ply, save_checkpoint, write_ply
from .losses import loss, psnr, ssim
from .optim import AdamState, LearningRates, adam_step, densify_and_prune
from .rasterizer import PixelAccumulator, render_oit, render_sorted, render_with_prerender
from .scene import GaussianCloud, eval_sh
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ActiveSetState",
    "AdamState",
    "Camera",
    "ContractViolation",
    "Dataset",
    "DatasetError",
    "GaussianCloud",
    "GradientBuffer",
    "InvalidParameterError",
    "LearningRates",
    "OITSplatError",
    "PixelAccumulator",
    "PreRenderCache",
    "TrainConfig",
    "adam_step",
    "backward_oit",
    "cull",
    "densify_and_prune",
    "eval_sh",
    "evaluate",
    "finite_diff_oracle",
    "generate_fixture",
    "load_checkpoint",
    "load_dataset",
    "loss",
    "project",
    "psnr",
    "read_ply",
    "render_oit",
    "render_sorted",
    "render_with_prerender",
    "save_checkpoint",
    "ssim",
    "subsample_views",
    "train",
    "update_active_set",
    "write_ply",
]
