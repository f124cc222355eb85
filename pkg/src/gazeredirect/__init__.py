"""Coarse-to-fine gaze redirection at desk scale.

A numpy-backed library implementing the full pipeline: a minimal
reverse-mode autodiff engine, differentiable bilinear warping by learned
flow fields, gazemap rasterization with numeric-plus-pictorial
conditioning, conditional residual refinement with a multi-task
discriminator, a built-in synthetic eye corpus, and geometric evaluation
oracles.
"""

from .data import (
    Checkpoint,
    EyeSample,
    RedirectionPair,
    load_checkpoint,
    load_dataset,
    make_pair_dataset,
    make_sample_dataset,
    render_synthetic_eye,
    save_checkpoint,
)
from .evaluation import (
    ModelBundle,
    evaluate,
    feature_distance,
    gaze_error_deg,
    psnr,
    recover_gaze,
    run_redirection,
)
from .gazemap import (
    GazeAngle,
    HeadPose,
    build_condition,
    condition_at_scale,
    denormalize_angle_pair,
    normalize_angle_pair,
    rasterize_gazemap,
)
from .losses import (
    FeatureExtractor,
    LossWeights,
    adversarial_losses,
    gaze_regression_loss,
    perceptual_loss,
    recon_loss,
    total_d,
    total_g,
)
from .networks import (
    CoarseModel,
    ModelConfig,
    MultiTaskDiscriminator,
    RefineGenerator,
    coarse_redirect,
    discriminate,
    refine,
)
from .tensor import Tensor, concat, conv2d, resample_nearest
from .training import Adam, TrainConfig, TrainingDiverged, lr_schedule, train_coarse, train_fine
from .warp import bilinear_warp_backward, bilinear_warp_forward, warp

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Checkpoint",
    "CoarseModel",
    "EyeSample",
    "FeatureExtractor",
    "GazeAngle",
    "HeadPose",
    "LossWeights",
    "ModelBundle",
    "ModelConfig",
    "MultiTaskDiscriminator",
    "RedirectionPair",
    "RefineGenerator",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "adversarial_losses",
    "bilinear_warp_backward",
    "bilinear_warp_forward",
    "build_condition",
    "coarse_redirect",
    "concat",
    "condition_at_scale",
    "conv2d",
    "denormalize_angle_pair",
    "discriminate",
    "evaluate",
    "feature_distance",
    "gaze_error_deg",
    "gaze_regression_loss",
    "load_checkpoint",
    "load_dataset",
    "lr_schedule",
    "make_pair_dataset",
    "make_sample_dataset",
    "normalize_angle_pair",
    "perceptual_loss",
    "psnr",
    "rasterize_gazemap",
    "recon_loss",
    "recover_gaze",
    "refine",
    "render_synthetic_eye",
    "resample_nearest",
    "run_redirection",
    "save_checkpoint",
    "total_d",
    "total_g",
    "train_coarse",
    "train_fine",
    "warp",
]
