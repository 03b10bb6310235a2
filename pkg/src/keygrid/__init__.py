"""Unsupervised 3D keypoint detection on point clouds.

An autoencoder predicts keypoints as softmax-weighted combinations of the
input points, renders them into a dense skeleton-distance grid heatmap, and
reconstructs the cloud conditioned on that heatmap. Semantic consistency of
the detected keypoints is the training signal's emergent product; DAS and
mIoU metrics plus a perturbation-robustness protocol quantify it.
"""

from .geometry import (
    Frame,
    GridHeatmap,
    GridSpec,
    PointCloud,
    SkeletonSegment,
    add_gaussian_noise,
    build_heatmap,
    chamfer_distance,
    downsample,
    farthest_point_sampling,
    normalize_unit_cube,
    point_segment_distance,
    sample_heatmap,
)
from .losses import LossConfig, farthest_point_loss, overall_loss, similarity_loss
from .model import KeyGridNet, KeypointPrediction, ModelConfig, project_features
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Frame", "GridHeatmap", "GridSpec", "PointCloud", "SkeletonSegment",
    "add_gaussian_noise", "build_heatmap", "chamfer_distance", "downsample",
    "farthest_point_sampling", "normalize_unit_cube", "point_segment_distance",
    "sample_heatmap", "LossConfig", "farthest_point_loss", "overall_loss",
    "similarity_loss", "KeyGridNet", "KeypointPrediction", "ModelConfig",
    "project_features", "TrainConfig", "load_checkpoint", "save_checkpoint",
    "train",
]
