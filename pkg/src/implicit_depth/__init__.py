"""Implicit occlusion masks for augmented reality compositing.

A per-pixel classifier answers "is the real surface in front of this depth?"
for any query depth. Masks, composites and depth maps all follow from it.
"""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, DepthMap, PlaneSpec, Pose  # noqa: E402
from .inference import (BinarySearchConfig, CompositingMask, ThresholdTable, binary_search,  # noqa: E402
                        binary_search_depth, composite, predict_mask)
from .nn import ImplicitModel, RegressionModel, load_checkpoint, save_checkpoint  # noqa: E402
from .training import TrainConfig, train_implicit, train_regression  # noqa: E402

__all__ = [
    "BinarySearchConfig", "CameraIntrinsics", "CompositingMask", "DepthMap", "ImplicitModel", "PlaneSpec", "Pose",
    "RegressionModel", "ThresholdTable", "TrainConfig", "binary_search", "binary_search_depth", "composite",
    "load_checkpoint", "predict_mask", "save_checkpoint", "train_implicit", "train_regression",
]
