"""Scene flow from point clouds with selective state-space refinement."""

from .autodiff import Tape, Tensor, backward, grad_check
from .estimator import SceneFlowEstimator
from .pipeline import (
    LossWeights,
    NetworkConfig,
    flow_loss,
    forward,
    init_model,
    load_checkpoint,
    predict,
    predict_trajectory,
    save_checkpoint,
    train_loop,
)
from .pointcloud import MetricsReport, evaluate
from .scenes import SceneSpec, SyntheticScene, generate_scene, load_scene, save_scene

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "SceneFlowEstimator",
    "LossWeights",
    "NetworkConfig",
    "flow_loss",
    "forward",
    "init_model",
    "load_checkpoint",
    "predict",
    "predict_trajectory",
    "save_checkpoint",
    "train_loop",
    "MetricsReport",
    "evaluate",
    "SceneSpec",
    "SyntheticScene",
    "generate_scene",
    "load_scene",
    "save_scene",
]

__version__ = "0.1.0"
