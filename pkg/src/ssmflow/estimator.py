"""Estimator facade over the training pipeline.

`SceneFlowEstimator` wraps model init, training, and prediction behind the
familiar fit/predict/transform surface so the network slots into pipelines
and grid searches. Scene data is not tabular, so inputs are sequences of
scenes (or `(source, target)` cloud pairs with flows passed as `y`) rather
than a single 2-D matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import DimensionError
from .pipeline import (
    NetworkConfig,
    forward,
    init_model,
    input_indices,
    predict,
    train_loop,
)
from .pointcloud import evaluate
from .scenes import SyntheticScene


def check_cloud(arr, name="X") -> np.ndarray:
    """Validate one [N, 3] point cloud: float, finite, non-empty."""
    out = np.asarray(arr, dtype=float)
    if out.ndim != 2 or out.shape[1] != 3 or out.shape[0] == 0:
        raise DimensionError(f"{name} must be a non-empty [N, 3] array, got {out.shape}")
    if not np.isfinite(out).all():
        raise DimensionError(f"{name} contains non-finite values")
    return out


def as_scenes(X, y=None) -> list[SyntheticScene]:
    """Accept a sequence of scenes, or of (source, target) pairs with flows
    in y. Missing flows become zeros so prediction inputs need no labels."""
    if y is not None and len(y) != len(X):
        raise DimensionError(f"X has {len(X)} items but y has {len(y)}")
    scenes = []
    for i, item in enumerate(X):
        if isinstance(item, SyntheticScene):
            scenes.append(item)
            continue
        if not isinstance(item, (tuple, list)) or len(item) != 2:
            raise DimensionError(
                f"X[{i}] must be a SyntheticScene or a (source, target) pair"
            )
        p_t = check_cloud(item[0], f"X[{i}][0]")
        p_t1 = check_cloud(item[1], f"X[{i}][1]")
        if y is None:
            flow = np.zeros_like(p_t)
        else:
            flow = check_cloud(y[i], f"y[{i}]")
            if flow.shape != p_t.shape:
                raise DimensionError(
                    f"y[{i}] shape {flow.shape} does not match X[{i}][0] {p_t.shape}"
                )
        scenes.append(SyntheticScene(p_t=p_t, p_t1=p_t1, gt_flow=flow))
    return scenes


class SceneFlowEstimator(BaseEstimator):
    """Coarse-to-fine scene flow with iterative state-space refinement.

    fit trains on a sequence of scenes; predict returns one flow array per
    scene at the finest pyramid level; transform returns the warped source
    clouds. When `point_counts[0]` equals the input size the finest level
    is the input itself, so predictions align row-for-row with the source.
    """

    def __init__(self, levels=2, iterations=2, point_counts=(128, 32),
                 channels=32, motion_channels=32, k=16,
                 update_operator="isu-fio", n_blocks=2, state_size=8,
                 scan_impl="parallel", seed=0, steps=100, base_lr=1e-3,
                 min_lr=1e-5, weight_decay=1e-4):
        self.levels = levels
        self.iterations = iterations
        self.point_counts = point_counts
        self.channels = channels
        self.motion_channels = motion_channels
        self.k = k
        self.update_operator = update_operator
        self.n_blocks = n_blocks
        self.state_size = state_size
        self.scan_impl = scan_impl
        self.seed = seed
        self.steps = steps
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.weight_decay = weight_decay

    def _config(self) -> NetworkConfig:
        return NetworkConfig(
            levels=self.levels,
            iterations=self.iterations,
            point_counts=tuple(self.point_counts),
            channels=self.channels,
            motion_channels=self.motion_channels,
            k=self.k,
            update_operator=self.update_operator,
            n_blocks=self.n_blocks,
            state_size=self.state_size,
            scan_impl=self.scan_impl,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        scenes = as_scenes(X, y)
        self.config_ = self._config()
        self.model_ = init_model(self.config_)
        self.train_log_ = train_loop(
            self.model_, scenes, self.config_, self.steps,
            base_lr=self.base_lr, min_lr=self.min_lr,
            weight_decay=self.weight_decay,
        )
        return self

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return [
            predict(self.model_, scene, self.config_)[0]
            for scene in as_scenes(X)
        ]

    def transform(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        out = []
        for scene in as_scenes(X):
            result = forward(self.model_, scene.p_t, scene.p_t1, self.config_)
            idx = input_indices(result.pyramid_p)[0]
            out.append(scene.p_t[idx] + result.sf.data)
        return out

    def score(self, X, y=None) -> float:
        """Negative mean EPE3D over the scenes (higher is better)."""
        check_is_fitted(self, "model_")
        epes = []
        for scene in as_scenes(X, y):
            sf, gt = predict(self.model_, scene, self.config_)
            epes.append(evaluate(sf, gt).epe3d)
        return -float(np.mean(epes))
