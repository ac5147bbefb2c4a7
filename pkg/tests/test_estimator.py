"""Estimator facade tests: parameter plumbing, fit/predict/transform/score,
and the input validation helpers."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ssmflow.errors import ConfigError, DimensionError
from ssmflow.estimator import SceneFlowEstimator, as_scenes, check_cloud
from ssmflow.scenes import SceneSpec, SyntheticScene, generate_scene

TINY = dict(
    point_counts=(16, 5), channels=6, motion_channels=4, k=4,
    state_size=2, n_blocks=1, steps=5,
)


def tiny_scenes(n=2, transform="translate"):
    spec = SceneSpec(n_objects=2, points_per_object=8, transform=transform)
    return [generate_scene(spec, seed=100 + i) for i in range(n)]


class TestCheckCloud:
    def test_passes_through(self):
        arr = [[0.0, 1.0, 2.0]]
        out = check_cloud(arr)
        assert out.shape == (1, 3) and out.dtype == float

    @pytest.mark.parametrize("bad", [np.zeros((4, 2)), np.zeros((0, 3)), np.zeros(3)])
    def test_rejects_shapes(self, bad):
        with pytest.raises(DimensionError):
            check_cloud(bad)

    def test_rejects_non_finite(self):
        with pytest.raises(DimensionError, match="finite"):
            check_cloud([[0.0, np.nan, 0.0]])


class TestAsScenes:
    def test_scene_passthrough(self):
        scenes = tiny_scenes(1)
        assert as_scenes(scenes) == scenes

    def test_pairs_with_flows(self):
        rng = np.random.default_rng(0)
        p, q = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        flow = rng.normal(size=(8, 3))
        (scene,) = as_scenes([(p, q)], [flow])
        np.testing.assert_array_equal(scene.p_t, p)
        np.testing.assert_array_equal(scene.gt_flow, flow)

    def test_pairs_without_flows_get_zeros(self):
        p = np.zeros((4, 3))
        (scene,) = as_scenes([(p, p)])
        np.testing.assert_array_equal(scene.gt_flow, 0.0)

    def test_length_mismatch(self):
        p = np.zeros((4, 3))
        with pytest.raises(DimensionError):
            as_scenes([(p, p)], [])

    def test_flow_shape_mismatch(self):
        p = np.zeros((4, 3))
        with pytest.raises(DimensionError):
            as_scenes([(p, p)], [np.zeros((5, 3))])

    def test_rejects_bare_array(self):
        with pytest.raises(DimensionError):
            as_scenes([np.zeros((4, 3))])


class TestParams:
    def test_get_params_roundtrip(self):
        est = SceneFlowEstimator(**TINY)
        params = est.get_params()
        assert params["channels"] == 6
        assert params["point_counts"] == (16, 5)
        again = SceneFlowEstimator(**params)
        assert again.get_params() == params

    def test_set_params_and_clone(self):
        est = SceneFlowEstimator(**TINY)
        est.set_params(steps=9, update_operator="isu")
        assert est.steps == 9
        twin = clone(est)
        assert twin.get_params() == est.get_params()

    def test_invalid_config_caught_at_fit(self):
        est = SceneFlowEstimator(**{**TINY, "k": 50})
        with pytest.raises(ConfigError):
            est.fit(tiny_scenes(1))


class TestFitPredict:
    def test_fit_returns_self_and_logs(self):
        est = SceneFlowEstimator(**TINY)
        assert est.fit(tiny_scenes()) is est
        assert len(est.train_log_) == 5
        assert est.train_log_[-1][2] < est.train_log_[0][2]

    def test_predict_before_fit(self):
        with pytest.raises(NotFittedError):
            SceneFlowEstimator(**TINY).predict(tiny_scenes(1))

    def test_predict_shapes_and_determinism(self):
        scenes = tiny_scenes()
        a = SceneFlowEstimator(**TINY).fit(scenes).predict(scenes)
        b = SceneFlowEstimator(**TINY).fit(scenes).predict(scenes)
        assert len(a) == 2
        for flow_a, flow_b in zip(a, b):
            assert flow_a.shape == (16, 3)
            np.testing.assert_array_equal(flow_a, flow_b)

    def test_predict_accepts_pairs(self):
        scenes = tiny_scenes()
        est = SceneFlowEstimator(**TINY).fit(scenes)
        (flow,) = est.predict([(scenes[0].p_t, scenes[0].p_t1)])
        np.testing.assert_array_equal(flow, est.predict([scenes[0]])[0])

    def test_transform_warps_source(self):
        scenes = tiny_scenes(1)
        est = SceneFlowEstimator(**TINY).fit(scenes)
        (warped,) = est.transform(scenes)
        (flow,) = est.predict(scenes)
        np.testing.assert_allclose(warped, scenes[0].p_t + flow, atol=1e-15)

    def test_zero_steps_scores_zero_on_static_scene(self):
        # untrained model predicts zero flow; identity scene has zero flow
        scene = generate_scene(
            SceneSpec(n_objects=2, points_per_object=8, transform="identity"),
            seed=0,
        )
        est = SceneFlowEstimator(**{**TINY, "steps": 0}).fit([scene])
        assert est.score([scene]) == 0.0

    def test_score_improves_with_training(self):
        scenes = tiny_scenes()
        short = SceneFlowEstimator(**{**TINY, "steps": 0}).fit(scenes)
        longer = SceneFlowEstimator(**{**TINY, "steps": 30}).fit(scenes)
        assert longer.score(scenes) > short.score(scenes)
