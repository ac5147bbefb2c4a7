"""Scene generator and file-format tests."""

import math

import numpy as np
import pytest

from ssmflow.errors import ConfigError, DomainError, SceneFormatError
from ssmflow.scenes import (
    SceneSpec,
    apply_rigid,
    generate_scene,
    load_scene,
    rotation_matrix,
    save_scene,
)


class TestRotationMatrix:
    def test_zero_angle_exact_identity(self):
        np.testing.assert_array_equal(rotation_matrix([0, 0, 1], 0.0), np.eye(3))

    def test_orthonormal_unit_determinant(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            r = rotation_matrix(rng.normal(size=3), rng.uniform(-np.pi, np.pi))
            np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-14)
            assert abs(np.linalg.det(r) - 1.0) < 1e-14

    def test_quarter_turn_about_z(self):
        r = rotation_matrix([0, 0, 1], np.pi / 2)
        np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_zero_axis_rejected(self):
        with pytest.raises(DomainError):
            rotation_matrix([0, 0, 0], 1.0)


class TestApplyRigid:
    def test_matches_per_point_oracle(self):
        rng = np.random.default_rng(42)
        pts = rng.uniform(-2, 2, (20, 3))
        r = rotation_matrix(rng.normal(size=3), 0.7)
        t = rng.uniform(-1, 1, 3)
        got = apply_rigid(pts, r, t)
        for i in range(20):
            np.testing.assert_allclose(got[i], r @ pts[i] + t, atol=1e-12)

    def test_centered_rotation_fixes_center(self):
        r = rotation_matrix([0, 1, 0], 1.0)
        c = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(
            apply_rigid(c[None, :], r, np.zeros(3), center=c)[0], c, atol=1e-15
        )


class TestGenerateScene:
    def test_identity_transform(self):
        scene = generate_scene(SceneSpec(transform="identity"), seed=3)
        np.testing.assert_array_equal(scene.gt_flow, np.zeros_like(scene.gt_flow))
        np.testing.assert_array_equal(scene.p_t1, scene.p_t)

    def test_pure_translation(self):
        spec = SceneSpec(transform="translate", max_translation=0.5)
        scene = generate_scene(spec, seed=4)
        np.testing.assert_allclose(
            scene.gt_flow,
            np.broadcast_to(scene.gt_flow[0], scene.gt_flow.shape),
            atol=1e-15,
        )
        assert abs(np.linalg.norm(scene.gt_flow[0]) - 0.5) < 1e-12
        np.testing.assert_array_equal(scene.p_t1, scene.p_t + scene.gt_flow)

    def test_rotation_about_origin_preserves_radius(self):
        scene = generate_scene(SceneSpec(transform="rotate30"), seed=5)
        np.testing.assert_allclose(
            np.linalg.norm(scene.p_t1, axis=1),
            np.linalg.norm(scene.p_t, axis=1),
            rtol=1e-12,
        )
        np.testing.assert_array_equal(scene.p_t1, scene.p_t + scene.gt_flow)

    def test_random_transforms_are_rigid_per_object(self):
        spec = SceneSpec(n_objects=3, points_per_object=16, transform="random")
        scene = generate_scene(spec, seed=6)
        for obj in range(3):
            s = slice(obj * 16, (obj + 1) * 16)
            before = scene.p_t[s]
            after = scene.p_t[s] + scene.gt_flow[s]
            d0 = np.linalg.norm(before[:, None] - before[None, :], axis=2)
            d1 = np.linalg.norm(after[:, None] - after[None, :], axis=2)
            np.testing.assert_allclose(d1, d0, atol=1e-9)

    def test_flow_magnitudes_bounded(self):
        spec = SceneSpec(
            n_objects=4, points_per_object=16, transform="random",
            max_rotation_deg=30.0, max_translation=0.5,
        )
        scene = generate_scene(spec, seed=7)
        # per-object rotation about the centroid: |rot part| <= 2 sin(15 deg) r
        for obj in range(4):
            s = slice(obj * 16, (obj + 1) * 16)
            radius = np.linalg.norm(
                scene.p_t[s] - scene.p_t[s].mean(axis=0), axis=1
            ).max()
            bound = 2 * math.sin(math.radians(15)) * radius + 0.5 + 1e-9
            assert np.linalg.norm(scene.gt_flow[s], axis=1).max() <= bound

    def test_noise_perturbs_target_only(self):
        spec = SceneSpec(transform="translate", noise=0.01)
        scene = generate_scene(spec, seed=8)
        gap = scene.p_t1 - (scene.p_t + scene.gt_flow)
        assert 0 < np.abs(gap).max() < 0.1

    def test_occlusion_shrinks_target(self):
        spec = SceneSpec(n_objects=2, points_per_object=32, occlusion=0.25)
        scene = generate_scene(spec, seed=9)
        assert scene.p_t.shape == (64, 3)
        assert scene.gt_flow.shape == (64, 3)
        assert scene.p_t1.shape == (48, 3)

    def test_deterministic(self):
        spec = SceneSpec(n_objects=2, points_per_object=8)
        a = generate_scene(spec, seed=11)
        b = generate_scene(spec, seed=11)
        np.testing.assert_array_equal(a.p_t, b.p_t)
        np.testing.assert_array_equal(a.gt_flow, b.gt_flow)

    @pytest.mark.parametrize(
        "bad",
        [
            SceneSpec(n_objects=0),
            SceneSpec(points_per_object=3),
            SceneSpec(transform="affine"),
            SceneSpec(kinds=("sphere",)),
            SceneSpec(occlusion=1.0),
            SceneSpec(noise=-0.1),
        ],
    )
    def test_invalid_specs(self, bad):
        with pytest.raises(ConfigError):
            generate_scene(bad, seed=0)


class TestSceneFiles:
    def test_roundtrip_exact(self, tmp_path):
        scene = generate_scene(SceneSpec(n_objects=2, points_per_object=16), seed=12)
        path = tmp_path / "scene.txt"
        save_scene(path, scene)
        back = load_scene(path)
        np.testing.assert_array_equal(back.p_t, scene.p_t)
        np.testing.assert_array_equal(back.gt_flow, scene.gt_flow)
        np.testing.assert_array_equal(back.p_t1, scene.p_t + scene.gt_flow)

    def test_deterministic_bytes(self, tmp_path):
        scene = generate_scene(SceneSpec(n_objects=1, points_per_object=8), seed=13)
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        save_scene(a, scene)
        save_scene(b, scene)
        assert a.read_bytes() == b.read_bytes()

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3 4\n")
        with pytest.raises(SceneFormatError, match="6 columns"):
            load_scene(path)

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3 4 5 x\n")
        with pytest.raises(SceneFormatError):
            load_scene(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("\n")
        with pytest.raises(SceneFormatError, match="no points"):
            load_scene(path)

    def test_non_finite(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3 4 5 nan\n")
        with pytest.raises(SceneFormatError, match="non-finite"):
            load_scene(path)
