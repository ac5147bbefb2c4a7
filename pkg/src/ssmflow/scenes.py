"""Synthetic rigid-motion scenes.

Each scene is a pair of point clouds plus the exact per-point ground-truth
flow. Objects are boxes, planes, and thin rods (the flat and slender shapes
that make correspondence locally ambiguous), moved by per-object rigid
transforms. The text format stores the source frame and clean flow only, so
the target frame is reconstructed as p_t + flow on load; noise and occlusion
are in-memory options that do not round-trip through files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, SceneFormatError

TRANSFORM_FAMILIES = ("random", "identity", "translate", "rotate30")
OBJECT_KINDS = ("box", "plane", "rod")


@dataclass
class SceneSpec:
    n_objects: int = 2
    points_per_object: int = 64
    transform: str = "random"
    kinds: tuple[str, ...] = OBJECT_KINDS
    max_rotation_deg: float = 30.0
    max_translation: float = 0.5
    noise: float = 0.0
    occlusion: float = 0.0  # fraction of target points dropped


@dataclass
class SyntheticScene:
    p_t: np.ndarray  # [N, 3]
    p_t1: np.ndarray  # [M, 3]; M < N only under occlusion
    gt_flow: np.ndarray  # [N, 3]
    spec: SceneSpec | None = None
    seed: int | None = None


def rotation_matrix(axis, angle) -> np.ndarray:
    """Rotation by `angle` radians about `axis` (Rodrigues). angle=0 gives
    the exact identity."""
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise DomainError("rotation axis must be nonzero")
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def apply_rigid(points, rot, trans, center=None) -> np.ndarray:
    """rot @ (p - center) + center + trans per point; origin-centered when
    center is None."""
    pts = np.asarray(points, dtype=float)
    if center is None:
        return pts @ np.asarray(rot).T + trans
    c = np.asarray(center, dtype=float)
    return (pts - c) @ np.asarray(rot).T + c + trans


def _unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _sample_object(rng, kind, n) -> np.ndarray:
    center = rng.uniform(-2.0, 2.0, 3)
    if kind == "box":
        half = rng.uniform(0.2, 0.6, 3)
        return center + rng.uniform(-1.0, 1.0, (n, 3)) * half
    if kind == "plane":
        basis = np.linalg.qr(rng.normal(size=(3, 3)))[0][:, :2]
        extent = rng.uniform(0.5, 1.2, 2)
        ab = rng.uniform(-1.0, 1.0, (n, 2)) * extent
        return center + ab @ basis.T
    if kind == "rod":
        axis = _unit(rng)
        perp = np.linalg.qr(np.column_stack([axis, rng.normal(size=(3, 2))]))[0][:, 1:]
        length = rng.uniform(1.0, 2.0)
        t = rng.uniform(-0.5, 0.5, n) * length
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        r = rng.uniform(0.0, 0.02, n)
        radial = (np.cos(theta) * r)[:, None] * perp[:, 0] + (np.sin(theta) * r)[:, None] * perp[:, 1]
        return center + t[:, None] * axis + radial
    raise ConfigError(f"unknown object kind {kind!r}; choose from {OBJECT_KINDS}")


def generate_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    if spec.n_objects < 1:
        raise ConfigError(f"need at least one object, got {spec.n_objects}")
    if spec.points_per_object < 4:
        raise ConfigError(f"need at least 4 points per object, got {spec.points_per_object}")
    if spec.transform not in TRANSFORM_FAMILIES:
        raise ConfigError(
            f"unknown transform {spec.transform!r}; choose from {TRANSFORM_FAMILIES}"
        )
    if spec.noise < 0.0 or not 0.0 <= spec.occlusion < 1.0:
        raise ConfigError("noise must be >= 0 and occlusion in [0, 1)")
    for kind in spec.kinds:
        if kind not in OBJECT_KINDS:
            raise ConfigError(f"unknown object kind {kind!r}")

    rng = np.random.default_rng(seed)
    max_rot = math.radians(spec.max_rotation_deg)

    # shared transform families draw once so every object moves identically
    if spec.transform == "identity":
        shared = (np.eye(3), np.zeros(3), None)
    elif spec.transform == "translate":
        shared = (np.eye(3), _unit(rng) * spec.max_translation, None)
    elif spec.transform == "rotate30":
        shared = (rotation_matrix(_unit(rng), math.radians(30.0)), np.zeros(3), None)
    else:
        shared = None

    sources, targets = [], []
    for i in range(spec.n_objects):
        pts = _sample_object(rng, spec.kinds[i % len(spec.kinds)], spec.points_per_object)
        if shared is not None:
            rot, trans, center = shared
        else:
            rot = rotation_matrix(_unit(rng), rng.uniform(0.0, max_rot))
            trans = _unit(rng) * rng.uniform(0.0, spec.max_translation)
            center = pts.mean(axis=0)
        sources.append(pts)
        targets.append(apply_rigid(pts, rot, trans, center=center))

    p_t = np.concatenate(sources, axis=0)
    moved = np.concatenate(targets, axis=0)
    gt_flow = moved - p_t

    # derive the target from the flow so p_t1 == p_t + gt_flow holds exactly,
    # matching how load_scene reconstructs it
    p_t1 = p_t + gt_flow
    if spec.noise > 0.0:
        p_t1 = p_t1 + rng.normal(0.0, spec.noise, p_t1.shape)
    if spec.occlusion > 0.0:
        n = p_t1.shape[0]
        keep = math.ceil((1.0 - spec.occlusion) * n)
        p_t1 = p_t1[np.sort(rng.choice(n, size=keep, replace=False))]

    return SyntheticScene(p_t=p_t, p_t1=p_t1, gt_flow=gt_flow, spec=spec, seed=seed)


def save_scene(path, scene: SyntheticScene):
    """One point per line: `x y z fx fy fz`, %.17g so float64 round-trips."""
    lines = []
    for p, f in zip(scene.p_t, scene.gt_flow):
        lines.append(" ".join("%.17g" % v for v in (*p, *f)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path) -> SyntheticScene:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) != 6:
                raise SceneFormatError(
                    f"{path}:{lineno}: expected 6 columns, got {len(parts)}"
                )
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise SceneFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise SceneFormatError(f"{path}: no points")
    data = np.array(rows, dtype=float)
    if not np.isfinite(data).all():
        raise SceneFormatError(f"{path}: non-finite values")
    p_t, gt_flow = data[:, :3], data[:, 3:]
    return SyntheticScene(p_t=p_t, p_t1=p_t + gt_flow, gt_flow=gt_flow)
