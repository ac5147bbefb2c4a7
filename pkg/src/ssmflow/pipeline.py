"""Coarse-to-fine scene-flow network.

Pyramid construction (FPS + KNN + learned aggregation), per-level iterative
refinement with upsampled flow/hidden hand-off, cross-frame feature
enhancement between levels, the multi-level loss, a decoupled-weight-decay
adaptive-moment optimizer with cosine learning rate, and bit-exact
checkpoint serialization.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .blocks import Mlp
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    DimensionError,
    DomainError,
    TrainingDivergedError,
)
from .pointcloud import (
    PointCloudLevel,
    SetAggregateParams,
    aggregate_neighborhoods,
    farthest_point_sample,
    init_set_aggregate,
    knn,
    upsample,
)
from .scenes import SyntheticScene
from .update import (
    UPDATE_OPERATORS,
    IsuParams,
    init_isu_params,
    isu_iterate,
)

SCAN_IMPLS = ("sequential", "parallel")


@dataclass
class NetworkConfig:
    levels: int = 2
    iterations: int = 2
    point_counts: tuple[int, ...] = (256, 64)  # finest first, strictly decreasing
    channels: int = 32
    motion_channels: int = 32
    k: int = 16
    update_operator: str = "isu-fio"
    n_blocks: int = 2
    state_size: int = 8
    scan_impl: str = "parallel"
    seed: int = 0


@dataclass
class LossWeights:
    alpha: tuple[float, ...] = (0.16, 0.08, 0.04, 0.02)  # finest level first


@dataclass
class Pyramid:
    levels: list[PointCloudLevel]  # finest first
    contexts: list[Tensor]  # per-level context features (source cloud only)


@dataclass
class ModelParams:
    feat_aggs: list[SetAggregateParams]  # per-level point-feature encoders
    ctx_aggs: list[SetAggregateParams]  # same structure, separate weights
    enhance: SetAggregateParams  # cross-frame max-pool enhancement
    isu: IsuParams  # refinement parameters, shared across levels


@dataclass
class ForwardResult:
    pyramid_p: Pyramid
    pyramid_q: Pyramid
    flows: list[list[Tensor]]  # flows[level][iteration], level 0 finest
    sf: Tensor  # final finest-level flow


def validate_config(config: NetworkConfig):
    if config.levels < 1 or config.iterations < 1:
        raise ConfigError("levels and iterations must be >= 1")
    counts = tuple(config.point_counts)
    if len(counts) != config.levels:
        raise ConfigError(
            f"{config.levels} levels need {config.levels} point counts, got {counts}"
        )
    if any(c < 1 for c in counts):
        raise ConfigError(f"point counts must be positive: {counts}")
    if any(a <= b for a, b in zip(counts, counts[1:])):
        raise ConfigError(f"point counts must strictly decrease: {counts}")
    if not 1 <= config.k <= min(counts):
        raise ConfigError(
            f"k={config.k} must fit the smallest level ({min(counts)} points)"
        )
    if min(config.channels, config.motion_channels, config.state_size, config.n_blocks) < 1:
        raise ConfigError("channel, state, and block counts must be >= 1")
    if config.update_operator not in UPDATE_OPERATORS:
        raise ConfigError(
            f"unknown update operator {config.update_operator!r};"
            f" choose from {UPDATE_OPERATORS}"
        )
    if config.scan_impl not in SCAN_IMPLS:
        raise ConfigError(f"scan_impl must be one of {SCAN_IMPLS}")


def init_model(config: NetworkConfig) -> ModelParams:
    validate_config(config)
    rng = np.random.default_rng(config.seed)
    c = config.channels
    feat_aggs, ctx_aggs = [], []
    for lvl in range(config.levels):
        cin = 1 if lvl == 0 else c
        feat_aggs.append(init_set_aggregate(rng, cin, c))
        ctx_aggs.append(init_set_aggregate(rng, cin, c))
    enhance = init_set_aggregate(rng, c, c, mode="max-pool")
    isu = init_isu_params(
        rng, c, config.motion_channels, config.state_size, config.n_blocks
    )
    return ModelParams(feat_aggs=feat_aggs, ctx_aggs=ctx_aggs, enhance=enhance, isu=isu)


def build_pyramid(points, feats, config: NetworkConfig, model: ModelParams,
                  with_context=True) -> Pyramid:
    """Subsample with FPS level by level; features aggregate the previous
    level's features over KNN groups. At matching sizes the finest level
    keeps the input rows as-is so the pyramid is the identity there."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise DimensionError(f"expected a non-empty [N, 3] cloud, got {pts.shape}")
    n = pts.shape[0]
    if config.point_counts[0] > n:
        raise DomainError(
            f"finest level wants {config.point_counts[0]} points, cloud has {n}"
        )
    src_coords = Tensor(pts)
    src_feats = ad._ensure(feats) if feats is not None else Tensor(np.ones((n, 1)))
    ctx_src = src_feats
    levels, contexts = [], []
    for lvl, count in enumerate(config.point_counts):
        if count == src_coords.shape[0]:
            idx = np.arange(count, dtype=np.int64)
        else:
            idx = farthest_point_sample(src_coords.data, count)
        centers = Tensor(src_coords.data[idx])
        nbr = knn(centers.data, src_coords.data, config.k)
        f = aggregate_neighborhoods(centers, src_coords, src_feats, nbr, model.feat_aggs[lvl])
        levels.append(PointCloudLevel(coords=centers, feats=f, parent_indices=idx))
        if with_context:
            cfeat = aggregate_neighborhoods(centers, src_coords, ctx_src, nbr, model.ctx_aggs[lvl])
            contexts.append(cfeat)
            ctx_src = cfeat
        src_coords, src_feats = centers, f
    return Pyramid(levels=levels, contexts=contexts)


def input_indices(pyramid: Pyramid) -> list[np.ndarray]:
    """Absolute indices into the raw input cloud, per level."""
    out = []
    idx = None
    for lvl in pyramid.levels:
        idx = lvl.parent_indices if idx is None else idx[lvl.parent_indices]
        out.append(idx)
    return out


def forward(model: ModelParams, p_points, q_points, config: NetworkConfig) -> ForwardResult:
    """Coarse-to-fine refinement. The coarsest level starts at zero flow with
    h = tanh(cf); each finer level receives upsampled flow, hidden state, and
    context, plus cross-frame feature enhancement around the warped source."""
    validate_config(config)
    pyr_p = build_pyramid(p_points, None, config, model, with_context=True)
    pyr_q = build_pyramid(q_points, None, config, model, with_context=False)
    n_levels = config.levels
    flows: list = [None] * n_levels
    sf = h = None
    for lvl in range(n_levels - 1, -1, -1):
        p_l = pyr_p.levels[lvl].coords
        f_l = pyr_p.levels[lvl].feats
        q_l = pyr_q.levels[lvl].coords
        g_l = pyr_q.levels[lvl].feats
        cf_l = pyr_p.contexts[lvl]
        if lvl == n_levels - 1:
            sf = Tensor(np.zeros((config.point_counts[lvl], 3)))
            h = ad.tanh(cf_l)
        else:
            coarse = pyr_p.levels[lvl + 1].coords
            sf = upsample(coarse, p_l, sf, k=min(3, coarse.shape[0]))
            h = upsample(coarse, p_l, h, k=min(3, coarse.shape[0]))
            cf_l = ad.add(
                cf_l, upsample(coarse, p_l, pyr_p.contexts[lvl + 1], k=min(3, coarse.shape[0]))
            )
            p_warp = ad.add(p_l, sf)
            f_enh = ad.add(f_l, aggregate_neighborhoods(
                p_warp, q_l, g_l, knn(p_warp.data, q_l.data, config.k),
                model.enhance, "max-pool"))
            g_enh = ad.add(g_l, aggregate_neighborhoods(
                q_l, p_warp, f_l, knn(q_l.data, p_warp.data, config.k),
                model.enhance, "max-pool"))
            f_l, g_l = f_enh, g_enh
        result = isu_iterate(
            p_l, q_l, f_l, g_l, cf_l, sf, h, model.isu, config.iterations,
            operator=config.update_operator, impl=config.scan_impl, k=config.k,
        )
        flows[lvl] = result.flows
        sf, h = result.sf, result.h
    return ForwardResult(pyramid_p=pyr_p, pyramid_q=pyr_q, flows=flows, sf=sf)


def flow_loss(flow_lists, gt_flow, weights: LossWeights, pyramid: Pyramid) -> Tensor:
    """Sum over levels and iterations of the per-point mean L2 error, each
    level weighted by its alpha (finest first)."""
    if any(a <= 0 for a in weights.alpha):
        raise ConfigError(f"loss weights must be positive: {weights.alpha}")
    if len(flow_lists) > len(weights.alpha):
        raise ConfigError(
            f"{len(flow_lists)} levels but only {len(weights.alpha)} loss weights"
        )
    gt = np.asarray(gt_flow, dtype=float)
    total = None
    for lvl, (per_iter, idx) in enumerate(zip(flow_lists, input_indices(pyramid))):
        gt_l = Tensor(gt[idx])
        for sf in per_iter:
            term = ad.mul(ad.mean_all(ad.rows_norm(ad.sub(sf, gt_l))), weights.alpha[lvl])
            total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# Parameter traversal and checkpoints


def named_tensors(obj, prefix="") -> list[tuple[str, Tensor]]:
    """Deterministic (name, tensor) walk over dataclasses, lists, and dicts.
    Defines both checkpoint order and optimizer slot order."""
    if isinstance(obj, Tensor):
        return [(prefix or "param", obj)]
    out = []
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            sub = f"{prefix}.{f.name}" if prefix else f.name
            out += named_tensors(getattr(obj, f.name), sub)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            sub = f"{prefix}.{i}" if prefix else str(i)
            out += named_tensors(item, sub)
    elif isinstance(obj, dict):
        for key in sorted(obj):
            sub = f"{prefix}.{key}" if prefix else str(key)
            out += named_tensors(obj[key], sub)
    return out


def save_checkpoint(path, model):
    """`name=(d0,d1)` header lines, a blank line, then little-endian float64
    payloads in header order."""
    pairs = named_tensors(model)
    with open(path, "wb") as fh:
        for name, t in pairs:
            shape = "(" + ",".join(str(d) for d in t.shape) + ")"
            fh.write(f"{name}={shape}\n".encode("ascii"))
        fh.write(b"\n")
        for _, t in pairs:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _parse_shape(text):
    if not (text.startswith("(") and text.endswith(")")):
        return None
    inner = text[1:-1]
    if not inner:
        return ()
    try:
        return tuple(int(d) for d in inner.split(","))
    except ValueError:
        return None


def load_checkpoint(path, model):
    """Restore parameters in place; any name, order, shape, or size
    disagreement fails loudly naming the first offender."""
    pairs = named_tensors(model)
    with open(path, "rb") as fh:
        header = []
        while True:
            raw = fh.readline()
            if not raw:
                raise CheckpointMismatchError("<header>", "file ended before blank line")
            line = raw.decode("ascii").rstrip("\n")
            if not line:
                break
            name, sep, shape_text = line.partition("=")
            shape = _parse_shape(shape_text)
            if not sep or shape is None:
                raise CheckpointMismatchError(name or "<header>", f"unparseable record {line!r}")
            header.append((name, shape))
        for i in range(max(len(header), len(pairs))):
            if i >= len(header):
                raise CheckpointMismatchError(pairs[i][0], "missing from checkpoint")
            if i >= len(pairs):
                raise CheckpointMismatchError(header[i][0], "not a model parameter")
            name, shape = header[i]
            want_name, t = pairs[i]
            if name != want_name:
                raise CheckpointMismatchError(name, f"expected {want_name!r} at position {i}")
            if shape != t.shape:
                raise CheckpointMismatchError(name, f"shape {shape} does not match {t.shape}")
        for name, t in pairs:
            raw = fh.read(t.size * 8)
            if len(raw) != t.size * 8:
                raise CheckpointMismatchError(name, "payload truncated")
            t.data[...] = np.frombuffer(raw, dtype="<f8").reshape(t.shape)
        if fh.read(1):
            raise CheckpointMismatchError("<payload>", "trailing bytes after parameters")


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class TrainState:
    names: list[str]
    params: list[Tensor]
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    total_steps: int = 100
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
        if not self.v:
            self.v = [np.zeros_like(p.data) for p in self.params]


def init_train_state(model, total_steps, base_lr=1e-3, min_lr=1e-5,
                     weight_decay=1e-4) -> TrainState:
    pairs = named_tensors(model)
    for _, t in pairs:
        t.requires_grad = True
    return TrainState(
        names=[n for n, _ in pairs],
        params=[t for _, t in pairs],
        total_steps=total_steps,
        base_lr=base_lr,
        min_lr=min_lr,
        weight_decay=weight_decay,
    )


def cosine_lr(step, total_steps, base_lr, min_lr) -> float:
    if total_steps <= 0:
        return base_lr
    progress = min(step / total_steps, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def adamw_step(state: TrainState, lr: float):
    """Adaptive-moment update with decoupled weight decay."""
    t = state.step + 1
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.data)
    state.step = t


def train_step(state: TrainState, model: ModelParams, scenes, config: NetworkConfig,
               weights: LossWeights | None = None) -> tuple[float, float]:
    """One optimizer step over a scene batch (fixed order, deterministic).
    Returns (loss value, learning rate used)."""
    if not scenes:
        raise ConfigError("empty scene batch")
    weights = weights if weights is not None else LossWeights()
    for p in state.params:
        p.grad = None
    with Tape() as tape:
        total = None
        for scene in scenes:
            result = forward(model, scene.p_t, scene.p_t1, config)
            term = flow_loss(result.flows, scene.gt_flow, weights, result.pyramid_p)
            total = term if total is None else ad.add(total, term)
        if len(scenes) > 1:
            total = ad.mul(total, 1.0 / len(scenes))
    value = float(total.data)
    if not np.isfinite(value):
        scene_id = scenes[0].seed if scenes[0].seed is not None else 0
        raise TrainingDivergedError(step=state.step, scene_id=scene_id, value=value)
    backward(tape, total)
    lr = cosine_lr(state.step, state.total_steps, state.base_lr, state.min_lr)
    adamw_step(state, lr)
    return value, lr


def train_loop(model, scenes, config, steps, base_lr=1e-3, min_lr=1e-5,
               weight_decay=1e-4, log_every=0) -> list[tuple[int, float, float]]:
    """Cycle through scenes one per step. Returns (step, lr, loss) rows."""
    state = init_train_state(model, steps, base_lr, min_lr, weight_decay)
    rows = []
    for i in range(steps):
        batch = [scenes[i % len(scenes)]]
        value, lr = train_step(state, model, batch, config)
        rows.append((i, lr, value))
        if log_every and (i % log_every == 0 or i == steps - 1):
            print(f"step {i:5d} lr {lr:.6g} loss {value:.6g}")
    return rows


def predict(model: ModelParams, scene: SyntheticScene, config: NetworkConfig,
            n_iters=None) -> tuple[np.ndarray, np.ndarray]:
    """Predicted flow at the finest level and the matching ground truth."""
    cfg = dataclasses.replace(config, iterations=n_iters) if n_iters else config
    result = forward(model, scene.p_t, scene.p_t1, cfg)
    idx = input_indices(result.pyramid_p)[0]
    return result.sf.data.copy(), scene.gt_flow[idx]


def predict_trajectory(model: ModelParams, scene: SyntheticScene,
                       config: NetworkConfig, n_iters=None):
    """Finest-level flow after each refinement iteration of a single run,
    plus the matching ground truth. The last entry equals predict()'s flow
    for the same iteration count."""
    cfg = dataclasses.replace(config, iterations=n_iters) if n_iters else config
    result = forward(model, scene.p_t, scene.p_t1, cfg)
    idx = input_indices(result.pyramid_p)[0]
    return [sf.data.copy() for sf in result.flows[0]], scene.gt_flow[idx]
