"""Geometric primitives for point-cloud processing.

Index-producing ops (sampling, neighbor search) work on raw coordinates and
return numpy index arrays; feature-producing ops run through the autodiff
layer so gradients reach the learned parameters. Everything is brute force
on purpose: point counts stay in the hundreds here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import Mlp, init_mlp, mlp_forward
from .errors import ContractError, DimensionError, DomainError

UPSAMPLE_EPS = 1e-8
REL_ERROR_GUARD = 1e-12


@dataclass
class PointCloudLevel:
    coords: Tensor  # [N, 3]
    feats: Tensor  # [N, C]
    parent_indices: np.ndarray | None = None  # rows of the next finer level


@dataclass
class FlowField:
    sf: Tensor  # [N, 3], aligned with a source PointCloudLevel


@dataclass
class MetricsReport:
    epe3d: float
    acc3ds: float
    acc3dr: float
    outliers: float


def _coords_array(coords) -> np.ndarray:
    arr = coords.data if isinstance(coords, Tensor) else np.asarray(coords, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"expected [N, 3] coordinates, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DomainError("coordinates must be finite")
    return arr


def farthest_point_sample(coords, m: int) -> np.ndarray:
    """Greedy max-min subset. The seed is the lexicographically smallest
    (x, y, z) point, which keeps the choice independent of input row order."""
    pts = _coords_array(coords)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise DomainError(f"cannot sample {m} points from {n}")
    seed = int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed
    dist2 = ((pts - pts[seed]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dist2))
        chosen[i] = nxt
        dist2 = np.minimum(dist2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def knn(query, ref, k: int) -> np.ndarray:
    """k nearest reference rows per query row, ascending distance, ties by
    reference index."""
    q = _coords_array(query)
    r = _coords_array(ref)
    if not 1 <= k <= r.shape[0]:
        raise DomainError(f"k={k} with {r.shape[0]} reference points")
    d2 = ((q[:, None, :] - r[None, :, :]) ** 2).sum(axis=2)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


@dataclass
class SetAggregateParams:
    mlp: Mlp  # per-neighbor map over [feat, offset]
    weight_net: Mlp | None = None  # offset -> scalar weight; weighted-sum only


def init_set_aggregate(
    rng, feat_channels, out_channels, mode="weighted-sum", weight_hidden=8
) -> SetAggregateParams:
    mlp = init_mlp(rng, [feat_channels + 3, out_channels, out_channels])
    weight_net = None
    if mode == "weighted-sum":
        weight_net = init_mlp(rng, [3, weight_hidden, 1])
    return SetAggregateParams(mlp=mlp, weight_net=weight_net)


def aggregate_neighborhoods(
    centers, coords, feats, idx, params: SetAggregateParams, mode="weighted-sum"
) -> Tensor:
    """Batched aggregation: for each center, map its neighbors' [feat, offset]
    through the MLP and reduce over the neighborhood."""
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[1] < 1:
        raise ContractError(f"neighbor index must be [M, k] with k >= 1, got {idx.shape}")
    k = idx.shape[1]
    nbr_feats = ad.gather_rows(feats, idx)
    nbr_coords = ad.gather_rows(coords, idx)
    offsets = ad.sub(nbr_coords, ad.expand_mid(centers, k))
    z = mlp_forward(ad.concat_last([nbr_feats, offsets]), params.mlp)
    if mode == "weighted-sum":
        if params.weight_net is None:
            raise ContractError("weighted-sum aggregation needs a weight net")
        w = mlp_forward(offsets, params.weight_net)
        return ad.sum_mid(ad.scale_mid(z, ad.reshape(w, idx.shape)))
    if mode == "max-pool":
        return ad.maxpool_mid(z)
    raise ContractError(f"unknown aggregation mode {mode!r}")


def set_aggregate(center, nbr_coords, nbr_feats, params, mode="weighted-sum") -> Tensor:
    """Single-neighborhood view of `aggregate_neighborhoods`."""
    nbr_coords = ad._ensure(nbr_coords)
    nbr_feats = ad._ensure(nbr_feats)
    if nbr_coords.shape[0] == 0:
        raise ContractError("empty neighborhood")
    if nbr_coords.shape[0] != nbr_feats.shape[0]:
        raise DimensionError(
            f"{nbr_coords.shape[0]} neighbor coords vs {nbr_feats.shape[0]} features"
        )
    k = nbr_coords.shape[0]
    center = ad._ensure(center)
    out = aggregate_neighborhoods(
        ad.reshape(center, (1, 3)),
        nbr_coords,
        nbr_feats,
        np.arange(k, dtype=np.int64)[None, :],
        params,
        mode,
    )
    return ad.reshape(out, (out.shape[1],))


def cost_volume(p, f, q, g, params: Mlp, k=16) -> Tensor:
    """Local correlation: each source point gathers its k nearest target
    points, maps each pair's [f_i, g_j, q_j - p_i] through the MLP, and
    max-pools over the pairs."""
    idx = knn(p, q, k)
    f_rep = ad.expand_mid(f, k)
    nbr_g = ad.gather_rows(g, idx)
    offsets = ad.sub(ad.gather_rows(q, idx), ad.expand_mid(p, k))
    z = mlp_forward(ad.concat_last([f_rep, nbr_g, offsets]), params)
    return ad.maxpool_mid(z)


def init_cost_volume(rng, feat_channels, out_channels) -> Mlp:
    return init_mlp(rng, [2 * feat_channels + 3, out_channels, out_channels])


def warp(p: Tensor, sf: FlowField) -> Tensor:
    p = ad._ensure(p)
    if p.shape != sf.sf.shape:
        raise DimensionError(f"cannot warp {p.shape} by flow {sf.sf.shape}")
    return ad.add(p, sf.sf)


def upsample(sparse_coords, dense_coords, values: Tensor, k=3) -> Tensor:
    """Inverse-distance interpolation from sparse rows onto dense positions.
    Weights w_i = 1/(d_i + eps), normalized per dense point."""
    sp = _coords_array(sparse_coords)
    dn = _coords_array(dense_coords)
    idx = knn(dn, sp, k)
    d = np.linalg.norm(dn[:, None, :] - sp[idx], axis=2)
    w = 1.0 / (d + UPSAMPLE_EPS)
    w = w / w.sum(axis=1, keepdims=True)
    nbr_vals = ad.gather_rows(values, idx)
    return ad.sum_mid(ad.scale_mid(nbr_vals, Tensor(w)))


def evaluate(sf_pred, sf_gt) -> MetricsReport:
    """End-point error plus the standard thresholded accuracy/outlier rates.

    epe3d: mean Euclidean error. acc3ds: error < 0.05 or relative < 5%.
    acc3dr: error < 0.1 or relative < 10%. outliers: error > 0.3 or
    relative > 10%."""
    pred = sf_pred.data if isinstance(sf_pred, Tensor) else np.asarray(sf_pred, float)
    gt = sf_gt.data if isinstance(sf_gt, Tensor) else np.asarray(sf_gt, float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise DimensionError(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=1)
    rel = err / np.maximum(np.linalg.norm(gt, axis=1), REL_ERROR_GUARD)
    return MetricsReport(
        epe3d=float(err.mean()),
        acc3ds=float(((err < 0.05) | (rel < 0.05)).mean()),
        acc3dr=float(((err < 0.1) | (rel < 0.1)).mean()),
        outliers=float(((err > 0.3) | (rel > 0.1)).mean()),
    )
