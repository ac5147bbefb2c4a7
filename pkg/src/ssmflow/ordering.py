"""Feature-induced ordering.

Points carry no natural sequence order, so before a scan each point gets a
scalar score from its context, motion, and hidden features, and the sequence
is sorted by that score. After processing, the inverse permutation puts rows
back where they came from. Scores drive only the (discrete) sort; gradients
flow through the gathered payload, not the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import Mlp, init_mlp, mlp_forward
from .errors import DimensionError


@dataclass
class OrderingScores:
    values: Tensor  # [N], each in (-1, 1)


@dataclass
class Permutation:
    forward: np.ndarray  # ordered position j holds input row forward[j]
    inverse: np.ndarray  # inverse[forward[j]] = j


def init_score_mlp(rng, channels, motion_channels) -> Mlp:
    """Two-layer scorer: [cf, mf, h] -> hidden width `channels` -> 1, tanh out."""
    return init_mlp(
        rng,
        [2 * channels + motion_channels, channels, 1],
        hidden_act="silu",
        final_act="tanh",
    )


def score_points(cf: Tensor, mf: Tensor, h: Tensor, mlp: Mlp) -> OrderingScores:
    n = cf.shape[0]
    if mf.shape[0] != n or h.shape[0] != n:
        raise DimensionError(
            f"point counts differ: cf {cf.shape[0]}, mf {mf.shape[0]}, h {h.shape[0]}"
        )
    feats = ad.concat_last([cf, mf, h])
    raw = mlp_forward(feats, mlp)
    return OrderingScores(values=ad.reshape(raw, (n,)))


def order_and_restore(seq: Tensor, scores: OrderingScores) -> tuple[Tensor, Permutation]:
    """Ascending stable sort of rows by score; ties keep input order."""
    n = seq.shape[0]
    if scores.values.shape[0] != n:
        raise DimensionError(
            f"{scores.values.shape[0]} scores for {n} rows"
        )
    fwd = np.argsort(scores.values.data, kind="stable")
    inv = np.empty(n, dtype=np.int64)
    inv[fwd] = np.arange(n)
    return ad.gather_rows(seq, fwd), Permutation(forward=fwd, inverse=inv)


def apply_permutation(x: Tensor, perm: Permutation) -> Tensor:
    return ad.gather_rows(x, perm.forward)


def restore(x: Tensor, perm: Permutation) -> Tensor:
    """Undo `order_and_restore` on any same-length payload."""
    return ad.gather_rows(x, perm.inverse)
