"""Iterative hidden-state update for flow refinement.

Each iteration fuses context, motion, and hidden features, optimizes the
hidden state globally through ordered bidirectional SSM blocks, gates the
result against the previous hidden state, and decodes a residual flow. The
operator registry swaps the hidden-state update for the ablation baselines
(pointwise conv GRU, unidirectional scan, unordered bidirectional scan,
gated fusion without ordering) under one contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .blocks import BiMambaBlockParams, Mlp, init_bimamba_block, init_mlp, mlp_forward, stack_blocks
from .errors import ConfigError, DimensionError
from .ordering import (
    OrderingScores,
    apply_permutation,
    init_score_mlp,
    order_and_restore,
    restore,
    score_points,
)
from .pointcloud import FlowField, cost_volume, init_cost_volume, warp
from .ssm import uniform_init

UPDATE_OPERATORS = ("conv-gru", "mamba-uni", "bimamba", "isu", "isu-fio")


@dataclass
class IterationState:
    h: Tensor  # [N, C] hidden features
    mf: Tensor  # [N, C2] motion features
    sf: Tensor  # [N, 3] current flow, scene units
    cf: Tensor  # [N, C] context features, fixed per level


@dataclass
class FusionParams:
    w: Tensor  # [2C + C2, C] pointwise mix of [cf, mf, h_prev]
    b: Tensor  # [C]
    gamma: Tensor  # [C]
    beta: Tensor  # [C]


@dataclass
class GateParams:
    w: Tensor  # [2C + C2, C]
    b: Tensor  # [C]


@dataclass
class GruParams:
    """Pointwise convolutional GRU over x = [cf, mf] with state h."""

    wz: Tensor  # [C + C2 + C, C]
    bz: Tensor
    wr: Tensor
    br: Tensor
    wh: Tensor
    bh: Tensor


@dataclass
class UpdateParams:
    """Everything any registered update operator may touch."""

    fusion: FusionParams
    blocks: list[BiMambaBlockParams]
    gate: GateParams
    score_mlp: Mlp
    gru: GruParams


@dataclass
class IsuParams:
    """One refinement level: correlation, motion encoding, hidden update,
    flow head."""

    cv_mlp: Mlp
    motion: Mlp
    update: UpdateParams
    head: Mlp


@dataclass
class IterationResult:
    sf: Tensor  # final flow
    h: Tensor  # final hidden state
    flows: list[Tensor]  # flow after each iteration, oldest first


def init_fusion(rng, channels, motion_channels) -> FusionParams:
    cin = 2 * channels + motion_channels
    return FusionParams(
        w=parameter(uniform_init(rng, cin, (cin, channels))),
        b=parameter(np.zeros(channels)),
        gamma=parameter(np.ones(channels)),
        beta=parameter(np.zeros(channels)),
    )


def init_gate(rng, channels, motion_channels) -> GateParams:
    cin = 2 * channels + motion_channels
    return GateParams(
        w=parameter(uniform_init(rng, cin, (cin, channels))),
        b=parameter(np.zeros(channels)),
    )


def init_gru(rng, channels, motion_channels) -> GruParams:
    cin = 2 * channels + motion_channels
    def lin():
        return parameter(uniform_init(rng, cin, (cin, channels)))
    return GruParams(
        wz=lin(), bz=parameter(np.zeros(channels)),
        wr=lin(), br=parameter(np.zeros(channels)),
        wh=lin(), bh=parameter(np.zeros(channels)),
    )


def init_decode_head(rng, channels) -> Mlp:
    return init_mlp(rng, [channels, channels, 3], zero_final=True)


def init_motion_encoder(rng, cv_channels, motion_channels) -> Mlp:
    # inputs: correlation feature, the flow vector, and its magnitude
    return init_mlp(rng, [cv_channels + 4, motion_channels, motion_channels])


def init_update_params(rng, channels, motion_channels, state_size, n_blocks) -> UpdateParams:
    return UpdateParams(
        fusion=init_fusion(rng, channels, motion_channels),
        blocks=[init_bimamba_block(rng, channels, state_size) for _ in range(n_blocks)],
        gate=init_gate(rng, channels, motion_channels),
        score_mlp=init_score_mlp(rng, channels, motion_channels),
        gru=init_gru(rng, channels, motion_channels),
    )


def init_isu_params(rng, channels, motion_channels, state_size, n_blocks) -> IsuParams:
    return IsuParams(
        cv_mlp=init_cost_volume(rng, channels, motion_channels),
        motion=init_motion_encoder(rng, motion_channels, motion_channels),
        update=init_update_params(rng, channels, motion_channels, state_size, n_blocks),
        head=init_decode_head(rng, channels),
    )


def _check_consistent_n(cf, mf, h_prev):
    n = cf.shape[0]
    if mf.shape[0] != n or h_prev.shape[0] != n:
        raise DimensionError(
            f"point counts differ: cf {cf.shape[0]}, mf {mf.shape[0]}, h {h_prev.shape[0]}"
        )


def fuse_inputs(cf: Tensor, mf: Tensor, h_prev: Tensor, params: FusionParams) -> Tensor:
    """u = LN(pointwise_conv([cf, mf, h_prev]))."""
    _check_consistent_n(cf, mf, h_prev)
    x = ad.add_bias(ad.matmul(ad.concat_last([cf, mf, h_prev]), params.w), params.b)
    return ad.layer_norm(x, params.gamma, params.beta)


def adaptive_fuse(cf, mf, h_prev, h_opt, gate: GateParams) -> Tensor:
    """w = sigmoid(pointwise_conv([cf, mf, h_prev]));
    out = (1 - w) * h_prev + w * h_opt."""
    _check_consistent_n(cf, mf, h_prev)
    if h_opt.shape != h_prev.shape:
        raise DimensionError(f"hidden shapes differ: {h_opt.shape} vs {h_prev.shape}")
    w = ad.sigmoid(ad.add_bias(ad.matmul(ad.concat_last([cf, mf, h_prev]), gate.w), gate.b))
    one = Tensor(np.ones(w.shape))
    return ad.add(ad.mul(ad.sub(one, w), h_prev), ad.mul(w, h_opt))


def optimize_hidden(u, h_prev, blocks, scores: OrderingScores, impl="parallel", bidirectional=True) -> Tensor:
    """Sort by score, run the block stack on the ordered sequence, restore."""
    u_ord, perm = order_and_restore(u, scores)
    h_ord = apply_permutation(h_prev, perm)
    out = stack_blocks(u_ord, blocks, h_ord, impl=impl, bidirectional=bidirectional)
    return restore(out, perm)


def decode_flow(hhat: Tensor, head: Mlp) -> Tensor:
    return mlp_forward(hhat, head)


def gru_update(cf, mf, h_prev, params: GruParams) -> Tensor:
    """z = sig(W_z[x,h]); r = sig(W_r[x,h]); n = tanh(W_h[x, r*h]);
    out = (1-z)*h + z*n, with x = [cf, mf]."""
    _check_consistent_n(cf, mf, h_prev)
    xh = ad.concat_last([cf, mf, h_prev])
    z = ad.sigmoid(ad.add_bias(ad.matmul(xh, params.wz), params.bz))
    r = ad.sigmoid(ad.add_bias(ad.matmul(xh, params.wr), params.br))
    xrh = ad.concat_last([cf, mf, ad.mul(r, h_prev)])
    cand = ad.tanh(ad.add_bias(ad.matmul(xrh, params.wh), params.bh))
    one = Tensor(np.ones(z.shape))
    return ad.add(ad.mul(ad.sub(one, z), h_prev), ad.mul(z, cand))


def update_hidden(operator, cf, mf, h_prev, params: UpdateParams, impl="parallel") -> Tensor:
    """Registry dispatch; every operator maps (cf, mf, h_prev) -> new hidden."""
    if operator == "conv-gru":
        return gru_update(cf, mf, h_prev, params.gru)
    if operator == "mamba-uni":
        u = fuse_inputs(cf, mf, h_prev, params.fusion)
        return stack_blocks(u, params.blocks, h_prev, impl=impl, bidirectional=False)
    if operator == "bimamba":
        u = fuse_inputs(cf, mf, h_prev, params.fusion)
        return stack_blocks(u, params.blocks, h_prev, impl=impl)
    if operator == "isu":
        u = fuse_inputs(cf, mf, h_prev, params.fusion)
        h_opt = stack_blocks(u, params.blocks, h_prev, impl=impl)
        return adaptive_fuse(cf, mf, h_prev, h_opt, params.gate)
    if operator == "isu-fio":
        u = fuse_inputs(cf, mf, h_prev, params.fusion)
        scores = score_points(cf, mf, h_prev, params.score_mlp)
        h_opt = optimize_hidden(u, h_prev, params.blocks, scores, impl=impl)
        return adaptive_fuse(cf, mf, h_prev, h_opt, params.gate)
    raise ConfigError(
        f"unknown update operator {operator!r}; choose from {UPDATE_OPERATORS}"
    )


def encode_motion(cv_feat: Tensor, sf: Tensor, motion: Mlp) -> Tensor:
    mag = ad.reshape(ad.rows_norm(sf), (sf.shape[0], 1))
    return mlp_forward(ad.concat_last([cv_feat, sf, mag]), motion)


def isu_iterate(
    p, q, f, g, cf, sf0, h0, params: IsuParams, n_iters,
    operator="isu-fio", impl="parallel", k=16,
) -> IterationResult:
    """Refine the flow n_iters times. Each pass warps the source by the
    current flow, recomputes correlation and motion features, updates the
    hidden state, and accumulates the decoded residual."""
    if n_iters < 1:
        raise ConfigError(f"need at least one iteration, got {n_iters}")
    sf, h = sf0, h0
    flows = []
    for _ in range(n_iters):
        p_warp = warp(p, FlowField(sf=sf))
        cv = cost_volume(p_warp, f, q, g, params.cv_mlp, k=k)
        mf = encode_motion(cv, sf, params.motion)
        h = update_hidden(operator, cf, mf, h, params.update, impl=impl)
        sf = ad.add(sf, decode_flow(h, params.head))
        flows.append(sf)
    return IterationResult(sf=sf, h=h, flows=flows)


def isu_parameters(params: IsuParams) -> list[Tensor]:
    """Flat list of every tensor in one level's refinement parameters."""
    from .blocks import block_parameters

    out = list(params.cv_mlp.weights) + list(params.cv_mlp.biases)
    out += list(params.motion.weights) + list(params.motion.biases)
    u = params.update
    out += [u.fusion.w, u.fusion.b, u.fusion.gamma, u.fusion.beta]
    for blk in u.blocks:
        out += block_parameters(blk)
    out += [u.gate.w, u.gate.b]
    out += list(u.score_mlp.weights) + list(u.score_mlp.biases)
    out += [u.gru.wz, u.gru.bz, u.gru.wr, u.gru.br, u.gru.wh, u.gru.bh]
    out += list(params.head.weights) + list(params.head.biases)
    return out
