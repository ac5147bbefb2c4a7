"""Network building blocks.

`Mlp` is a plain fully connected stack used wherever a learned pointwise map
is needed. `BiMambaBlockParams` + `bimamba_forward` implement the gated
two-branch block: one branch runs a depthwise convolution and a bidirectional
selective state-space scan, the other gates it, and a zero-initialized output
projection makes every fresh block start as the identity on its residual
input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .errors import ConfigError, DimensionError
from .ssm import (
    SelectiveProjParams,
    _scan,
    bidirectional_scan,
    init_selective_proj,
    selective_project,
    uniform_init,
)


@dataclass
class Mlp:
    """Linear stacks with `hidden_act` between layers and an optional
    `final_act` on the way out. A single-layer Mlp with no final activation
    is exactly one linear map, which several consumers rely on."""

    weights: list[Tensor]
    biases: list[Tensor]
    hidden_act: str = "silu"
    final_act: str | None = None


def init_mlp(rng, sizes, hidden_act="silu", final_act=None, zero_final=False) -> Mlp:
    if len(sizes) < 2:
        raise ConfigError("mlp needs at least an input and an output size")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(parameter(uniform_init(rng, fan_in, (fan_in, fan_out))))
        biases.append(parameter(np.zeros(fan_out)))
    if zero_final:
        weights[-1] = parameter(np.zeros((sizes[-2], sizes[-1])))
    return Mlp(weights, biases, hidden_act, final_act)


def mlp_forward(x: Tensor, mlp: Mlp) -> Tensor:
    if not mlp.weights or len(mlp.weights) != len(mlp.biases):
        raise ConfigError("mlp weight and bias lists must be non-empty and equal length")
    out = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out = ad.add_bias(ad.matmul(out, w), b)
        if i < last:
            out = ad.activation(out, mlp.hidden_act)
        elif mlp.final_act is not None:
            out = ad.activation(out, mlp.final_act)
    return out


@dataclass
class BiMambaBlockParams:
    w_in: Tensor  # [C, E]
    b_in: Tensor  # [E]
    w_gate: Tensor  # [C, E]
    b_gate: Tensor  # [E]
    dw_kernel: Tensor  # [K, E], K odd
    dw_bias: Tensor  # [E]
    fwd: SelectiveProjParams  # scan left-to-right
    bwd: SelectiveProjParams  # scan right-to-left
    w_out: Tensor  # [E, C], zero at init so the block starts as identity
    b_out: Tensor  # [C]


def init_bimamba_block(rng, channels, state_size, expand=2, kernel_width=3) -> BiMambaBlockParams:
    if kernel_width % 2 != 1:
        raise ConfigError(f"depthwise kernel width must be odd, got {kernel_width}")
    inner = expand * channels
    return BiMambaBlockParams(
        w_in=parameter(uniform_init(rng, channels, (channels, inner))),
        b_in=parameter(np.zeros(inner)),
        w_gate=parameter(uniform_init(rng, channels, (channels, inner))),
        b_gate=parameter(np.zeros(inner)),
        dw_kernel=parameter(uniform_init(rng, kernel_width, (kernel_width, inner))),
        dw_bias=parameter(np.zeros(inner)),
        fwd=init_selective_proj(rng, inner, state_size),
        bwd=init_selective_proj(rng, inner, state_size),
        w_out=parameter(np.zeros((inner, channels))),
        b_out=parameter(np.zeros(channels)),
    )


def block_parameters(p: BiMambaBlockParams) -> list[Tensor]:
    out = [p.w_in, p.b_in, p.w_gate, p.b_gate, p.dw_kernel, p.dw_bias]
    for proj in (p.fwd, p.bwd):
        out += [proj.w_delta, proj.b_delta, proj.w_b, proj.w_c, proj.a_log]
    out += [p.w_out, p.b_out]
    return out


def bimamba_forward(
    u: Tensor, params: BiMambaBlockParams, h_prev: Tensor, impl="parallel",
    bidirectional=True,
) -> Tensor:
    """s = SiLU(DW(Linear1(u))); g = SiLU(Linear2(u));
    out = Linear3(BiSSM(s) * g) + h_prev.

    With bidirectional=False only the left-to-right scan runs (the ablation
    baseline); parameters for the other direction sit unused."""
    if u.data.ndim != 2:
        raise DimensionError(f"block input must be [L, C], got {u.shape}")
    if h_prev.shape != u.shape:
        raise DimensionError(
            f"residual source shape {h_prev.shape} does not match input {u.shape}"
        )
    s = ad.add_bias(ad.matmul(u, params.w_in), params.b_in)
    s = ad.add_bias(ad.depthwise_conv1d(s, params.dw_kernel), params.dw_bias)
    s = ad.activation(s, "silu")
    g = ad.activation(ad.add_bias(ad.matmul(u, params.w_gate), params.b_gate), "silu")

    sel_f = selective_project(s, params.fwd)
    if bidirectional:
        sel_b = selective_project(ad.reverse0(s), params.bwd)
        y = bidirectional_scan(sel_f, sel_b, s, impl=impl)
    else:
        y = _scan(sel_f, s, impl)

    out = ad.add_bias(ad.matmul(ad.mul(y, g), params.w_out), params.b_out)
    return ad.add(out, h_prev)


def stack_blocks(u: Tensor, params_list, h_prev: Tensor, impl="parallel", bidirectional=True) -> Tensor:
    """Chain blocks: each block's output is the next block's input and its
    residual source."""
    if not params_list:
        raise ConfigError("stack_blocks needs at least one block")
    out = bimamba_forward(u, params_list[0], h_prev, impl=impl, bidirectional=bidirectional)
    for p in params_list[1:]:
        out = bimamba_forward(out, p, out, impl=impl, bidirectional=bidirectional)
    return out
