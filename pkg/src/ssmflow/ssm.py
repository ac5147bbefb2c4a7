"""Discrete state-space sequence kernels.

A sequence of C channels is scanned by C independent diagonal state spaces
of size S. Continuous parameters (A, B) are discretized by zero-order hold
with a timescale delta; the discrete recurrence

    h[t] = abar * h[t-1] + bbar * x[t],   y[t] = c . h[t]

is evaluated either step by step or with the blocked associative scan from
`autodiff.linear_recurrence`. Time-invariant kernels can also be
materialized as an explicit convolution filter, which serves as an
independent oracle for both scan paths.

Selective variants make delta, B, and C functions of the input sequence;
the same ZOH map is applied per step so that constant selective inputs
reproduce the time-invariant scan exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, DomainError


@dataclass
class ContinuousSSM:
    """Diagonal continuous-time parameters, one size-S state per channel.

    a must be strictly negative at initialization so the discretized
    transition is a contraction for any positive delta.
    """

    a: Tensor  # [C, S] diagonal entries
    b: Tensor  # [C, S]
    c: Tensor  # [C, S]


@dataclass
class DiscreteSSM:
    abar: Tensor  # [C, S]
    bbar: Tensor  # [C, S]
    c_out: Tensor  # [C, S]
    delta: float


@dataclass
class SelectiveInputs:
    """Per-step ZOH inputs produced by `selective_project`.

    Carries the diagonal state matrix `a` alongside the per-step
    projections so a scan can be evaluated from this record alone.
    """

    delta: Tensor  # [L, C], strictly positive
    b: Tensor  # [L, S]
    c: Tensor  # [L, S]
    a: Tensor  # [C, S]

    @property
    def length(self):
        return self.delta.shape[0]


@dataclass
class SelectiveProjParams:
    w_delta: Tensor  # [C, C]
    b_delta: Tensor  # [C]
    w_b: Tensor  # [C, S]
    w_c: Tensor  # [C, S]
    a_log: Tensor  # [C, S]; state matrix is -exp(a_log), negative by construction


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_selective_proj(rng, channels, state_size) -> SelectiveProjParams:
    """Mamba-flavored defaults: delta bias lands softplus in [1e-3, 1e-1],
    the state ladder is -(1..S) per channel."""
    delta0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
    b_delta = np.log(np.expm1(delta0))
    a_log = np.broadcast_to(
        np.log(np.arange(1, state_size + 1, dtype=np.float64)), (channels, state_size)
    ).copy()
    return SelectiveProjParams(
        w_delta=ad.parameter(uniform_init(rng, channels, (channels, channels))),
        b_delta=ad.parameter(b_delta),
        w_b=ad.parameter(uniform_init(rng, channels, (channels, state_size))),
        w_c=ad.parameter(uniform_init(rng, channels, (channels, state_size))),
        a_log=ad.parameter(a_log),
    )


def random_time_invariant_ssm(rng, channels, state_size, delta=None) -> DiscreteSSM:
    """A random stable discrete SSM for oracles and benchmarks."""
    if delta is None:
        delta = float(np.exp(rng.uniform(np.log(1e-3), np.log(1.0))))
    a = Tensor(-rng.uniform(0.05, float(state_size), (channels, state_size)))
    b = Tensor(rng.uniform(-1.0, 1.0, (channels, state_size)))
    c = Tensor(rng.uniform(-1.0, 1.0, (channels, state_size)))
    abar, bbar = discretize_zoh(a, b, delta)
    return DiscreteSSM(abar=abar, bbar=bbar, c_out=c, delta=delta)


def discretize_zoh(a, b, delta):
    """Zero-order-hold discretization of diagonal (a, b) at timescale delta.

    abar = exp(delta a); bbar = phi(delta a) * delta b where
    phi(z) = (exp(z) - 1) / z, with the small-|z| series handled inside
    `zoh_phi` so the a -> 0 limit gives abar = 1, bbar = delta b.
    """
    a, b = ad._ensure(a), ad._ensure(b)
    if isinstance(delta, Tensor):
        if not (delta.data > 0).all():
            raise DomainError("discretize_zoh: delta must be strictly positive")
        z = ad.mul(a, delta)
        db = ad.mul(b, delta)
    else:
        delta = float(delta)
        if delta <= 0:
            raise DomainError(f"discretize_zoh: delta must be positive, got {delta}")
        z = ad.mul(a, delta)
        db = ad.mul(b, delta)
    abar = ad.exp(z)
    bbar = ad.mul(ad.zoh_phi(z), db)
    return abar, bbar


def _scan(ssm, x, impl, h0=None):
    x = ad._ensure(x)
    if x.ndim != 2:
        raise DimensionError(f"scan: expected 2-D input [L, C], got {x.shape}")
    length, channels = x.shape
    if isinstance(ssm, DiscreteSSM):
        if ssm.abar.shape[0] != channels:
            raise DimensionError(
                f"scan: input has {channels} channels, SSM has {ssm.abar.shape[0]}"
            )
        abar_t = ad.tile_l(ssm.abar, length)
        bx = ad.outer_lc_cs(x, ssm.bbar)
        h = ad.linear_recurrence(abar_t, bx, h0=h0, impl=impl)
        return ad.contract_cs(h, ssm.c_out)
    if isinstance(ssm, SelectiveInputs):
        if ssm.length != length:
            raise DimensionError(
                f"scan: input length {length} does not match selective length {ssm.length}"
            )
        if ssm.delta.shape[1] != channels:
            raise DimensionError(
                f"scan: input has {channels} channels, selective inputs have"
                f" {ssm.delta.shape[1]}"
            )
        z = ad.outer_lc_cs(ssm.delta, ssm.a)
        abar = ad.exp(z)
        bx = ad.mul(ad.zoh_phi(z), ad.outer_lc_ls(ad.mul(ssm.delta, x), ssm.b))
        h = ad.linear_recurrence(abar, bx, h0=h0, impl=impl)
        return ad.contract_ls(h, ssm.c)
    raise ContractError(f"scan: unsupported SSM record {type(ssm).__name__}")


def scan_sequential(ssm, x, h0=None):
    """Left-to-right evaluation of the discrete recurrence."""
    return _scan(ssm, x, "sequential", h0=h0)


def scan_parallel(ssm, x, h0=None):
    """Same output as scan_sequential via the blocked associative scan."""
    return _scan(ssm, x, "parallel", h0=h0)


def materialize_kernel(ssm, length) -> Tensor:
    """The global convolution filter K[j, c] = sum_s c * abar^j * bbar.

    Only defined for time-invariant parameters; evaluation device, not
    differentiable (no backward rule is recorded).
    """
    if isinstance(ssm, SelectiveInputs):
        raise ContractError(
            "materialize_kernel: undefined for time-varying selective inputs"
        )
    if not isinstance(ssm, DiscreteSSM):
        raise ContractError(f"materialize_kernel: expected DiscreteSSM, got {type(ssm).__name__}")
    if length < 1:
        raise DimensionError(f"materialize_kernel: length must be >= 1, got {length}")
    powers = ssm.abar.data[None, :, :] ** np.arange(length)[:, None, None]
    weights = (ssm.c_out.data * ssm.bbar.data)[None, :, :]
    return Tensor((powers * weights).sum(axis=2))


def causal_conv_apply(kernel, x) -> Tensor:
    """y[t, c] = sum_{j <= t} K[j, c] x[t-j, c]; evaluation device."""
    kernel, x = ad._ensure(kernel), ad._ensure(x)
    if kernel.shape != x.shape:
        raise DimensionError(
            f"causal_conv_apply: shapes {kernel.shape} and {x.shape} differ"
        )
    length, channels = x.shape
    out = np.empty((length, channels))
    for c in range(channels):
        out[:, c] = np.convolve(x.data[:, c], kernel.data[:, c])[:length]
    return Tensor(out)


def selective_project(x, proj: SelectiveProjParams) -> SelectiveInputs:
    """Per-step delta/B/C from the input sequence.

    delta = softplus(x W_delta + b_delta) stays positive; B and C are plain
    projections (no bias, so zero weights give exactly zero).
    """
    x = ad._ensure(x)
    if x.ndim != 2 or x.shape[1] != proj.w_delta.shape[0]:
        raise DimensionError(
            f"selective_project: input {x.shape} does not match projection"
            f" {proj.w_delta.shape}"
        )
    delta = ad.softplus(ad.add_bias(ad.matmul(x, proj.w_delta), proj.b_delta))
    b = ad.matmul(x, proj.w_b)
    c = ad.matmul(x, proj.w_c)
    a = ad.neg(ad.exp(proj.a_log))
    return SelectiveInputs(delta=delta, b=b, c=c, a=a)


def bidirectional_scan(ssm_fwd, ssm_bwd, x, impl="sequential", h0=None):
    """y = scan(fwd, x) + reverse(scan(bwd, reverse(x))).

    For selective inputs the backward record must have been projected from
    the reversed sequence; time-invariant records can be shared freely.
    """
    x = ad._ensure(x)
    x_rev = ad.reverse0(x)
    fwd = _scan(ssm_fwd, x, impl, h0=h0)
    bwd = ad.reverse0(_scan(ssm_bwd, x_rev, impl, h0=h0))
    return ad.add(fwd, bwd)
