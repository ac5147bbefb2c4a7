"""Dense float64 tensors with a reverse-mode autodiff tape.

The tensor surface is deliberately small: explicit shapes, row-major float64
data, and no broadcasting beyond scalar-times-tensor. Every differentiable
operation validates its input shapes, computes the forward value with numpy,
and registers a backward closure on the active tape. `backward` replays the
records in reverse topological order, so each node's gradient is visited
exactly once per consuming edge.

The structured three-axis products used by the scan kernels (`outer_lc_cs`
and friends) are first-class operations rather than broadcast expressions,
which keeps every backward rule explicit and auditable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    NumericError,
)

SOFTPLUS_LINEAR_CUTOFF = 30.0
PHI_SERIES_CUTOFF = 1e-4
SCAN_BLOCK = 64

ACTIVATION_KINDS = ("sigmoid", "tanh", "silu", "softplus", "relu")


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


# ---------------------------------------------------------------------------
# Tape machinery


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations for one forward pass.

    Usable as a context manager; operations executed inside the block are
    recorded if any of their inputs is tracked (a gradient leaf, or itself
    produced on this tape).
    """

    def __init__(self):
        self.records = []
        self._produced = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise ContractError("tape stack corrupted: unbalanced enter/exit")
        return False


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _tracked(t, tape) -> bool:
    return t.requires_grad or id(t) in tape._produced


def record_op(out: Tensor, inputs, backward_rule) -> Tensor:
    """Register `out = op(inputs)` with its backward rule on the active tape.

    `backward_rule(g)` must return one gradient array (or None) per input,
    in input order. Recording is skipped when no tape is active or no input
    is tracked, so inference-only code pays nothing.
    """
    tape = active_tape()
    if tape is None:
        return out
    if not any(isinstance(t, Tensor) and _tracked(t, tape) for t in inputs):
        return out
    tape.records.append((out, tuple(inputs), backward_rule))
    tape._produced.add(id(out))
    return out


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into `.grad` of every tracked leaf."""
    if not isinstance(loss, Tensor) or loss.shape != ():
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape!r}")
    if id(loss) not in tape._produced:
        raise ContractError("loss was not produced on this tape")
    flowing = {id(loss): np.array(1.0)}
    for out, inputs, rule in reversed(tape.records):
        g = flowing.pop(id(out), None)
        if g is None:
            continue
        grads = rule(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not isinstance(t, Tensor):
                continue
            if id(t) in tape._produced:
                acc = flowing.get(id(t))
                flowing[id(t)] = gi if acc is None else acc + gi
            elif t.requires_grad:
                t.grad = np.array(gi) if t.grad is None else t.grad + gi


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b):
    a = _ensure(a)
    if isinstance(b, (int, float)):
        out = Tensor(a.data + float(b))
        return record_op(out, (a,), lambda g: (g,))
    b = _ensure(b)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return record_op(out, (a, b), lambda g: (g, g))


def sub(a, b):
    a = _ensure(a)
    if isinstance(b, (int, float)):
        out = Tensor(a.data - float(b))
        return record_op(out, (a,), lambda g: (g,))
    b = _ensure(b)
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record_op(out, (a, b), lambda g: (g, -g))


def neg(a):
    a = _ensure(a)
    out = Tensor(-a.data)
    return record_op(out, (a,), lambda g: (-g,))


def mul(a, b):
    a = _ensure(a)
    if isinstance(b, (int, float)):
        s = float(b)
        out = Tensor(a.data * s)
        return record_op(out, (a,), lambda g: (g * s,))
    b = _ensure(b)
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record_op(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a = _ensure(a)
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    b = _ensure(b)
    _same_shape(a, b, "div")
    out = Tensor(a.data / b.data)

    def rule(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return record_op(out, (a, b), rule)


def exp(a):
    a = _ensure(a)
    out = Tensor(np.exp(a.data))
    return record_op(out, (a,), lambda g: (g * out.data,))


# ---------------------------------------------------------------------------
# Linear algebra and normalization


def matmul(a, b):
    """a @ b with 2-D `b`; `a` may carry extra leading axes."""
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        ga = g @ b.data.T
        k = a.shape[-1]
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record_op(out, (a, b), rule)


def add_bias(x, b):
    """x[..., C] + b[C], the only sanctioned cross-rank addition."""
    x, b = _ensure(x), _ensure(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape} differ")
    out = Tensor(x.data + b.data)

    def rule(g):
        axes = tuple(range(g.ndim - 1))
        return g, g.sum(axis=axes)

    return record_op(out, (x, b), rule)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization of a 2-D tensor, scaled and shifted."""
    x, gamma, beta = _ensure(x), _ensure(gamma), _ensure(beta)
    if x.ndim != 2:
        raise DimensionError(f"layer_norm: expected 2-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not fit {x.shape}"
        )
    if eps <= 0:
        raise DomainError(f"layer_norm: eps must be positive, got {eps}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def rule(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return record_op(out, (x, gamma, beta), rule)


def activation(x, kind):
    x = _ensure(x)
    if kind not in ACTIVATION_KINDS:
        raise ConfigError(f"unknown activation kind {kind!r}")
    v = x.data
    if kind == "sigmoid":
        out = Tensor(_sigmoid_np(v))
        rule = lambda g: (g * out.data * (1.0 - out.data),)
    elif kind == "tanh":
        out = Tensor(np.tanh(v))
        rule = lambda g: (g * (1.0 - out.data * out.data),)
    elif kind == "silu":
        s = _sigmoid_np(v)
        out = Tensor(v * s)
        rule = lambda g: (g * s * (1.0 + v * (1.0 - s)),)
    elif kind == "softplus":
        big = v > SOFTPLUS_LINEAR_CUTOFF
        out = Tensor(np.where(big, v, np.log1p(np.exp(np.minimum(v, SOFTPLUS_LINEAR_CUTOFF)))))
        rule = lambda g: (g * _sigmoid_np(v),)
    else:  # relu
        out = Tensor(np.maximum(v, 0.0))
        rule = lambda g: (g * (v > 0.0),)
    return record_op(out, (x,), rule)


def _sigmoid_np(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    return activation(x, "sigmoid")


def tanh(x):
    return activation(x, "tanh")


def silu(x):
    return activation(x, "silu")


def softplus(x):
    return activation(x, "softplus")


def relu(x):
    return activation(x, "relu")


def depthwise_conv1d(x, kernel):
    """Per-channel 1-D convolution, zero padded to preserve length.

    x: [L, C], kernel: [K, C] with K odd. Channel c of the output sees only
    channel c of the input; there is no cross-channel mixing.
    """
    x, kernel = _ensure(x), _ensure(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise DimensionError(
            f"depthwise_conv1d: expected 2-D tensors, got {x.shape} and {kernel.shape}"
        )
    kwidth, kc = kernel.shape
    if kwidth % 2 == 0:
        raise ConfigError(f"depthwise_conv1d: kernel width must be odd, got {kwidth}")
    if kc != x.shape[1]:
        raise DimensionError(
            f"depthwise_conv1d: channel mismatch {x.shape} vs {kernel.shape}"
        )
    length = x.shape[0]
    pad = (kwidth - 1) // 2
    xp = np.zeros((length + 2 * pad, kc))
    xp[pad : pad + length] = x.data
    out_v = np.zeros_like(x.data)
    for j in range(kwidth):
        out_v += kernel.data[j] * xp[j : j + length]
    out = Tensor(out_v)

    def rule(g):
        dk = np.empty_like(kernel.data)
        dxp = np.zeros_like(xp)
        for j in range(kwidth):
            dk[j] = (g * xp[j : j + length]).sum(axis=0)
            dxp[j : j + length] += g * kernel.data[j]
        return dxp[pad : pad + length], dk

    return record_op(out, (x, kernel), rule)


# ---------------------------------------------------------------------------
# Shape plumbing


def concat_last(parts):
    """Concatenate along the trailing axis; leading shapes must agree."""
    parts = [_ensure(p) for p in parts]
    if not parts:
        raise ConfigError("concat_last: empty input list")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead or p.ndim != parts[0].ndim:
            raise DimensionError(
                f"concat_last: leading shapes differ: {[p.shape for p in parts]}"
            )
    widths = [p.shape[-1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    offsets = np.cumsum([0] + widths)

    def rule(g):
        return tuple(
            g[..., offsets[i] : offsets[i + 1]] for i in range(len(parts))
        )

    return record_op(out, tuple(parts), rule)


def gather_rows(x, idx):
    """x[idx] along the leading axis; backward scatter-adds duplicates."""
    x = _ensure(x)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError("gather_rows: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(
            f"gather_rows: index out of range for leading extent {x.shape[0]}"
        )
    out = Tensor(x.data[idx])

    def rule(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return record_op(out, (x,), rule)


def expand_mid(x, k):
    """Tile x[N, C] to [N, k, C]; backward sums over the tiled axis."""
    x = _ensure(x)
    if x.ndim != 2:
        raise DimensionError(f"expand_mid: expected 2-D input, got {x.shape}")
    if k < 1:
        raise ConfigError(f"expand_mid: k must be >= 1, got {k}")
    out = Tensor(np.repeat(x.data[:, None, :], k, axis=1))
    return record_op(out, (x,), lambda g: (g.sum(axis=1),))


def scale_mid(v, w):
    """v[N, k, C] * w[N, k] broadcast over the channel axis."""
    v, w = _ensure(v), _ensure(w)
    if v.ndim != 3 or w.shape != v.shape[:2]:
        raise DimensionError(f"scale_mid: shapes {v.shape} and {w.shape} differ")
    out = Tensor(v.data * w.data[:, :, None])

    def rule(g):
        return g * w.data[:, :, None], (g * v.data).sum(axis=2)

    return record_op(out, (v, w), rule)


def sum_mid(v):
    """Sum v[N, k, C] over the middle axis."""
    v = _ensure(v)
    if v.ndim != 3:
        raise DimensionError(f"sum_mid: expected 3-D input, got {v.shape}")
    k = v.shape[1]
    out = Tensor(v.data.sum(axis=1))
    return record_op(out, (v,), lambda g: (np.repeat(g[:, None, :], k, axis=1),))


def maxpool_mid(v):
    """Max of v[N, k, C] over the middle axis; ties route to the first max."""
    v = _ensure(v)
    if v.ndim != 3:
        raise DimensionError(f"maxpool_mid: expected 3-D input, got {v.shape}")
    am = v.data.argmax(axis=1)
    out = Tensor(v.data.max(axis=1))

    def rule(g):
        dv = np.zeros_like(v.data)
        np.put_along_axis(dv, am[:, None, :], g[:, None, :], axis=1)
        return (dv,)

    return record_op(out, (v,), rule)


def reshape(x, shape):
    x = _ensure(x)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape))
    return record_op(out, (x,), lambda g: (g.reshape(x.shape),))


def reverse0(x):
    """Flip along the leading axis."""
    x = _ensure(x)
    out = Tensor(x.data[::-1].copy())
    return record_op(out, (x,), lambda g: (g[::-1].copy(),))


# ---------------------------------------------------------------------------
# Reductions


def sum_all(x):
    x = _ensure(x)
    out = Tensor(np.array(x.data.sum()))
    return record_op(out, (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x):
    x = _ensure(x)
    if x.size == 0:
        raise DimensionError("mean_all: empty tensor")
    n = x.size
    out = Tensor(np.array(x.data.mean()))
    return record_op(out, (x,), lambda g: (np.full(x.shape, float(g) / n),))


def rows_norm(x):
    """Euclidean norm of each row of a 2-D tensor. Zero rows get a zero
    subgradient, which keeps perfectly matched flow vectors at exactly zero
    loss without producing NaNs."""
    x = _ensure(x)
    if x.ndim != 2:
        raise DimensionError(f"rows_norm: expected 2-D input, got {x.shape}")
    n = np.sqrt((x.data * x.data).sum(axis=1))
    out = Tensor(n)

    def rule(g):
        denom = np.where(n > 0.0, n, 1.0)[:, None]
        direction = np.where(n[:, None] > 0.0, x.data / denom, 0.0)
        return (g[:, None] * direction,)

    return record_op(out, (x,), rule)


# ---------------------------------------------------------------------------
# Structured products for the scan kernels
#
# Shape convention: L is sequence length, C the channel count, S the state
# size per channel. These products are the only places the three axes meet.


def outer_lc_cs(x, w):
    """out[l,c,s] = x[l,c] * w[c,s]."""
    x, w = _ensure(x), _ensure(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"outer_lc_cs: shapes {x.shape} and {w.shape} differ")
    out = Tensor(x.data[:, :, None] * w.data[None, :, :])

    def rule(g):
        return (g * w.data[None, :, :]).sum(axis=2), (g * x.data[:, :, None]).sum(axis=0)

    return record_op(out, (x, w), rule)


def outer_lc_ls(x, b):
    """out[l,c,s] = x[l,c] * b[l,s]."""
    x, b = _ensure(x), _ensure(b)
    if x.ndim != 2 or b.ndim != 2 or x.shape[0] != b.shape[0]:
        raise DimensionError(f"outer_lc_ls: shapes {x.shape} and {b.shape} differ")
    out = Tensor(x.data[:, :, None] * b.data[:, None, :])

    def rule(g):
        return (g * b.data[:, None, :]).sum(axis=2), (g * x.data[:, :, None]).sum(axis=1)

    return record_op(out, (x, b), rule)


def tile_l(w, length):
    """Repeat w[C,S] along a new leading axis of the given length."""
    w = _ensure(w)
    if w.ndim != 2:
        raise DimensionError(f"tile_l: expected 2-D input, got {w.shape}")
    if length < 1:
        raise DimensionError(f"tile_l: length must be >= 1, got {length}")
    out = Tensor(np.broadcast_to(w.data, (length,) + w.shape).copy())
    return record_op(out, (w,), lambda g: (g.sum(axis=0),))


def contract_cs(h, c):
    """out[l,c] = sum_s h[l,c,s] * c[c,s] (time-invariant readout)."""
    h, c = _ensure(h), _ensure(c)
    if h.ndim != 3 or c.shape != h.shape[1:]:
        raise DimensionError(f"contract_cs: shapes {h.shape} and {c.shape} differ")
    out = Tensor((h.data * c.data[None, :, :]).sum(axis=2))

    def rule(g):
        return g[:, :, None] * c.data[None, :, :], (g[:, :, None] * h.data).sum(axis=0)

    return record_op(out, (h, c), rule)


def contract_ls(h, c):
    """out[l,c] = sum_s h[l,c,s] * c[l,s] (per-step readout)."""
    h, c = _ensure(h), _ensure(c)
    if h.ndim != 3 or c.ndim != 2 or c.shape != (h.shape[0], h.shape[2]):
        raise DimensionError(f"contract_ls: shapes {h.shape} and {c.shape} differ")
    out = Tensor((h.data * c.data[:, None, :]).sum(axis=2))

    def rule(g):
        return g[:, :, None] * c.data[:, None, :], (g[:, :, None] * h.data).sum(axis=1)

    return record_op(out, (h, c), rule)


# ---------------------------------------------------------------------------
# ZOH helper


def zoh_phi(z):
    """phi(z) = (exp(z) - 1) / z with a series branch for small |z|.

    The series 1 + z/2 + z^2/6 takes over below |z| = 1e-4, removing the
    z = 0 singularity; expm1 keeps the main branch fully accurate just above
    the cutoff.
    """
    z = _ensure(z)
    v = z.data
    small = np.abs(v) < PHI_SERIES_CUTOFF
    safe = np.where(small, 1.0, v)
    phi = np.where(small, 1.0 + v / 2.0 + v * v / 6.0, np.expm1(safe) / safe)
    out = Tensor(phi)

    def rule(g):
        dsmall = 0.5 + v / 3.0 + v * v / 8.0
        dbig = ((safe - 1.0) * np.exp(safe) + 1.0) / (safe * safe)
        return (g * np.where(small, dsmall, dbig),)

    return record_op(out, (z,), rule)


# ---------------------------------------------------------------------------
# Linear recurrence h[t] = a[t] * h[t-1] + b[t]


def _scan_seq_np(a, b, h0):
    out = np.empty_like(b)
    prev = h0
    for t in range(a.shape[0]):
        prev = a[t] * prev + b[t]
        out[t] = prev
    return out


def _scan_par_np(a, b, h0):
    """Blocked evaluation of the recurrence via the associative pair product
    (a1, b1) o (a2, b2) = (a2*a1, a2*b1 + b2).

    Each block of SCAN_BLOCK steps is reduced sequentially (vectorized across
    blocks); block aggregates are combined with a doubling tree scan; entry
    states then finish each block locally.
    """
    length = a.shape[0]
    rest = a.shape[1:]
    nb = -(-length // SCAN_BLOCK)
    padded = nb * SCAN_BLOCK
    if padded != length:
        a = np.concatenate([a, np.ones((padded - length,) + rest)], axis=0)
        b = np.concatenate([b, np.zeros((padded - length,) + rest)], axis=0)
    ab = a.reshape((nb, SCAN_BLOCK) + rest)
    bb = b.reshape((nb, SCAN_BLOCK) + rest)
    cum_a = np.empty_like(ab)
    local = np.empty_like(bb)
    pa = np.ones((nb,) + rest)
    pb = np.zeros((nb,) + rest)
    for j in range(SCAN_BLOCK):
        pa = ab[:, j] * pa
        pb = ab[:, j] * pb + bb[:, j]
        cum_a[:, j] = pa
        local[:, j] = pb
    # inclusive tree scan over the per-block aggregate pairs
    agg_a = cum_a[:, -1].copy()
    agg_b = local[:, -1].copy()
    step = 1
    while step < nb:
        new_b = agg_b.copy()
        new_a = agg_a.copy()
        new_b[step:] = agg_a[step:] * agg_b[:-step] + agg_b[step:]
        new_a[step:] = agg_a[step:] * agg_a[:-step]
        agg_a, agg_b = new_a, new_b
        step *= 2
    entry = np.empty((nb,) + rest)
    entry[0] = h0
    if nb > 1:
        entry[1:] = agg_a[:-1] * h0 + agg_b[:-1]
    h = cum_a * entry[:, None] + local
    return h.reshape((padded,) + rest)[:length]


_SCAN_IMPLS = {"sequential": _scan_seq_np, "parallel": _scan_par_np}


def linear_recurrence(abar, bx, h0=None, impl="sequential"):
    """Evaluate h[t] = abar[t] * h[t-1] + bx[t] along the leading axis.

    abar and bx share shape [L, ...]; h0 has the trailing shape and defaults
    to zeros. The backward pass is the adjoint recurrence
    lam[t] = g[t] + abar[t+1] * lam[t+1], evaluated with the same
    implementation as the forward pass.
    """
    abar, bx = _ensure(abar), _ensure(bx)
    if abar.shape != bx.shape:
        raise DimensionError(
            f"linear_recurrence: shapes {abar.shape} and {bx.shape} differ"
        )
    if abar.ndim < 1 or abar.shape[0] < 1:
        raise DimensionError("linear_recurrence: need a non-empty leading axis")
    if impl not in _SCAN_IMPLS:
        raise ConfigError(f"unknown scan implementation {impl!r}")
    scan = _SCAN_IMPLS[impl]
    rest = abar.shape[1:]
    if h0 is None:
        h0_arr = np.zeros(rest)
        inputs = (abar, bx)
    else:
        h0 = _ensure(h0)
        if h0.shape != rest:
            raise DimensionError(
                f"linear_recurrence: h0 shape {h0.shape} does not match {rest}"
            )
        h0_arr = h0.data
        inputs = (abar, bx, h0)
    h = scan(abar.data, bx.data, h0_arr)
    out = Tensor(h)

    def rule(g):
        a = abar.data
        if impl == "sequential":
            lam = np.empty_like(g)
            acc = np.array(g[-1])
            lam[-1] = acc
            for t in range(a.shape[0] - 2, -1, -1):
                acc = g[t] + a[t + 1] * acc
                lam[t] = acc
        else:
            a_rev = a[::-1]
            a_shift = np.concatenate([np.ones((1,) + rest), a_rev[:-1]], axis=0)
            lam = _scan_par_np(a_shift, g[::-1], np.zeros(rest))[::-1]
        h_prev = np.concatenate([h0_arr[None], h[:-1]], axis=0)
        da = lam * h_prev
        dbx = lam
        if h0 is None:
            return da, dbx
        return da, dbx, a[0] * lam[0]

    return record_op(out, inputs, rule)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel: float
    index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list
    max_rel: float
    worst: GradCheckEntry
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tol


def grad_check(fn, params, h=1e-6, tol=1e-5, names=None, floor=1e-4):
    """Compare analytic gradients of `fn()` against central differences.

    `fn` must rebuild its graph from the current values of `params` on every
    call and return a scalar Tensor. Relative errors use the guarded
    denominator max(|analytic|, |numeric|, floor); the floor treats errors on
    near-zero gradients as absolute, which is where central differences run
    out of digits (truncation plus roundoff is around 1e-10 at h=1e-6 for
    unit-scale losses).
    """
    if not (1e-7 <= h <= 1e-4):
        raise DomainError(f"grad_check: h must lie in [1e-7, 1e-4], got {h}")
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    if loss.shape != ():
        raise ContractError(f"grad_check: fn must return a scalar, got {loss.shape}")
    base = loss.item()
    if not np.isfinite(base):
        raise NumericError(f"grad_check: non-finite loss {base}")
    backward(tape, loss)
    analytic = [
        np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params
    ]

    entries = []
    worst = None
    for name, p, an in zip(names, params, analytic):
        p_worst = GradCheckEntry(name, 0.0, (), 0.0, 0.0)
        flat = p.data
        for idx in np.ndindex(p.shape):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = fn().item()
            flat[idx] = orig - h
            lm = fn().item()
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            av = an[idx]
            if not (np.isfinite(fd) and np.isfinite(av)):
                raise NumericError(
                    f"grad_check: non-finite gradient at {name}[{idx}]:"
                    f" analytic={av} numeric={fd}"
                )
            rel = abs(av - fd) / max(abs(av), abs(fd), floor)
            if rel >= p_worst.max_rel:
                p_worst = GradCheckEntry(name, rel, idx, float(av), float(fd))
        entries.append(p_worst)
        if worst is None or p_worst.max_rel > worst.max_rel:
            worst = p_worst
    if worst is None:
        worst = GradCheckEntry("<none>", 0.0, (), 0.0, 0.0)
    return GradCheckReport(entries, worst.max_rel, worst, tol)
