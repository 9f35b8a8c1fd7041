"""Dense 4-D tensor ops with reverse-mode automatic differentiation.

Tensors are plain numpy arrays in (batch, channel, height, width) layout,
float32 by default (float64 is supported for high-precision gradient
checking). ``DiffValue`` wraps an array with a gradient slot and a record
of the producing operation, enabling ``backward`` on scalar outputs.

Convolutions are 3x3 with zero padding 1 and stride 1 or 2. The stride-1
path runs one channel-mixing GEMM per kernel tap on flattened padded
canvases: a tap shift is then a constant offset into the flat array, so
every GEMM operand is contiguous and no patch matrix is materialized.
Wrap-around terms at row ends only touch canvas border cells, which are
cropped away.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

Tensor = np.ndarray

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def _as_float(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DiffValue:
    """A value node in the reverse-mode graph.

    ``data`` is the tensor, ``grad`` the accumulated gradient of the last
    ``backward`` target with respect to this node. Non-leaf gradients are
    released once consumed; leaves keep accumulating until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float(data)
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[DiffValue, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = g.astype(self.data.dtype, copy=True)
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"DiffValue(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make_node(data: np.ndarray, parents: Sequence[DiffValue],
               backward: Callable[[np.ndarray], None]) -> DiffValue:
    """Wrap a forward result, recording provenance only if a parent needs it."""
    out = DiffValue(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(output: DiffValue) -> None:
    """Propagate d(output)/d(leaf) into every reachable leaf's grad.

    ``output`` must be scalar (a single element). Repeated calls without
    zero_grad accumulate into leaf gradients.
    """
    if output.data.size != 1:
        raise ShapeError(
            f"backward requires a scalar output, got shape {output.data.shape}")
    # iterative topological order over the recorded graph
    order: list[DiffValue] = []
    visited: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    seed = output._grad
    output._grad = np.ones_like(output.data)
    for node in reversed(order):
        g = node._grad
        if g is None or node._backward is None:
            continue
        node._backward(g)
        node._grad = None  # non-leaf grads are transient
    if seed is not None and output._backward is not None:
        output._grad = seed  # restore pre-existing accumulation on the output


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """3x3 convolution weights: kernels (c_out, c_in, 3, 3) and bias (c_out,)."""

    kernels: DiffValue
    bias: DiffValue
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        k = self.kernels.data
        if k.ndim != 4 or k.shape[2:] != (3, 3):
            raise ShapeError(f"kernels must be (c_out, c_in, 3, 3), got {k.shape}")
        if self.bias.data.shape != (k.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.data.shape} does not match c_out={k.shape[0]}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding != 1:
            raise ShapeError(f"padding must be 1, got {self.padding}")

    @property
    def c_in(self) -> int:
        return self.kernels.data.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernels.data.shape[0]


def kaiming_uniform(shape: tuple[int, ...], fan_in: int,
                    rng: np.random.Generator) -> np.ndarray:
    """He-uniform init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def conv_params(c_in: int, c_out: int, stride: int,
                rng: np.random.Generator, requires_grad: bool = True) -> ConvParams:
    """Fresh 3x3 ConvParams: Kaiming-uniform kernels, zero bias."""
    k = kaiming_uniform((c_out, c_in, 3, 3), fan_in=c_in * 9, rng=rng)
    b = np.zeros(c_out, dtype=np.float32)
    return ConvParams(DiffValue(k, requires_grad), DiffValue(b, requires_grad),
                      stride=stride)


def _pad1(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    out[:, :, 1:-1, 1:-1] = x
    return out


def _conv_fwd_s1(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, ci, h, w = x.shape
    co = k.shape[0]
    hp, wp = h + 2, w + 2
    size = hp * wp
    xp = _pad1(x)
    kt = np.ascontiguousarray(k.transpose(2, 3, 0, 1))  # (3, 3, co, ci)
    out = np.empty((n, co, h, w), dtype=x.dtype)
    canvas = np.empty((co, size), dtype=x.dtype)
    for s in range(n):
        xf = xp[s].reshape(ci, size)
        canvas[:] = 0.0
        for i in range(3):
            for j in range(3):
                off = (i - 1) * wp + (j - 1)
                lo, hi = max(0, -off), min(size, size - off)
                canvas[:, lo:hi] += kt[i, j] @ xf[:, lo + off:hi + off]
        out[s] = canvas.reshape(co, hp, wp)[:, 1:-1, 1:-1]
    out += b.reshape(1, co, 1, 1)
    return out


def _patch_view(xp: np.ndarray, oh: int, ow: int, stride: int) -> np.ndarray:
    sn, sc, sh, sw = xp.strides
    n, c = xp.shape[:2]
    return as_strided(xp, (n, c, 3, 3, oh, ow),
                      (sn, sc, sh, sw, sh * stride, sw * stride))


def _conv_fwd_s2(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, ci, h, w = x.shape
    co = k.shape[0]
    oh, ow = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    patches = _patch_view(_pad1(x), oh, ow, 2)
    out = np.tensordot(k, patches, axes=([1, 2, 3], [1, 2, 3]))  # (co, n, oh, ow)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    out += b.reshape(1, co, 1, 1)
    return out


def _conv_bwd_s1(g: np.ndarray, x: np.ndarray, k: np.ndarray,
                 need_gx: bool) -> tuple[np.ndarray | None, np.ndarray]:
    n, ci, h, w = x.shape
    co = k.shape[0]
    hp, wp = h + 2, w + 2
    size = hp * wp
    xp = _pad1(x)
    gp = _pad1(g)
    kt = np.ascontiguousarray(k.transpose(2, 3, 0, 1))
    gk = np.zeros((3, 3, co, ci), dtype=np.float64)
    gx = np.empty((n, ci, h, w), dtype=g.dtype) if need_gx else None
    canvas = np.empty((ci, size), dtype=g.dtype) if need_gx else None
    for s in range(n):
        xf = xp[s].reshape(ci, size)
        gf = gp[s].reshape(co, size)
        if need_gx:
            canvas[:] = 0.0
        for i in range(3):
            for j in range(3):
                off = (i - 1) * wp + (j - 1)
                lo, hi = max(0, -off), min(size, size - off)
                gk[i, j] += gf[:, lo:hi] @ xf[:, lo + off:hi + off].T
                if need_gx:
                    canvas[:, lo + off:hi + off] += kt[i, j].T @ gf[:, lo:hi]
        if need_gx:
            gx[s] = canvas.reshape(ci, hp, wp)[:, 1:-1, 1:-1]
    return gx, gk.transpose(2, 3, 0, 1).astype(k.dtype)


def _conv_bwd_s2(g: np.ndarray, x: np.ndarray, k: np.ndarray,
                 need_gx: bool) -> tuple[np.ndarray | None, np.ndarray]:
    n, ci, h, w = x.shape
    oh, ow = g.shape[2:]
    patches = _patch_view(_pad1(x), oh, ow, 2)
    gk = np.tensordot(g, patches, axes=([0, 2, 3], [0, 4, 5])).astype(k.dtype)
    gx = None
    if need_gx:
        gxp = np.zeros((n, ci, h + 2, w + 2), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                t = np.tensordot(g, k[:, :, i, j], axes=([1], [0]))  # (n, oh, ow, ci)
                gxp[:, :, i:i + 2 * oh:2, j:j + 2 * ow:2] += t.transpose(0, 3, 1, 2)
        gx = gxp[:, :, 1:-1, 1:-1]
    return gx, gk


def conv2d(x: DiffValue, params: ConvParams) -> DiffValue:
    """3x3 cross-correlation plus bias, zero padding 1, stride 1 or 2."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D, got shape {x.data.shape}")
    if x.data.shape[1] != params.c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs "
            f"kernels {params.kernels.data.shape}")
    k, b = params.kernels, params.bias
    if params.stride == 1:
        out = _conv_fwd_s1(x.data, k.data, b.data)
    else:
        out = _conv_fwd_s2(x.data, k.data, b.data)

    def bwd(g: np.ndarray) -> None:
        if k.requires_grad or x.requires_grad:
            if params.stride == 1:
                gx, gk = _conv_bwd_s1(g, x.data, k.data, x.requires_grad)
            else:
                gx, gk = _conv_bwd_s2(g, x.data, k.data, x.requires_grad)
            if k.requires_grad:
                k.accumulate_grad(gk)
            if x.requires_grad:
                x.accumulate_grad(gx)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.data.dtype))

    return _make_node(out, (x, k, b), bwd)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mish(x: DiffValue) -> DiffValue:
    """x * tanh(softplus(x)), with overflow-safe softplus."""
    d = x.data
    sp = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0.0)
    t = np.tanh(sp)
    out = d * t

    def bwd(g: np.ndarray) -> None:
        # d/dx = tanh(sp) + x * sech^2(sp) * sigmoid(x)
        x.accumulate_grad(g * (t + d * (1.0 - t * t) * _sigmoid(d)))

    return _make_node(out, (x,), bwd)


def concat_channels(inputs: Sequence[DiffValue]) -> DiffValue:
    """Concatenate along the channel axis; backward splits at the same offsets."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    base = inputs[0].data.shape
    for v in inputs[1:]:
        s = v.data.shape
        if s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels spatial mismatch: {base} vs {s}")
    out = np.concatenate([v.data for v in inputs], axis=1)
    offsets = np.cumsum([0] + [v.data.shape[1] for v in inputs])

    def bwd(g: np.ndarray) -> None:
        for v, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                v.accumulate_grad(g[:, lo:hi])

    return _make_node(out, tuple(inputs), bwd)


@lru_cache(maxsize=32)
def _bilinear_matrix(in_size: int, factor: int, dtype_name: str) -> np.ndarray:
    """Row-stochastic (in_size*factor, in_size) interpolation matrix,
    align-corners-false with edge clamping."""
    out_size = in_size * factor
    m = np.zeros((out_size, in_size), dtype=np.dtype(dtype_name))
    pos = (np.arange(out_size) + 0.5) / factor - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    i0 = np.clip(lo, 0, in_size - 1)
    i1 = np.clip(lo + 1, 0, in_size - 1)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), (1.0 - frac))
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_upsample(x: DiffValue, factor: int) -> DiffValue:
    """Scale height and width by an integer factor (align-corners-false)."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    d = x.data
    n, c, h, w = d.shape
    dt = d.dtype.name
    wy = _bilinear_matrix(h, factor, dt)
    wx = _bilinear_matrix(w, factor, dt)
    t = np.tensordot(d, wy, axes=([2], [1]))          # (n, c, w, oh)
    out = np.tensordot(t, wx, axes=([2], [1]))        # (n, c, oh, ow)
    out = np.ascontiguousarray(out)

    def bwd(g: np.ndarray) -> None:
        t2 = np.tensordot(g, wy, axes=([2], [0]))     # (n, c, ow, h)
        gx = np.tensordot(t2, wx, axes=([2], [0]))    # (n, c, h, w)
        x.accumulate_grad(np.ascontiguousarray(gx))

    return _make_node(out, (x,), bwd)


def global_avg_pool(x: DiffValue) -> DiffValue:
    """Mean over the spatial dims: (n, c, h, w) -> (n, c, 1, 1)."""
    d = x.data
    n, c, h, w = d.shape
    out = d.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(d.dtype)

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(np.broadcast_to(g / (h * w), d.shape))

    return _make_node(out, (x,), bwd)


def softmax_pair(a: DiffValue, b: DiffValue) -> tuple[DiffValue, DiffValue]:
    """Per-element (e^a / (e^a + e^b), complement).

    The larger side is computed as 1/(1+e^-|d|) in [0.5, 1); the other is
    its exact float complement, so the pair sums to exactly 1 and the op
    is bitwise symmetric under swapping a and b.
    """
    if a.data.shape != b.data.shape:
        raise ShapeError(f"softmax_pair shape mismatch: {a.data.shape} vs {b.data.shape}")
    d = a.data - b.data
    big = 1.0 / (1.0 + np.exp(-np.abs(d)))
    first = np.where(d >= 0, big, 1.0 - big)
    second = 1.0 - first
    deriv = first * second

    def bwd_first(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * deriv)
        if b.requires_grad:
            b.accumulate_grad(-g * deriv)

    def bwd_second(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(-g * deriv)
        if b.requires_grad:
            b.accumulate_grad(g * deriv)

    return (_make_node(first, (a, b), bwd_first),
            _make_node(second, (a, b), bwd_second))


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make_node(out, (a, b), bwd)


def subtract(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"subtract shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data - b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _make_node(out, (a, b), bwd)


def scale_by_channel(x: DiffValue, s: DiffValue) -> DiffValue:
    """Multiply (n, c, h, w) by per-channel scalers (n, c, 1, 1)."""
    xs, ss = x.data.shape, s.data.shape
    if ss != (xs[0], xs[1], 1, 1):
        raise ShapeError(f"scaler shape {ss} does not broadcast over {xs}")
    out = x.data * s.data

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * s.data)
        if s.requires_grad:
            s.accumulate_grad((g * x.data).sum(axis=(2, 3), keepdims=True,
                                               dtype=np.float64).astype(s.data.dtype))

    return _make_node(out, (x, s), bwd)


def scale(x: DiffValue, c: float) -> DiffValue:
    """Multiply by a python constant."""
    out = x.data * x.data.dtype.type(c)

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g * x.data.dtype.type(c))

    return _make_node(out, (x,), bwd)


def mse(x: DiffValue, y: DiffValue) -> DiffValue:
    """Mean squared difference as a (1, 1, 1, 1) scalar."""
    if x.data.shape != y.data.shape:
        raise ShapeError(f"mse shape mismatch: {x.data.shape} vs {y.data.shape}")
    diff = x.data - y.data
    n = diff.size
    val = np.square(diff, dtype=np.float64).sum(dtype=np.float64) / n
    out = np.full((1, 1, 1, 1), val, dtype=diff.dtype)

    def bwd(g: np.ndarray) -> None:
        coeff = 2.0 * float(g.reshape(())) / n
        if x.requires_grad:
            x.accumulate_grad(coeff * diff)
        if y.requires_grad:
            y.accumulate_grad(-coeff * diff)

    return _make_node(out, (x, y), bwd)


def sum_all(x: DiffValue) -> DiffValue:
    """Sum of all elements as a (1, 1, 1, 1) scalar."""
    val = x.data.sum(dtype=np.float64)
    out = np.full((1, 1, 1, 1), val, dtype=x.data.dtype)

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(np.broadcast_to(g.reshape(()), x.data.shape))

    return _make_node(out, (x,), bwd)
