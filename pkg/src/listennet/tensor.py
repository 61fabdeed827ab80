"""Rank-4 tensor primitives.

Every activation, weight and gradient in the package is a numpy array with
exactly four axes laid out as (batch, depth, height, width), C-contiguous.
Functions here are pure: they never modify their inputs, and they keep the
input dtype so the same code runs in float32 (training) and float64
(gradient checking).
"""
from __future__ import annotations

import math
import sys

import numpy as np
from scipy.special import erf, ndtr

from .errors import ShapeError

DTYPE = np.float32

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def check4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 tensor, got shape {x.shape}")
    return x


def tensor_new(shape, fill: float = 0.0, dtype=DTYPE) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"tensor_new: expected 4 extents, got {shape}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"tensor_new: negative extent in {shape}")
    n = math.prod(shape)
    if n * np.dtype(dtype).itemsize > sys.maxsize:
        raise ShapeError(f"tensor_new: {shape} exceeds addressable size")
    return np.full(shape, fill, dtype=dtype)


def offset_of(shape, b: int, d: int, h: int, w: int) -> int:
    """Row-major buffer offset of element (b, d, h, w)."""
    _, n1, n2, n3 = shape
    return ((b * n1 + d) * n2 + h) * n3 + w


def index_of(shape, offset: int) -> tuple[int, int, int, int]:
    _, n1, n2, n3 = shape
    offset, w = divmod(offset, n3)
    offset, h = divmod(offset, n2)
    b, d = divmod(offset, n1)
    return b, d, h, w


# --------------------------------------------------------------------------
# structural ops


def matmul_batched(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N,1,p,q) x (N,1,q,r) -> (N,1,p,r)."""
    check4(a, "matmul lhs")
    check4(b, "matmul rhs")
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise ShapeError(f"matmul_batched: depth must be 1, got {a.shape}, {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul_batched: incompatible {a.shape} x {b.shape}")
    return np.matmul(a, b)


def concat_depth(parts) -> np.ndarray:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_depth: empty part list")
    ref = check4(parts[0], "concat part").shape
    for p in parts[1:]:
        check4(p, "concat part")
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_depth: {p.shape} does not match {ref} off the depth axis")
    return np.concatenate(parts, axis=1)


def slice_time_last(x: np.ndarray, t_keep: int) -> np.ndarray:
    check4(x)
    if not 0 < t_keep <= x.shape[3]:
        raise ShapeError(f"slice_time_last: t_keep={t_keep} outside (0, {x.shape[3]}]")
    return np.ascontiguousarray(x[..., x.shape[3] - t_keep:])


def slice_time_last_backward(grad: np.ndarray, width: int) -> np.ndarray:
    """Adjoint of slice_time_last: zero-pad the dropped prefix."""
    out = np.zeros(grad.shape[:3] + (width,), dtype=grad.dtype)
    out[..., width - grad.shape[3]:] = grad
    return out


# --------------------------------------------------------------------------
# pooling and resizing, both as separable linear maps


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    check4(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"adaptive_avg_pool: output extents must be >= 1, got ({out_h}, {out_w})")
    h, w = x.shape[2], x.shape[3]
    if h == 0 or w == 0:
        raise ShapeError(f"adaptive_avg_pool: zero-extent input {x.shape}")
    # axes left at full size are skipped; axes pooled to one are plain means
    y = x
    if out_h != h:
        y = y.mean(axis=2, keepdims=True) if out_h == 1 else _pool_matrix(h, out_h).astype(x.dtype) @ y
    if out_w != w:
        y = y.mean(axis=3, keepdims=True) if out_w == 1 else y @ _pool_matrix(w, out_w).T.astype(x.dtype)
    return y.copy() if y is x else np.ascontiguousarray(y)


def adaptive_avg_pool_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    out_h, out_w = grad.shape[2], grad.shape[3]
    g = grad
    if out_h != in_h:
        if out_h == 1:
            g = np.broadcast_to(g * (1.0 / in_h), g.shape[:2] + (in_h, out_w))
        else:
            g = _pool_matrix(in_h, out_h).T.astype(grad.dtype) @ g
    if out_w != in_w:
        if out_w == 1:
            g = np.broadcast_to(g * (1.0 / in_w), g.shape[:3] + (in_w,))
        else:
            g = g @ _pool_matrix(in_w, out_w).astype(grad.dtype)
    return g.copy() if g is grad else np.ascontiguousarray(g)


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for j in range(n_out):
        s = min(max((j + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(math.floor(s))
        hi = min(lo + 1, n_in - 1)
        frac = s - lo
        m[j, lo] += 1.0 - frac
        m[j, hi] += frac
    return m


def linear_resize_time(x: np.ndarray, t_out: int) -> np.ndarray:
    """Half-pixel linear resize along width; height must be 1."""
    check4(x)
    if x.shape[2] != 1:
        raise ShapeError(f"linear_resize_time: height must be 1, got {x.shape}")
    if x.shape[3] < 1 or t_out < 1:
        raise ShapeError(f"linear_resize_time: widths must be >= 1 ({x.shape[3]} -> {t_out})")
    if t_out == x.shape[3]:
        return x.copy()
    r = _resize_matrix(x.shape[3], t_out).astype(x.dtype)
    return np.ascontiguousarray(x @ r.T)


def linear_resize_time_backward(grad: np.ndarray, t_in: int) -> np.ndarray:
    if grad.shape[3] == t_in:
        return grad.copy()
    r = _resize_matrix(t_in, grad.shape[3]).astype(grad.dtype)
    return np.ascontiguousarray(grad @ r)


# --------------------------------------------------------------------------
# elementwise activations


def gelu(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + erf(x / _SQRT2))).astype(x.dtype, copy=False)


def gelu_with_cdf(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GELU output together with the standard normal CDF of x, for reuse in backward."""
    cdf = ndtr(x).astype(x.dtype, copy=False)
    return x * cdf, cdf


def gelu_backward(x: np.ndarray, grad: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = ndtr(x)
    d = cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (grad * d).astype(grad.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    nan = np.isnan(x)
    out[nan] = x[nan]
    return out


def sigmoid_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Takes the sigmoid *output* y."""
    return grad * y * (1.0 - y)


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    if x.shape[axis] < 1:
        raise ShapeError(f"softmax: empty axis {axis} in {x.shape}")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, grad: np.ndarray, axis: int) -> np.ndarray:
    """Jacobian-vector product of softmax given its output y."""
    return y * (grad - np.sum(grad * y, axis=axis, keepdims=True))


def elementwise(x: np.ndarray, f: str, axis: int | None = None) -> np.ndarray:
    if f == "gelu":
        return gelu(x)
    if f == "sigmoid":
        return sigmoid(x)
    if f == "softmax":
        if axis is None:
            raise ShapeError("softmax needs an axis")
        return softmax(x, axis)
    raise ValueError(f"unknown elementwise function {f!r}")
