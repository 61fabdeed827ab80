"""Differentiable layers with hand-written backward passes.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
that cache and the upstream gradient. Caches hold references to the forward
inputs, so callers must not mutate those arrays before backward runs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    in_depth: int
    out_depth: int
    kernel: tuple[int, int]
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.groups < 1 or self.in_depth % self.groups or self.out_depth % self.groups:
            raise ShapeError(
                f"depths {self.in_depth}->{self.out_depth} not divisible by groups={self.groups}"
            )
        if min(self.kernel) < 1 or min(self.dilation) < 1:
            raise ShapeError(f"bad kernel {self.kernel} / dilation {self.dilation}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_depth, self.in_depth // self.groups, *self.kernel)

    @property
    def fan_in(self) -> int:
        return self.in_depth // self.groups * self.kernel[0] * self.kernel[1]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (dh, dw) = self.kernel, self.dilation
        return h - (kh - 1) * dh, w - (kw - 1) * dw


@dataclass
class ConvCache:
    x: np.ndarray
    spec: ConvSpec
    weight: np.ndarray
    cols: Optional[np.ndarray] = None


def _taps(spec: ConvSpec, h_out: int, w_out: int):
    (kh, kw), (dh, dw) = spec.kernel, spec.dilation
    for u in range(kh):
        for v in range(kw):
            yield u, v, slice(u * dh, u * dh + h_out), slice(v * dw, v * dw + w_out)


def _im2col(xg: np.ndarray, spec: ConvSpec, h_out: int, w_out: int) -> np.ndarray:
    """(b, g, cin, H, W) -> (b, g, cin*kh*kw, h_out*w_out)."""
    b, g, cin = xg.shape[:3]
    kh, kw = spec.kernel
    cols = np.empty((b, g, cin, kh, kw, h_out, w_out), dtype=xg.dtype)
    for u, v, hs, ws in _taps(spec, h_out, w_out):
        cols[:, :, :, u, v] = xg[:, :, :, hs, ws]
    return cols.reshape(b, g, cin * kh * kw, h_out * w_out)


def conv2d_forward(x: np.ndarray, spec: ConvSpec, weight: np.ndarray,
                   bias: Optional[np.ndarray] = None) -> tuple[np.ndarray, ConvCache]:
    """Grouped, dilated, valid, stride-1 convolution (cross-correlation).

    Groups with a single input channel (depthwise, or 1 -> n pointwise) use
    broadcast multiply-accumulate per kernel tap; everything else goes through
    im2col and a batched matrix product.
    """
    T.check4(x, "conv input")
    if x.shape[1] != spec.in_depth:
        raise ShapeError(f"conv input depth {x.shape[1]} != spec.in_depth {spec.in_depth}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv weight {weight.shape} != expected {spec.weight_shape}")
    if spec.bias and (bias is None or bias.shape != (spec.out_depth,)):
        raise ShapeError(f"conv bias must have shape ({spec.out_depth},)")
    h_out, w_out = spec.out_hw(x.shape[2], x.shape[3])
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"effective kernel of {spec.kernel} dilated {spec.dilation} exceeds input {x.shape[2:]}"
        )
    b, g = x.shape[0], spec.groups
    cin, cout = spec.in_depth // g, spec.out_depth // g
    kh, kw = spec.kernel
    xg = x.reshape(b, g, cin, x.shape[2], x.shape[3])
    wg = weight.reshape(g, cout, cin, kh, kw)
    cols = None
    if cin == 1:
        out = np.zeros((b, g, cout, h_out, w_out), dtype=x.dtype)
        tmp = np.empty_like(out)
        for u, v, hs, ws in _taps(spec, h_out, w_out):
            np.multiply(xg[:, :, :, hs, ws], wg[None, :, :, :, u, v, None], out=tmp)
            out += tmp
    else:
        cols = _im2col(xg, spec, h_out, w_out)
        out = np.matmul(wg.reshape(g, cout, -1), cols)
    out = out.reshape(b, spec.out_depth, h_out, w_out)
    if spec.bias:
        out += bias[None, :, None, None]
    return out, ConvCache(x, spec, weight, cols)


def conv2d_backward(cache: ConvCache, grad_out: np.ndarray):
    """Returns (grad_x, grad_weight, grad_bias); grad_bias is None without bias."""
    x, spec, weight = cache.x, cache.spec, cache.weight
    h_out, w_out = spec.out_hw(x.shape[2], x.shape[3])
    expected = (x.shape[0], spec.out_depth, h_out, w_out)
    if grad_out.shape != expected:
        raise ShapeError(f"conv grad_out {grad_out.shape} != forward output {expected}")
    b, g = x.shape[0], spec.groups
    cin, cout = spec.in_depth // g, spec.out_depth // g
    kh, kw = spec.kernel
    xg = x.reshape(b, g, cin, x.shape[2], x.shape[3])
    wg = weight.reshape(g, cout, cin, kh, kw)
    gx = np.zeros_like(xg)
    if cin == 1:
        gg = grad_out.reshape(b, g, cout, h_out, w_out)
        gw = np.zeros_like(wg)
        tmp = np.empty_like(gg)
        for u, v, hs, ws in _taps(spec, h_out, w_out):
            np.multiply(gg, xg[:, :, :, hs, ws], out=tmp)
            gw[:, :, 0, u, v] = tmp.sum(axis=(0, 3, 4))
            np.multiply(gg, wg[None, :, :, :, u, v, None], out=tmp)
            gx[:, :, :, hs, ws] += tmp.sum(axis=2, keepdims=True) if cout > 1 else tmp
    else:
        gg = grad_out.reshape(b, g, cout, h_out * w_out)
        cols = cache.cols if cache.cols is not None else _im2col(xg, spec, h_out, w_out)
        gw = np.matmul(gg, cols.swapaxes(2, 3)).sum(axis=0).reshape(wg.shape)
        gcols = np.matmul(wg.reshape(g, cout, -1).swapaxes(1, 2), gg)
        gcols = gcols.reshape(b, g, cin, kh, kw, h_out, w_out)
        for u, v, hs, ws in _taps(spec, h_out, w_out):
            gx[:, :, :, hs, ws] += gcols[:, :, :, u, v]
    gb = grad_out.sum(axis=(0, 2, 3)) if spec.bias else None
    return gx.reshape(x.shape), gw.reshape(weight.shape), gb


# --------------------------------------------------------------------------
# normalization


@dataclass
class NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    kind: str            # "bn_train", "bn_eval" or "gn"
    num_groups: int = 0


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      training: bool, momentum: float = BN_MOMENTUM,
                      eps: float = NORM_EPS) -> tuple[np.ndarray, NormCache]:
    """Per-depth batch norm. In training mode running stats are updated in place."""
    T.check4(x, "batchnorm input")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"batchnorm affine must have shape ({d},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        kind = "bn_train"
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        kind = "bn_eval"
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, NormCache(xhat, inv_std, gamma, kind)


def groupnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      num_groups: int, eps: float = NORM_EPS) -> tuple[np.ndarray, NormCache]:
    T.check4(x, "groupnorm input")
    b, d, h, w = x.shape
    if num_groups < 1 or d % num_groups:
        raise ShapeError(f"depth {d} not divisible by num_groups={num_groups}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"groupnorm affine must have shape ({d},)")
    xg = x.reshape(b, num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((xg - mean) * inv_std).reshape(x.shape)
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, NormCache(xhat, inv_std, gamma, "gn", num_groups)


def norm_backward(cache: NormCache, grad_out: np.ndarray):
    """Returns (grad_x, grad_gamma, grad_beta) for batch or group norm."""
    xhat, gamma = cache.xhat, cache.gamma
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"norm grad_out {grad_out.shape} != forward output {xhat.shape}")
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma[None, :, None, None]
    if cache.kind == "bn_eval":
        return gxhat * cache.inv_std[None, :, None, None], grad_gamma, grad_beta
    if cache.kind == "bn_train":
        inv = cache.inv_std[None, :, None, None]
        m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return inv * (gxhat - m1 - xhat * m2), grad_gamma, grad_beta
    b = xhat.shape[0]
    gh = gxhat.reshape(b, cache.num_groups, -1)
    xh = xhat.reshape(b, cache.num_groups, -1)
    gx = cache.inv_std * (gh - gh.mean(axis=2, keepdims=True)
                          - xh * (gh * xh).mean(axis=2, keepdims=True))
    return gx.reshape(xhat.shape), grad_gamma, grad_beta


# --------------------------------------------------------------------------
# fully connected


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """x: (B, n_in); weight: (n_out, n_in); returns (B, n_out) logits."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    return x @ weight.T + bias, (x, weight)


def linear_backward(cache, grad_out: np.ndarray):
    x, weight = cache
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear grad_out {grad_out.shape} mismatched")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


# --------------------------------------------------------------------------
# activations as cached layers


def activation_forward(x: np.ndarray, kind: str, axis: Optional[int] = None):
    if kind == "gelu":
        y, cdf = T.gelu_with_cdf(x)
        return y, (kind, x, y, cdf)
    y = T.elementwise(x, kind, axis)
    return y, (kind, x, y, axis)


def activation_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    # the last slot holds the normal CDF for gelu and the axis for softmax
    kind, x, y, extra = cache
    if grad_out.shape != y.shape:
        raise ShapeError(f"activation grad_out {grad_out.shape} != {y.shape}")
    if kind == "gelu":
        return T.gelu_backward(x, grad_out, cdf=extra)
    if kind == "sigmoid":
        return T.sigmoid_backward(y, grad_out)
    if kind == "softmax":
        return T.softmax_backward(y, grad_out, extra)
    raise ValueError(f"unknown activation {kind!r}")
