"""ListenNet assembly: encoder, multi-scale temporal block, cross-nested
attention and classifier, with an explicit hand-scheduled backward pass.

Input windows are (B, 1, C, T). With the defaults (d_depth=16, k0=8,
kernels 1/2/3/5, dilation 1) and C=64, T=128 the intermediate shapes are::

    E_t  (B, 16, 64, 121)     E_s  (B, 16, 1, 121)
    U    (B, 16, 64, 117)     S    (B, 16, 1, 121)
    E_t' (B, 16, 16, 121)     E    (B, 16, 1, 121)
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    window_len: int
    d_depth: int = 16
    k0: int = 8
    mste_kernels: tuple[int, ...] = (1, 2, 3, 5)
    dilation: int = 1
    groups: Optional[int] = None
    use_mste: bool = True
    use_cna: bool = True
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "mste_kernels", tuple(int(k) for k in self.mste_kernels))
        if self.groups is None:
            object.__setattr__(self, "groups", self.d_depth // 2)
        self.validate()

    def validate(self):
        if min(self.channels, self.window_len, self.d_depth, self.k0, self.dilation) < 1:
            raise ConfigError(f"all extents must be positive: {self}")
        if len(self.mste_kernels) != 4 or min(self.mste_kernels) < 1:
            raise ConfigError(f"mste_kernels must be four positive sizes, got {self.mste_kernels}")
        if self.d_depth % 4:
            raise ConfigError(f"d_depth={self.d_depth} must be divisible by 4")
        if self.groups < 1 or self.d_depth % self.groups:
            raise ConfigError(f"d_depth={self.d_depth} must be divisible by groups={self.groups}")
        if self.window_len <= (self.k0 - 1) + (self.max_kernel - 1) * self.dilation:
            raise ConfigError(f"window_len={self.window_len} too short for k0 and MSTE kernels")
        if self.use_cna and self.channels < self.d_depth:
            raise ConfigError(f"channels={self.channels} < d_depth={self.d_depth}; depth alignment needs C >= d_depth")
        if self.num_classes != 2:
            raise ConfigError("only two-class decoding is supported")

    @property
    def max_kernel(self) -> int:
        return max(self.mste_kernels)

    @property
    def t_prime(self) -> int:
        return self.window_len - self.k0 + 1

    @property
    def t_min(self) -> int:
        return self.t_prime - (self.max_kernel - 1) * self.dilation

    @property
    def group_depth(self) -> int:
        """Depths per CNA group."""
        return self.d_depth // self.groups

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["mste_kernels"] = list(self.mste_kernels)
        return d


def conv_specs(cfg: ModelConfig) -> dict[str, L.ConvSpec]:
    d, c = cfg.d_depth, cfg.channels
    specs = {
        "stde_t.pw": L.ConvSpec(1, d, (1, 1)),
        "stde_t.dw": L.ConvSpec(d, d, (1, cfg.k0), groups=d),
        "stde_s.pw": L.ConvSpec(d, d, (1, 1)),
        "stde_s.dw": L.ConvSpec(d, d, (c, 1), groups=d),
    }
    for i, k in enumerate(cfg.mste_kernels):
        specs[f"mste.conv{i}"] = L.ConvSpec(d, d // 4, (1, k), dilation=(1, cfg.dilation))
    specs["mste.skip"] = L.ConvSpec(d, d, (c, 1), groups=d)
    specs["cna.fuse"] = L.ConvSpec(d + 1, 1, (1, 1))
    return specs


@dataclass
class ListenNetParams:
    """Trainable tensors plus non-trainable batch-norm running statistics."""
    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.weights[key]

    def copy(self) -> "ListenNetParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ListenNetParams":
        return ListenNetParams({k: v.astype(dtype) for k, v in self.weights.items()},
                               {k: v.astype(dtype) for k, v in self.buffers.items()})

    def num_scalars(self) -> int:
        return sum(v.size for v in self.weights.values())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}


def init_params(cfg: ModelConfig, seed: int, dtype=T.DTYPE) -> ListenNetParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    specs = conv_specs(cfg)
    for name, spec in specs.items():
        w[f"{name}.w"] = uniform(spec.weight_shape, spec.fan_in)
        w[f"{name}.b"] = np.zeros(spec.out_depth, dtype=dtype)
    d, c = cfg.d_depth, cfg.group_depth
    w["mste.bn.gamma"] = np.ones(d, dtype=dtype)
    w["mste.bn.beta"] = np.zeros(d, dtype=dtype)
    for br in ("t", "s"):
        w[f"cna.gn_{br}.gamma"] = np.ones(c, dtype=dtype)
        w[f"cna.gn_{br}.beta"] = np.zeros(c, dtype=dtype)
    w["cls.w"] = uniform((cfg.num_classes, d), d)
    w["cls.b"] = np.zeros(cfg.num_classes, dtype=dtype)
    buffers = {
        "mste.bn.running_mean": np.zeros(d, dtype=dtype),
        "mste.bn.running_var": np.ones(d, dtype=dtype),
    }
    return ListenNetParams(w, buffers)


def _expect(name: str, x: np.ndarray, shape: tuple) -> None:
    if x.shape != shape:
        raise ShapeError(f"{name}: expected shape {shape}, got {x.shape}")


def _conv(x, params, specs, name):
    return L.conv2d_forward(x, specs[name], params[f"{name}.w"], params[f"{name}.b"])


def _conv_back(cache, g, grads, name):
    gx, gw, gb = L.conv2d_backward(cache, g)
    grads[f"{name}.w"] += gw
    grads[f"{name}.b"] += gb
    return gx


# --------------------------------------------------------------------------
# STDE


def stde_forward(x: np.ndarray, params: ListenNetParams, cfg: ModelConfig):
    T.check4(x, "input")
    b = x.shape[0]
    if x.shape[1:] != (1, cfg.channels, cfg.window_len):
        raise ShapeError(f"input must be (B, 1, {cfg.channels}, {cfg.window_len}), got {x.shape}")
    specs = conv_specs(cfg)
    cache = {}
    h, cache["t.conv"] = _temporal_forward(x, params, cfg)
    e_t, cache["t.act"] = L.activation_forward(h, "gelu")
    h, cache["s.pw"] = _conv(e_t, params, specs, "stde_s.pw")
    h, cache["s.dw"] = _conv(h, params, specs, "stde_s.dw")
    e_s, cache["s.act"] = L.activation_forward(h, "gelu")
    _expect("E_t", e_t, (b, cfg.d_depth, cfg.channels, cfg.t_prime))
    _expect("E_s", e_s, (b, cfg.d_depth, 1, cfg.t_prime))
    return e_t, e_s, cache


def stde_backward(cache, g_et, g_es, grads):
    g = L.activation_backward(cache["s.act"], g_es)
    g = _conv_back(cache["s.dw"], g, grads, "stde_s.dw")
    g = _conv_back(cache["s.pw"], g, grads, "stde_s.pw")
    g = g + g_et
    g = L.activation_backward(cache["t.act"], g)
    return _temporal_backward(cache["t.conv"], g, grads)


def _temporal_forward(x, params, cfg: ModelConfig):
    """Pointwise 1 -> d followed by depthwise (1, k0), evaluated as one product.

    With a single input depth the pair collapses to a 1 -> d convolution with
    kernel K[d, v] = pw[d] * dw[d, v] and bias pw_b[d] * sum_v dw[d, v] + dw_b[d],
    which runs as a matrix product over k0 shifted copies of the input instead
    of two passes over the d-times larger intermediate.
    """
    b, _, c, t = x.shape
    d, k0, tp = cfg.d_depth, cfg.k0, cfg.t_prime
    pw, pw_b = params["stde_t.pw.w"].reshape(d), params["stde_t.pw.b"]
    dw, dw_b = params["stde_t.dw.w"].reshape(d, k0), params["stde_t.dw.b"]
    kernel = pw[:, None] * dw
    bias = pw_b * dw.sum(axis=1) + dw_b
    cols = np.empty((b, k0, c, tp), dtype=x.dtype)
    for v in range(k0):
        cols[:, v] = x[:, 0, :, v:v + tp]
    cols = cols.reshape(b, k0, c * tp)
    out = np.matmul(kernel, cols)
    out += bias[:, None]
    return out.reshape(b, d, c, tp), (cols, x.shape, pw, pw_b, dw)


def _temporal_backward(cache, g, grads):
    cols, x_shape, pw, pw_b, dw = cache
    b, d, c, tp = g.shape
    k0 = dw.shape[1]
    gf = g.reshape(b, d, c * tp)
    g_kernel = np.matmul(gf, cols.swapaxes(1, 2)).sum(axis=0)
    g_bias = gf.sum(axis=(0, 2))
    grads["stde_t.pw.w"] += (g_kernel * dw).sum(axis=1).reshape(d, 1, 1, 1)
    grads["stde_t.pw.b"] += g_bias * dw.sum(axis=1)
    grads["stde_t.dw.w"] += (g_kernel * pw[:, None] + (g_bias * pw_b)[:, None]).reshape(d, 1, 1, k0)
    grads["stde_t.dw.b"] += g_bias
    g_cols = np.matmul((pw[:, None] * dw).T, gf).reshape(b, k0, c, tp)
    gx = np.zeros(x_shape, dtype=g.dtype)
    for v in range(k0):
        gx[:, 0, :, v:v + tp] += g_cols[:, v]
    return gx


# --------------------------------------------------------------------------
# MSTE


def mste_forward(e_t, e_s, params: ListenNetParams, cfg: ModelConfig, training: bool):
    """Returns (E_s', cache, activations)."""
    if not cfg.use_mste:
        return e_s, None, {}
    if cfg.t_prime <= (cfg.max_kernel - 1) * cfg.dilation:
        raise ShapeError("time extent too short for the widest dilated kernel")
    specs = conv_specs(cfg)
    cache = {}
    cat, cache["branches"] = _branches_forward(e_t, params, cfg)
    u, cache["bn"] = L.batchnorm_forward(
        cat, params["mste.bn.gamma"], params["mste.bn.beta"],
        params.buffers["mste.bn.running_mean"], params.buffers["mste.bn.running_var"],
        training)
    skip, cache["skip"] = _conv(u, params, specs, "mste.skip")
    s = T.linear_resize_time(skip, cfg.t_prime)
    b = e_t.shape[0]
    _expect("U", u, (b, cfg.d_depth, cfg.channels, cfg.t_min))
    _expect("S", s, (b, cfg.d_depth, 1, cfg.t_prime))
    return e_s + s, cache, {"U": u, "S": s}


def _branch_kernel(params: ListenNetParams, cfg: ModelConfig):
    """Stack the branch kernels into one (d, d, 1, k_max) kernel.

    A branch of width k whose output keeps only the last t_min positions sees
    the same inputs as taps k_max - k .. k_max - 1 of a width-k_max kernel, so
    each branch is right-aligned inside the shared kernel and zero elsewhere.
    """
    d, kmax, width = cfg.d_depth, cfg.max_kernel, cfg.d_depth // 4
    dtype = params["mste.conv0.w"].dtype
    w = np.zeros((d, d, 1, kmax), dtype=dtype)
    for i, k in enumerate(cfg.mste_kernels):
        w[i * width:(i + 1) * width, :, :, kmax - k:] = params[f"mste.conv{i}.w"]
    b = np.concatenate([params[f"mste.conv{i}.b"] for i in range(len(cfg.mste_kernels))])
    return w, b


def _branches_forward(e_t, params: ListenNetParams, cfg: ModelConfig):
    """Parallel dilated branches, suffix-aligned to t_min and stacked on depth."""
    w, b = _branch_kernel(params, cfg)
    spec = L.ConvSpec(cfg.d_depth, cfg.d_depth, (1, cfg.max_kernel), dilation=(1, cfg.dilation))
    return L.conv2d_forward(e_t, spec, w, b)


def _branches_backward(cache, g_cat, cfg: ModelConfig, grads):
    gx, gw, gb = L.conv2d_backward(cache, g_cat)
    kmax, width = cfg.max_kernel, cfg.d_depth // 4
    for i, k in enumerate(cfg.mste_kernels):
        grads[f"mste.conv{i}.w"] += gw[i * width:(i + 1) * width, :, :, kmax - k:]
        grads[f"mste.conv{i}.b"] += gb[i * width:(i + 1) * width]
    return gx


def mste_backward(cache, g_esp, cfg: ModelConfig, grads):
    """Returns (grad wrt E_t, grad wrt E_s)."""
    if cache is None:
        return None, g_esp
    g_skip = T.linear_resize_time_backward(g_esp, cfg.t_min)
    g_u = _conv_back(cache["skip"], g_skip, grads, "mste.skip")
    g_cat, gg, gb = L.norm_backward(cache["bn"], g_u)
    grads["mste.bn.gamma"] += gg
    grads["mste.bn.beta"] += gb
    g_et = _branches_backward(cache["branches"], g_cat, cfg, grads)
    return g_et, g_esp


# --------------------------------------------------------------------------
# CNA


def depth_align(e_t: np.ndarray, d_depth: int) -> np.ndarray:
    """Pool the channel (height) axis from C down to d_depth rows."""
    if e_t.shape[2] < d_depth:
        raise ShapeError(f"depth_align: height {e_t.shape[2]} < d_depth {d_depth}")
    return T.adaptive_avg_pool(e_t, d_depth, e_t.shape[3])


def depth_align_backward(grad: np.ndarray, channels: int) -> np.ndarray:
    return T.adaptive_avg_pool_backward(grad, channels, grad.shape[3])


def _gate_branch(f, gamma, beta, num_groups):
    h, w = f.shape[2], f.shape[3]
    gh = T.sigmoid(T.adaptive_avg_pool(f, h, 1))
    gw = T.sigmoid(T.adaptive_avg_pool(f, 1, w))
    out, gn = L.groupnorm_forward(f * gh * gw, gamma, beta, num_groups)
    return out, (f, gh, gw, gn)


def _gate_branch_backward(cache, g):
    f, gh, gw, gn = cache
    h, w = f.shape[2], f.shape[3]
    gy, ggamma, gbeta = L.norm_backward(gn, g)
    gf = gy * gh * gw
    g_gh = (gy * f * gw).sum(axis=3, keepdims=True)
    g_gw = (gy * f * gh).sum(axis=2, keepdims=True)
    gf = gf + T.adaptive_avg_pool_backward(T.sigmoid_backward(gh, g_gh), h, w)
    gf = gf + T.adaptive_avg_pool_backward(T.sigmoid_backward(gw, g_gw), h, w)
    return gf, ggamma, gbeta


def _attend(query, values):
    """softmax(GAP(query)) over depth, applied to the flattened values."""
    n, c = query.shape[:2]
    pooled = T.adaptive_avg_pool(query, 1, 1).reshape(n, 1, 1, c)
    a = T.softmax(pooled, axis=3)
    flat = values.reshape(n, 1, c, -1)
    return T.matmul_batched(a, flat), (a, flat)


def _attend_backward(cache, g, query_shape):
    a, flat = cache
    n, c, h, w = query_shape
    g_a = np.matmul(g, np.swapaxes(flat, 2, 3))
    g_flat = np.matmul(np.swapaxes(a, 2, 3), g)
    g_pooled = T.softmax_backward(a, g_a, axis=3).reshape(n, c, 1, 1)
    return T.adaptive_avg_pool_backward(g_pooled, h, w), g_flat


def cna_forward(e_t_aligned, e_s_prime, params: ListenNetParams, cfg: ModelConfig):
    """Returns (E, cache, activations)."""
    if not cfg.use_cna:
        return e_s_prime, None, {}
    b, d, _, tp = e_s_prime.shape
    if d % cfg.groups:
        raise ShapeError(f"depth {d} not divisible by G={cfg.groups}")
    n, c = b * cfg.groups, d // cfg.groups
    f_t = e_t_aligned.reshape(n, c, d, tp)
    f_s = e_s_prime.reshape(n, c, 1, tp)
    f1, br1 = _gate_branch(f_t, params["cna.gn_t.gamma"], params["cna.gn_t.beta"], c)
    f2, br2 = _gate_branch(f_s, params["cna.gn_s.gamma"], params["cna.gn_s.beta"], c)
    m1, at1 = _attend(f1, f2)
    m2, at2 = _attend(f2, f1)
    cat = T.concat_depth([m1.reshape(n, 1, 1, tp), m2.reshape(n, d, 1, tp)])
    wts, fuse = _conv(cat, params, conv_specs(cfg), "cna.fuse")
    gate = T.sigmoid(wts)
    e = (f_s * gate).reshape(b, d, 1, tp)
    _expect("W", wts, (n, 1, 1, tp))
    _expect("E", e, (b, d, 1, tp))
    cache = dict(f_s=f_s, f1_shape=f1.shape, f2_shape=f2.shape, br1=br1, br2=br2,
                 at1=at1, at2=at2, fuse=fuse, gate=gate)
    return e, cache, {"F_t": f_t, "F_s": f_s, "F_1": f1, "F_2": f2, "W": wts}


def cna_backward(cache, g_e, cfg: ModelConfig, grads):
    """Returns (grad wrt aligned E_t or None, grad wrt E_s')."""
    if cache is None:
        return None, g_e
    b, d, _, tp = g_e.shape
    f_s, gate = cache["f_s"], cache["gate"]
    n, c = f_s.shape[:2]
    ge = g_e.reshape(f_s.shape)
    g_fs = ge * gate
    g_gate = (ge * f_s).sum(axis=1, keepdims=True)
    g_cat = _conv_back(cache["fuse"], T.sigmoid_backward(gate, g_gate), grads, "cna.fuse")
    g_m1 = g_cat[:, :1].reshape(n, 1, 1, tp)
    g_m2 = g_cat[:, 1:].reshape(n, 1, 1, d * tp)
    g_f1, g_f2_vals = _attend_backward(cache["at1"], g_m1, cache["f1_shape"])
    g_f2, g_f1_vals = _attend_backward(cache["at2"], g_m2, cache["f2_shape"])
    g_f1 = g_f1 + g_f1_vals.reshape(cache["f1_shape"])
    g_f2 = g_f2 + g_f2_vals.reshape(cache["f2_shape"])
    g_ft, gg, gb = _gate_branch_backward(cache["br1"], g_f1)
    grads["cna.gn_t.gamma"] += gg
    grads["cna.gn_t.beta"] += gb
    gx, gg, gb = _gate_branch_backward(cache["br2"], g_f2)
    grads["cna.gn_s.gamma"] += gg
    grads["cna.gn_s.beta"] += gb
    g_fs = g_fs + gx
    return g_ft.reshape(b, d, d, tp), g_fs.reshape(b, d, 1, tp)


# --------------------------------------------------------------------------
# classifier


def classify(e: np.ndarray, params: ListenNetParams):
    """Global average pool, linear layer, softmax. Returns (probs, cache)."""
    pooled = e.mean(axis=(2, 3))
    logits, lin = L.linear_forward(pooled, params["cls.w"], params["cls.b"])
    probs = T.softmax(logits, axis=1)
    return probs, (e.shape, lin, probs)


def classify_backward(cache, g_probs, grads):
    e_shape, lin, probs = cache
    g_logits = T.softmax_backward(probs, g_probs, axis=1)
    g_pooled, gw, gb = L.linear_backward(lin, g_logits)
    grads["cls.w"] += gw
    grads["cls.b"] += gb
    scale = 1.0 / (e_shape[2] * e_shape[3])
    return np.broadcast_to((g_pooled * scale)[:, :, None, None], e_shape).copy()


# --------------------------------------------------------------------------
# full network


@dataclass
class ModelCache:
    cfg: ModelConfig
    stde: dict
    mste: Optional[dict]
    cna: Optional[dict]
    cls: tuple
    acts: dict
    param_template: dict
    consumed: bool = False


def model_forward(x: np.ndarray, params: ListenNetParams, cfg: ModelConfig,
                  training: bool = False):
    e_t, e_s, c_stde = stde_forward(x, params, cfg)
    e_sp, c_mste, a_mste = mste_forward(e_t, e_s, params, cfg, training)
    e_ta = depth_align(e_t, cfg.d_depth) if cfg.use_cna else None
    e, c_cna, a_cna = cna_forward(e_ta, e_sp, params, cfg)
    probs, c_cls = classify(e, params)
    acts = {"E_t": e_t, "E_s": e_s, "E_s'": e_sp, "E": e, **a_mste, **a_cna}
    if e_ta is not None:
        acts["E_t'"] = e_ta
    return probs, ModelCache(cfg, c_stde, c_mste, c_cna, c_cls, acts,
                             {k: (v.shape, v.dtype) for k, v in params.weights.items()})


def model_backward(cache: ModelCache, grad_probs: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable tensor; consumes the cache."""
    if cache.consumed:
        raise UsageError("model cache already consumed by a previous backward call")
    cache.consumed = True
    cfg = cache.cfg
    grads = {k: np.zeros(s, dtype=dt) for k, (s, dt) in cache.param_template.items()}
    g_e = classify_backward(cache.cls, grad_probs, grads)
    g_eta, g_esp = cna_backward(cache.cna, g_e, cfg, grads)
    g_et_mste, g_es = mste_backward(cache.mste, g_esp, cfg, grads)
    g_et = np.zeros_like(cache.acts["E_t"])
    if g_eta is not None:
        g_et += depth_align_backward(g_eta, cfg.channels)
    if g_et_mste is not None:
        g_et += g_et_mste
    stde_backward(cache.stde, g_et, g_es, grads)
    return grads


def predict(x: np.ndarray, params: ListenNetParams, cfg: ModelConfig,
            batch_size: int = 256) -> np.ndarray:
    """Inference-mode class probabilities, evaluated in fixed-size chunks."""
    out = [model_forward(x[i:i + batch_size], params, cfg, training=False)[0]
           for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.num_classes), x.dtype)


# --------------------------------------------------------------------------
# accounting


def count_params(cfg: ModelConfig) -> int:
    total = 0
    for spec in conv_specs(cfg).values():
        total += int(np.prod(spec.weight_shape)) + (spec.out_depth if spec.bias else 0)
    total += 2 * cfg.d_depth                # batch-norm affine
    total += 2 * 2 * cfg.group_depth        # two group-norm affines
    total += cfg.num_classes * (cfg.d_depth + 1)
    return total


def count_macs(cfg: ModelConfig) -> int:
    """Multiply-accumulates for one window (batch 1)."""
    specs = conv_specs(cfg)
    d, c, tp = cfg.d_depth, cfg.channels, cfg.t_prime

    def conv_macs(name, h, w, batch=1):
        spec = specs[name]
        ho, wo = spec.out_hw(h, w)
        return batch * spec.out_depth * ho * wo * spec.fan_in

    total = conv_macs("stde_t.pw", c, cfg.window_len)
    total += conv_macs("stde_t.dw", c, cfg.window_len)
    total += conv_macs("stde_s.pw", c, tp)
    total += conv_macs("stde_s.dw", c, tp)
    if cfg.use_mste:
        for i in range(len(cfg.mste_kernels)):
            total += conv_macs(f"mste.conv{i}", c, tp)
        total += conv_macs("mste.skip", c, cfg.t_min)
    if cfg.use_cna:
        g, cg = cfg.groups, cfg.group_depth
        total += g * cg * tp            # softmax(F_1) x F_2
        total += g * cg * d * tp        # softmax(F_2) x F_1
        total += conv_macs("cna.fuse", 1, tp, batch=g)
    total += d * cfg.num_classes
    return total
