"""Independent oracles: naive convolution, central finite differences,
alignment whitening checks, and the batteries that run them.

Nothing here calls the backward passes it checks except to obtain the
analytic side of a comparison. The oracle side always runs in float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from . import layers as L
from . import model as M
from . import tensor as T
from .train import bce_loss

LAYER_GATE = 1e-4
MODEL_GATE = 1e-3
FD_EPS = 1e-4


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    gate: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.gate)

    def to_record(self) -> dict:
        return {**asdict(self), "passed": self.passed}

    def line(self) -> str:
        return json.dumps(self.to_record())


# --------------------------------------------------------------------------
# naive convolution


def naive_conv(x, spec: L.ConvSpec, weight, bias=None) -> np.ndarray:
    """Direct loop-nest evaluation in double precision."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != spec.in_depth:
        raise L.ShapeError(f"naive_conv: input {x.shape} does not match {spec}")
    if tuple(weight.shape) != spec.weight_shape:
        raise L.ShapeError(f"naive_conv: weight {weight.shape} != {spec.weight_shape}")
    (kh, kw), (dh, dw) = spec.kernel, spec.dilation
    nb, _, h, w = x.shape
    ho, wo = h - (kh - 1) * dh, w - (kw - 1) * dw
    if ho < 1 or wo < 1:
        raise L.ShapeError("naive_conv: kernel larger than input")
    cin = spec.in_depth // spec.groups
    cout = spec.out_depth // spec.groups
    xs = x.tolist()
    ws = np.asarray(weight, dtype=np.float64).tolist()
    bs = [0.0] * spec.out_depth if bias is None or not spec.bias else [float(v) for v in bias]
    out = np.zeros((nb, spec.out_depth, ho, wo))
    for b in range(nb):
        for o in range(spec.out_depth):
            base = (o // cout) * cin
            for i in range(ho):
                for j in range(wo):
                    acc = bs[o]
                    for c in range(cin):
                        plane = xs[b][base + c]
                        wc = ws[o][c]
                        for u in range(kh):
                            row = plane[i + u * dh]
                            wu = wc[u]
                            for v in range(kw):
                                acc += wu[v] * row[j + v * dw]
                    out[b, o, i, j] = acc
    return out


# --------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[], float], arrays: dict[str, np.ndarray],
                     analytic: dict[str, np.ndarray], name: str = "",
                     eps: float = FD_EPS, n_samples: int = 50, gate: float = LAYER_GATE,
                     rng=None) -> GradCheckReport:
    """Compare analytic gradients against central differences of ``f``.

    ``f`` reads the float64 arrays in ``arrays``; entries are perturbed in
    place and restored. Up to ``n_samples`` entries are drawn uniformly over
    all arrays (every entry if there are fewer).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    keys = list(arrays)
    sizes = np.array([arrays[k].size for k in keys])
    total = int(sizes.sum())
    picks = np.arange(total) if total <= n_samples else np.sort(rng.choice(total, n_samples, replace=False))
    bounds = np.cumsum(sizes)
    max_rel = max_abs = 0.0
    for flat in picks:
        a = int(np.searchsorted(bounds, flat, side="right"))
        k = keys[a]
        off = int(flat - (bounds[a] - sizes[a]))
        arr = arrays[k].reshape(-1)
        old = arr[off]
        arr[off] = old + eps
        fp = f()
        arr[off] = old - eps
        fm = f()
        arr[off] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            return GradCheckReport(name, math.inf, math.inf, len(picks), gate)
        num = (fp - fm) / (2.0 * eps)
        ana = float(analytic[k].reshape(-1)[off])
        err = abs(num - ana)
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / max(abs(num), abs(ana), 1e-8))
    return GradCheckReport(name, max_rel, max_abs, len(picks), gate)


def check_layer(name: str, forward: Callable, backward: Callable, arrays: dict[str, np.ndarray],
                rng, n_samples: int = 50, gate: float = LAYER_GATE) -> GradCheckReport:
    """``forward(arrays) -> (out, cache)``; ``backward(cache, g) -> {key: grad}``."""
    out, cache = forward(arrays)
    r = rng.standard_normal(out.shape)
    grads = backward(cache, r)
    return finite_diff_grad(lambda: float(np.sum(forward(arrays)[0] * r)), arrays, grads,
                            name=name, n_samples=n_samples, gate=gate, rng=rng)


# --------------------------------------------------------------------------
# alignment


def check_alignment(windows: Iterable, matrix: np.ndarray) -> float:
    """Frobenius distance from I of the mean covariance of M @ X over windows."""
    m = np.asarray(matrix, dtype=np.float64)
    acc = None
    count = 0
    for w in windows:
        data = np.asarray(getattr(w, "data", w), dtype=np.float64)
        y = np.dot(m, data)
        cov = np.dot(y, y.T) / y.shape[1]
        acc = cov if acc is None else acc + cov
        count += 1
    mean = acc / count
    return float(np.linalg.norm(mean - np.eye(mean.shape[0]), "fro"))


# --------------------------------------------------------------------------
# batteries


def _conv_case(name, spec, x_shape, rng):
    arrays = {
        "x": rng.standard_normal(x_shape),
        "w": rng.uniform(-1, 1, spec.weight_shape),
        "b": rng.standard_normal(spec.out_depth),
    }

    def fwd(a):
        return L.conv2d_forward(a["x"], spec, a["w"], a["b"])

    def bwd(cache, g):
        gx, gw, gb = L.conv2d_backward(cache, g)
        return {"x": gx, "w": gw, "b": gb}

    return check_layer(name, fwd, bwd, arrays, rng)


def _norm_cases(rng):
    reports = []
    x = rng.standard_normal((4, 16, 8, 9)) * 2 + 0.5
    for training in (True, False):
        arrays = {"x": x.copy(), "gamma": rng.uniform(0.5, 1.5, 16), "beta": rng.standard_normal(16)}
        rm, rv = rng.standard_normal(16), rng.uniform(0.5, 2, 16)

        def fwd(a, training=training, rm=rm, rv=rv):
            return L.batchnorm_forward(a["x"], a["gamma"], a["beta"], rm.copy(), rv.copy(), training)

        def bwd(cache, g):
            gx, gg, gb = L.norm_backward(cache, g)
            return {"x": gx, "gamma": gg, "beta": gb}

        reports.append(check_layer(f"batchnorm[{'train' if training else 'eval'}]", fwd, bwd, arrays, rng))
    arrays = {"x": rng.standard_normal((16, 2, 16, 13)), "gamma": rng.uniform(0.5, 1.5, 2),
              "beta": rng.standard_normal(2)}

    def gn_fwd(a):
        return L.groupnorm_forward(a["x"], a["gamma"], a["beta"], 2)

    def gn_bwd(cache, g):
        gx, gg, gb = L.norm_backward(cache, g)
        return {"x": gx, "gamma": gg, "beta": gb}

    reports.append(check_layer("groupnorm", gn_fwd, gn_bwd, arrays, rng))
    arrays = {"x": rng.standard_normal((3, 12, 2, 5)), "gamma": rng.uniform(0.5, 1.5, 12),
              "beta": rng.standard_normal(12)}
    reports.append(check_layer("groupnorm[3 groups]",
                               lambda a: L.groupnorm_forward(a["x"], a["gamma"], a["beta"], 3),
                               gn_bwd, arrays, rng))
    return reports


def _activation_cases(rng):
    reports = []
    for kind, axis in (("gelu", None), ("sigmoid", None), ("softmax", 1), ("softmax", 3)):
        arrays = {"x": rng.standard_normal((3, 4, 2, 5)) * 2}
        reports.append(check_layer(
            f"{kind}" + (f"[axis={axis}]" if axis is not None else ""),
            lambda a, kind=kind, axis=axis: L.activation_forward(a["x"], kind, axis),
            lambda c, g: {"x": L.activation_backward(c, g)},
            arrays, rng))
    return reports


def _linear_case(rng):
    arrays = {"x": rng.standard_normal((5, 16)), "w": rng.standard_normal((2, 16)),
              "b": rng.standard_normal(2)}

    def bwd(cache, g):
        gx, gw, gb = L.linear_backward(cache, g)
        return {"x": gx, "w": gw, "b": gb}

    return check_layer("linear", lambda a: L.linear_forward(a["x"], a["w"], a["b"]), bwd, arrays, rng)


def _structural_cases(rng):
    reports = []
    x = {"x": rng.standard_normal((2, 3, 64, 7))}
    reports.append(check_layer(
        "adaptive_avg_pool[64->16]",
        lambda a: (T.adaptive_avg_pool(a["x"], 16, 7), None),
        lambda c, g: {"x": T.adaptive_avg_pool_backward(g, 64, 7)}, x, rng))
    x = {"x": rng.standard_normal((2, 3, 10, 7))}
    reports.append(check_layer(
        "adaptive_avg_pool[10x7->4x3]",
        lambda a: (T.adaptive_avg_pool(a["x"], 4, 3), None),
        lambda c, g: {"x": T.adaptive_avg_pool_backward(g, 10, 7)}, x, rng))
    x = {"x": rng.standard_normal((2, 4, 1, 117))}
    reports.append(check_layer(
        "linear_resize_time[117->121]",
        lambda a: (T.linear_resize_time(a["x"], 121), None),
        lambda c, g: {"x": T.linear_resize_time_backward(g, 117)}, x, rng))
    x = {"x": rng.standard_normal((2, 4, 3, 9))}
    reports.append(check_layer(
        "slice_time_last[9->5]",
        lambda a: (T.slice_time_last(a["x"], 5), None),
        lambda c, g: {"x": T.slice_time_last_backward(g, 9)}, x, rng))
    return reports


def _block_cases(rng):
    """Whole STDE / MSTE / CNA / classifier blocks of a small model."""
    cfg = M.ModelConfig(channels=16, window_len=24)
    params = M.init_params(cfg, 7, dtype=np.float64)
    for k in params.weights:
        params.weights[k] += 0.1 * rng.standard_normal(params.weights[k].shape)
    x = rng.standard_normal((3, 1, 16, 24))
    e_t, e_s, _ = M.stde_forward(x, params, cfg)
    reports = []

    def block(name, fwd, bwd, inputs):
        arrays = {**params.weights, **inputs}
        p = M.ListenNetParams(arrays, params.buffers)

        def forward(a):
            return fwd(p, a)

        def backward(cache, g):
            grads = {k: np.zeros_like(v) for k, v in params.weights.items()}
            return {**grads, **bwd(cache, g, grads)}

        reports.append(check_layer(name, forward, backward, arrays, rng, n_samples=80))

    def stde_f(p, a):
        e_t, e_s, c = M.stde_forward(a["x"], p, cfg)
        return np.concatenate([e_t.ravel(), e_s.ravel()]), (c, e_t.shape)

    def stde_b(cache, g, grads):
        c, shape = cache
        n = int(np.prod(shape))
        return {"x": M.stde_backward(c, g[:n].reshape(shape), g[n:].reshape(e_s.shape), grads)}

    block("stde", stde_f, stde_b, {"x": x.copy()})

    def mste_f(p, a):
        out, c, _ = M.mste_forward(a["e_t"], a["e_s"], p, cfg, training=True)
        return out, c

    def mste_b(cache, g, grads):
        g_et, g_es = M.mste_backward(cache, g, cfg, grads)
        return {"e_t": g_et, "e_s": g_es}

    block("mste", mste_f, mste_b, {"e_t": e_t.copy(), "e_s": e_s.copy()})

    def cna_f(p, a):
        out, c, _ = M.cna_forward(M.depth_align(a["e_t"], cfg.d_depth), a["e_sp"], p, cfg)
        return out, c

    def cna_b(cache, g, grads):
        g_eta, g_esp = M.cna_backward(cache, g, cfg, grads)
        return {"e_t": M.depth_align_backward(g_eta, cfg.channels), "e_sp": g_esp}

    block("cna", cna_f, cna_b, {"e_t": e_t.copy(), "e_sp": e_s.copy() + 0.3})

    def cls_f(p, a):
        return M.classify(a["e"], p)

    def cls_b(cache, g, grads):
        return {"e": M.classify_backward(cache, g, grads)}

    block("classifier", cls_f, cls_b, {"e": e_s.copy()})
    return reports


def layer_battery(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = [
        _conv_case("conv[pointwise 1->16]", L.ConvSpec(1, 16, (1, 1)), (2, 1, 8, 20), rng),
        _conv_case("conv[pointwise 16->16]", L.ConvSpec(16, 16, (1, 1)), (2, 16, 4, 10), rng),
        _conv_case("conv[depthwise 1x8]", L.ConvSpec(16, 16, (1, 8), groups=16), (2, 16, 8, 20), rng),
        _conv_case("conv[depthwise 64x1]", L.ConvSpec(16, 16, (64, 1), groups=16), (2, 16, 64, 9), rng),
    ]
    for k in (1, 2, 3, 5):
        for d in (1, 2):
            reports.append(_conv_case(f"conv[dilated 1x{k} d={d}]",
                                      L.ConvSpec(16, 4, (1, k), dilation=(1, d)), (2, 16, 4, 16), rng))
    reports.append(_conv_case("conv[fusion 17->1]", L.ConvSpec(17, 1, (1, 1)), (16, 17, 1, 12), rng))
    reports += _norm_cases(rng)
    reports.append(_linear_case(rng))
    reports += _activation_cases(rng)
    reports += _structural_cases(rng)
    reports += _block_cases(rng)
    return reports


TOY_CONFIG = dict(channels=8, window_len=32, d_depth=8)


def model_gradcheck(seed: int = 0, n_samples: int = 50, gate: float = MODEL_GATE,
                    **cfg_overrides) -> GradCheckReport:
    """End-to-end check of model_forward/model_backward through the BCE loss
    on a (2, 1, 8, 32) batch in training mode."""
    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig(**{**TOY_CONFIG, **cfg_overrides})
    params = M.init_params(cfg, seed, dtype=np.float64)
    for k in params.weights:
        params.weights[k] += 0.1 * rng.standard_normal(params.weights[k].shape)
    x = rng.standard_normal((2, 1, cfg.channels, cfg.window_len))
    y = np.array([0, 1])

    def loss():
        probs, _ = M.model_forward(x, params, cfg, training=True)
        return bce_loss(probs, y)[0]

    probs, cache = M.model_forward(x, params, cfg, training=True)
    _, g = bce_loss(probs, y)
    grads = M.model_backward(cache, g)
    name = "model[end-to-end]" + "".join(f"[{k}={v}]" for k, v in cfg_overrides.items())
    return finite_diff_grad(loss, params.weights, grads, name=name,
                            n_samples=n_samples, gate=gate, rng=rng)


def full_battery(seed: int = 0) -> list[GradCheckReport]:
    return layer_battery(seed) + [model_gradcheck(seed)]


# --------------------------------------------------------------------------
# convolution equivalence


CONV_ROLES = ("pointwise", "depthwise_1x8", "depthwise_64x1", "dilated")


def random_conv_case(role: str, rng):
    """A randomized (spec, x, weight, bias) for one of the model's conv roles."""
    b = int(rng.integers(1, 3))
    if role == "pointwise":
        cin, cout = int(rng.choice([1, 4, 16, 17])), int(rng.choice([1, 4, 16]))
        spec = L.ConvSpec(cin, cout, (1, 1))
        shape = (b, cin, int(rng.integers(1, 6)), int(rng.integers(1, 12)))
    elif role == "depthwise_1x8":
        d = int(rng.choice([4, 8, 16]))
        spec = L.ConvSpec(d, d, (1, 8), groups=d)
        shape = (b, d, int(rng.integers(1, 5)), int(rng.integers(8, 20)))
    elif role == "depthwise_64x1":
        d = int(rng.choice([4, 8, 16]))
        spec = L.ConvSpec(d, d, (64, 1), groups=d)
        shape = (b, d, 64, int(rng.integers(1, 6)))
    else:
        k, dil = int(rng.choice([1, 2, 3, 5])), int(rng.choice([1, 2]))
        d = int(rng.choice([4, 8, 16]))
        spec = L.ConvSpec(d, d // 4, (1, k), dilation=(1, dil))
        shape = (b, d, int(rng.integers(1, 4)), (k - 1) * dil + int(rng.integers(1, 10)))
    x = rng.standard_normal(shape).astype(np.float32)
    bound = math.sqrt(6.0 / spec.fan_in)
    w = rng.uniform(-bound, bound, spec.weight_shape).astype(np.float32)
    bias = rng.standard_normal(spec.out_depth).astype(np.float32)
    return spec, x, w, bias


def conv_equivalence(n_specs: int = 200, seed: int = 0) -> float:
    """Max |optimized float32 conv - naive float64 conv| over randomized specs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_specs):
        spec, x, w, b = random_conv_case(CONV_ROLES[i % len(CONV_ROLES)], rng)
        fast, _ = L.conv2d_forward(x, spec, w, b)
        ref = naive_conv(x, spec, w, b)
        worst = max(worst, float(np.max(np.abs(fast.astype(np.float64) - ref))))
    return worst
