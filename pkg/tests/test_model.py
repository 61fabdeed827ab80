import math

import numpy as np
import pytest

from listennet import model as M
from listennet import verify
from listennet.errors import ConfigError, ShapeError, UsageError

GOLDEN_PARAMS_C64 = 3340
GOLDEN_PARAMS_C32 = 2316
GOLDEN_MACS_C64_T128 = 8_734_968
GOLDEN_MACS_C32_T128 = 4_392_184


def test_init_deterministic_and_bounded():
    cfg = M.ModelConfig(channels=16, window_len=32)
    a, b = M.init_params(cfg, 5), M.init_params(cfg, 5)
    for k in a.weights:
        assert a[k].tobytes() == b[k].tobytes()
    assert np.all(a["mste.bn.gamma"] == 1) and np.all(a["cna.gn_t.gamma"] == 1)
    assert np.all(a["mste.bn.beta"] == 0) and np.all(a["stde_t.dw.b"] == 0)
    bound = math.sqrt(6 / 8)
    assert bound == pytest.approx(0.866, abs=1e-3)
    assert np.abs(a["stde_t.dw.w"]).max() <= bound
    assert a.num_scalars() == M.count_params(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(channels=16, window_len=32, d_depth=10)
    with pytest.raises(ConfigError):
        M.ModelConfig(channels=16, window_len=10)
    with pytest.raises(ConfigError):
        M.ModelConfig(channels=8, window_len=32)
    M.ModelConfig(channels=8, window_len=32, use_cna=False)


@pytest.mark.parametrize("c", [64, 32])
def test_stde_shapes(c):
    cfg = M.ModelConfig(channels=c, window_len=128)
    params = M.init_params(cfg, 0)
    e_t, e_s, _ = M.stde_forward(np.zeros((2, 1, c, 128), np.float32), params, cfg)
    assert e_t.shape == (2, 16, c, 121) and e_s.shape == (2, 16, 1, 121)
    assert not e_t.any()


def test_stde_rejects_short_window(small_cfg, small_params):
    with pytest.raises(ShapeError):
        M.stde_forward(np.zeros((1, 1, 16, 31), np.float32), small_params, small_cfg)


def test_full_shapes_c64():
    cfg = M.ModelConfig(channels=64, window_len=128)
    params = M.init_params(cfg, 0)
    x = np.random.default_rng(0).standard_normal((3, 1, 64, 128)).astype(np.float32)
    probs, cache = M.model_forward(x, params, cfg)
    a = cache.acts
    assert a["E_t"].shape == (3, 16, 64, 121)
    assert a["U"].shape == (3, 16, 64, 117)
    assert a["S"].shape == (3, 16, 1, 121)
    assert a["E_t'"].shape == (3, 16, 16, 121)
    assert a["W"].shape == (3 * 8, 1, 1, 121)
    assert a["E"].shape == (3, 16, 1, 121)
    assert probs.shape == (3, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_mste_zero_input_passthrough(small_cfg, small_params):
    e_t = np.zeros((2, 16, 16, small_cfg.t_prime), np.float32)
    e_s = np.random.default_rng(0).standard_normal((2, 16, 1, small_cfg.t_prime)).astype(np.float32)
    out, _, _ = M.mste_forward(e_t, e_s, small_params, small_cfg, training=True)
    np.testing.assert_allclose(out, e_s, atol=1e-6)


@pytest.mark.parametrize("flag", ["use_mste", "use_cna"])
def test_ablation_toggles_are_identity(flag, rng):
    cfg = M.ModelConfig(channels=16, window_len=32, **{flag: False})
    params = M.init_params(cfg, 0)
    e_t = rng.standard_normal((2, 16, 16, cfg.t_prime)).astype(np.float32)
    e_s = rng.standard_normal((2, 16, 1, cfg.t_prime)).astype(np.float32)
    if flag == "use_mste":
        out, _, _ = M.mste_forward(e_t, e_s, params, cfg, training=True)
    else:
        out, _, _ = M.cna_forward(M.depth_align(e_t, 16), e_s, params, cfg)
    assert out is e_s


def test_depth_align():
    x = np.random.default_rng(0).standard_normal((1, 16, 64, 5))
    out = M.depth_align(x, 16)
    np.testing.assert_allclose(out[0, :, 3], x[0, :, 12:16].mean(axis=1))
    np.testing.assert_allclose(M.depth_align(np.full((1, 2, 40, 3), 2.5), 16), 2.5)
    np.testing.assert_array_equal(M.depth_align(x[:, :, :16], 16), x[:, :, :16])


def test_cna_group_shapes(small_cfg, small_params, rng):
    e_t = rng.standard_normal((3, 16, 16, small_cfg.t_prime)).astype(np.float32)
    e_s = rng.standard_normal((3, 16, 1, small_cfg.t_prime)).astype(np.float32)
    e, _, acts = M.cna_forward(e_t, e_s, small_params, small_cfg)
    assert small_cfg.group_depth == 2
    assert acts["F_t"].shape == (24, 2, 16, small_cfg.t_prime)
    assert acts["W"].shape == (24, 1, 1, small_cfg.t_prime)
    assert e.shape == e_s.shape


def test_uniform_attention_averages():
    q = np.zeros((1, 2, 3, 4))
    vals = np.random.default_rng(0).standard_normal((1, 2, 1, 4))
    m, _ = M._attend(q, vals)
    np.testing.assert_allclose(m.reshape(-1), vals[0, :, 0].mean(axis=0))


def test_classifier_examples(small_cfg, small_params):
    p = small_params.copy()
    p.weights["cls.w"][:] = 0
    probs, _ = M.classify(np.random.default_rng(0).standard_normal((4, 16, 1, 7)), p)
    np.testing.assert_allclose(probs, 0.5)
    p.weights["cls.b"][:] = [math.log(3), 0.0]
    probs, _ = M.classify(np.zeros((1, 16, 1, 7)), p)
    np.testing.assert_allclose(probs[0], [0.75, 0.25])


def test_inference_batch_properties(small_cfg, small_params, rng):
    x = rng.standard_normal((5, 1, 16, 32)).astype(np.float32)
    same = np.repeat(x[:1], 3, axis=0)
    p_same, _ = M.model_forward(same, small_params, small_cfg, training=False)
    np.testing.assert_allclose(p_same, np.repeat(p_same[:1], 3, axis=0), atol=1e-6)
    perm = rng.permutation(5)
    p, _ = M.model_forward(x, small_params, small_cfg)
    p_perm, _ = M.model_forward(x[perm], small_params, small_cfg)
    np.testing.assert_allclose(p_perm, p[perm], atol=1e-6)


def test_backward_zero_and_reuse(small_cfg, small_params, rng):
    x = rng.standard_normal((2, 1, 16, 32)).astype(np.float32)
    probs, cache = M.model_forward(x, small_params, small_cfg, training=True)
    grads = M.model_backward(cache, np.zeros_like(probs))
    assert all(not g.any() for g in grads.values())
    with pytest.raises(UsageError):
        M.model_backward(cache, np.zeros_like(probs))


def test_disabled_mste_has_zero_grads(rng):
    cfg = M.ModelConfig(channels=16, window_len=32, use_mste=False)
    params = M.init_params(cfg, 0)
    probs, cache = M.model_forward(rng.standard_normal((2, 1, 16, 32)).astype(np.float32), params, cfg, True)
    grads = M.model_backward(cache, rng.standard_normal(probs.shape).astype(np.float32))
    assert all(not grads[k].any() for k in grads if k.startswith("mste."))
    assert any(grads[k].any() for k in grads if k.startswith("stde_"))


@pytest.mark.parametrize("overrides", [{}, {"use_mste": False}, {"use_cna": False}, {"dilation": 2}])
def test_end_to_end_gradcheck(overrides):
    report = verify.model_gradcheck(seed=2, **overrides)
    assert report.passed, report.line()


def test_param_count_golden():
    assert M.count_params(M.ModelConfig(64, 128)) == GOLDEN_PARAMS_C64
    assert M.count_params(M.ModelConfig(32, 128)) == GOLDEN_PARAMS_C32
    assert M.init_params(M.ModelConfig(64, 128), 0).num_scalars() == GOLDEN_PARAMS_C64
    assert M.count_params(M.ModelConfig(64, 128, d_depth=32)) > 2 * GOLDEN_PARAMS_C64


def test_mac_count_golden():
    assert M.count_macs(M.ModelConfig(64, 128)) == GOLDEN_MACS_C64_T128
    assert M.count_macs(M.ModelConfig(32, 128)) == GOLDEN_MACS_C32_T128
    assert abs(math.log2(GOLDEN_MACS_C64_T128 / 12.16e6)) < 1


def test_pointwise_mac_instance():
    cfg = M.ModelConfig(64, 128)
    spec = M.conv_specs(cfg)["stde_t.pw"]
    ho, wo = spec.out_hw(64, 128)
    assert spec.out_depth * ho * wo * spec.fan_in == 131_072


def test_macs_roughly_linear_in_time():
    a = M.count_macs(M.ModelConfig(64, 256))
    b = M.count_macs(M.ModelConfig(64, 512))
    assert b / a == pytest.approx(2.0, rel=0.05)


def _perturbed(cfg, seed=1):
    params = M.init_params(cfg, 0, dtype=np.float64)
    r = np.random.default_rng(seed)
    for k in params.weights:
        params.weights[k] += 0.1 * r.standard_normal(params.weights[k].shape)
    return params


@pytest.mark.parametrize("k0", [1, 3, 8])
def test_temporal_stage_matches_layer_pair(k0, rng):
    from listennet import layers as L
    cfg = M.ModelConfig(channels=16, window_len=40, k0=k0)
    params = _perturbed(cfg)
    specs = M.conv_specs(cfg)
    x = rng.standard_normal((3, 1, 16, 40))
    h, _ = L.conv2d_forward(x, specs["stde_t.pw"], params["stde_t.pw.w"], params["stde_t.pw.b"])
    ref, _ = L.conv2d_forward(h, specs["stde_t.dw"], params["stde_t.dw.w"], params["stde_t.dw.b"])
    out, _ = M._temporal_forward(x, params, cfg)
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("kernels, dilation", [((1, 2, 3, 5), 1), ((1, 2, 3, 5), 2), ((3, 1, 4, 2), 1)])
def test_branch_stack_matches_slice_and_concat(kernels, dilation, rng):
    from listennet import layers as L
    from listennet import tensor as T
    cfg = M.ModelConfig(channels=16, window_len=40, mste_kernels=kernels, dilation=dilation)
    params = _perturbed(cfg)
    specs = M.conv_specs(cfg)
    e_t = rng.standard_normal((2, 16, 16, cfg.t_prime))
    parts = []
    for i in range(4):
        y, _ = L.conv2d_forward(e_t, specs[f"mste.conv{i}"], params[f"mste.conv{i}.w"], params[f"mste.conv{i}.b"])
        parts.append(T.slice_time_last(y, cfg.t_min))
    ref = T.concat_depth(parts)
    out, _ = M._branches_forward(e_t, params, cfg)
    np.testing.assert_allclose(out, ref, atol=1e-12)
