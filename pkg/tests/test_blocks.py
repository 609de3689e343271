import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import param_grad_check
from saekit.blocks import (
    SaEConfig,
    SaEParams,
    SEParams,
    gate_scales,
    init_sae_params,
    sae_forward,
    sae_param_count,
    sae_to_se_map,
    se_forward,
    se_to_sae_map,
)
from saekit.errors import ConfigError, DimensionError
from saekit.tensor import Tensor, mul, tsum


def scalar_gate(u, branch_w, branch_b, w2, b2):
    """Loop-by-loop reference of the aggregated gate; returns (out, s)."""
    n, c, h, w = u.shape
    out = np.empty_like(u)
    scales = np.empty((n, c))
    for b in range(n):
        z = [sum(u[b, ch, i, j] for i in range(h) for j in range(w)) / (h * w) for ch in range(c)]
        a = []
        for wi, bi in zip(branch_w, branch_b):
            for r in range(wi.shape[0]):
                v = bi[r] + sum(wi[r, ch] * z[ch] for ch in range(c))
                a.append(max(v, 0.0))
        for ch in range(c):
            e = b2[ch] + sum(w2[ch, q] * a[q] for q in range(len(a)))
            s = 1.0 / (1.0 + np.exp(-e))
            scales[b, ch] = s
            out[b, ch] = u[b, ch] * s
    return out, scales


def random_se(rng, c, r, dtype=np.float64):
    red = c // r
    return SEParams(
        Tensor(rng.normal(size=(red, c)).astype(dtype)),
        Tensor(rng.normal(size=red).astype(dtype)),
        Tensor(rng.normal(size=(c, red)).astype(dtype)),
        Tensor(rng.normal(size=c).astype(dtype)),
    )


def test_config_defaults_and_validation():
    cfg = SaEConfig(256)
    assert (cfg.reduction, cfg.cardinality, cfg.reduced) == (32, 4, 8)
    with pytest.raises(ConfigError):
        SaEConfig(30, reduction=4)
    with pytest.raises(ConfigError):
        SaEConfig(32, cardinality=0)


@pytest.mark.parametrize("c,r,k,expect", [(256, 32, 4, 16672), (256, 32, 1, 4360)])
def test_param_count_closed_form(c, r, k, expect):
    assert sae_param_count(SaEConfig(c, r, k)) == expect


def test_param_count_over_resnet50_stages():
    total = sum(n * sae_param_count(SaEConfig(c)) for c, n in [(256, 3), (512, 4), (1024, 6), (2048, 3)])
    assert total == 5_046_880
    # published totals 28.67M and 23.62M give a 5.05M gate budget
    assert abs(total - 5.05e6) / 5.05e6 < 0.01


@settings(max_examples=40, deadline=None)
@given(red=st.integers(1, 8), r=st.sampled_from([1, 2, 4, 8, 16, 32]), k=st.integers(1, 6))
def test_constructed_params_match_count_and_are_linear_in_k(red, r, k):
    cfg = SaEConfig(red * r, r, k)
    p = init_sae_params(cfg, np.random.default_rng(0))
    assert p.param_count() == sae_param_count(cfg)
    c = cfg.channels
    slope = sae_param_count(SaEConfig(c, r, k + 1)) - sae_param_count(cfg)
    assert slope == 2 * c * c // r + c // r


def test_saturated_positive_bias_passes_input_through(rng):
    cfg = SaEConfig(8, 4, 4)
    p = init_sae_params(cfg, rng, np.float64)
    for t in p.tensors():
        t.data[...] = 0
    p.excite_bias.data[...] = 20
    u = rng.normal(size=(2, 8, 3, 3))
    np.testing.assert_allclose(sae_forward(Tensor(u), p, cfg).data, u, atol=1e-6 * np.abs(u).max())


def test_saturated_negative_bias_kills_output(rng):
    cfg = SaEConfig(8, 4, 1)
    se = random_se(rng, 8, 4)
    se.squeeze_weight.data[...] = 0
    se.excite_weight.data[...] = 0
    se.excite_bias.data[...] = -20
    out = se_forward(Tensor(rng.normal(size=(2, 8, 3, 3))), se, cfg).data
    assert np.abs(out).max() < 1e-8


def test_se_matches_scalar_oracle(rng):
    cfg = SaEConfig(8, 4, 1)
    se = random_se(rng, 8, 4)
    u = rng.normal(size=(2, 8, 4, 4))
    ref, _ = scalar_gate(u, [se.squeeze_weight.data], [se.squeeze_bias.data], se.excite_weight.data, se.excite_bias.data)
    np.testing.assert_allclose(se_forward(Tensor(u), se, cfg).data, ref, atol=1e-6)


def test_sae_matches_scalar_oracle(rng):
    cfg = SaEConfig(8, 4, 3)
    p = init_sae_params(cfg, rng, np.float64)
    u = rng.normal(size=(2, 8, 4, 4))
    ref, _ = scalar_gate(
        u, [w.data for w in p.branch_weights], [b.data for b in p.branch_biases], p.excite_weight.data, p.excite_bias.data
    )
    np.testing.assert_allclose(sae_forward(Tensor(u), p, cfg).data, ref, atol=1e-6)


def test_single_branch_sae_is_bit_identical_to_se(rng):
    cfg = SaEConfig(16, 4, 1)
    se = random_se(rng, 16, 4, np.float32)
    for _ in range(20):
        u = Tensor(rng.normal(size=(2, 16, 3, 3)).astype(np.float32))
        assert np.array_equal(sae_forward(u, se_to_sae_map(se), cfg).data, se_forward(u, se, cfg).data)


def test_equal_branches_with_split_excitation_equal_se(rng):
    c, r, k = 8, 4, 4
    se = random_se(rng, c, r)
    p = SaEParams(
        [Tensor(se.squeeze_weight.data.copy()) for _ in range(k)],
        [Tensor(se.squeeze_bias.data.copy()) for _ in range(k)],
        Tensor(np.concatenate([se.excite_weight.data / k] * k, axis=1)),
        Tensor(se.excite_bias.data.copy()),
    )
    u = Tensor(rng.normal(size=(2, c, 3, 3)))
    np.testing.assert_allclose(
        sae_forward(u, p, SaEConfig(c, r, k)).data, se_forward(u, se, SaEConfig(c, r, 1)).data, atol=1e-6
    )


def test_zero_input_gives_zero_output(rng):
    cfg = SaEConfig(8, 2, 2)
    p = init_sae_params(cfg, rng, np.float64)
    out = sae_forward(Tensor(np.zeros((1, 8, 2, 2))), p, cfg)
    assert np.all(out.data == 0)
    a = np.concatenate([np.maximum(b.data, 0) for b in p.branch_biases])
    expect = 1 / (1 + np.exp(-(p.excite_weight.data @ a + p.excite_bias.data)))
    np.testing.assert_allclose(gate_scales(Tensor(np.zeros((1, 8, 2, 2))), p, cfg).data[0], expect, rtol=1e-12)


def test_map_round_trip_and_counts(rng):
    se = random_se(rng, 256, 32)
    back = sae_to_se_map(se_to_sae_map(se))
    for a, b in zip(
        (se.squeeze_weight, se.squeeze_bias, se.excite_weight, se.excite_bias),
        (back.squeeze_weight, back.squeeze_bias, back.excite_weight, back.excite_bias),
    ):
        assert np.array_equal(a.data, b.data)
    assert se_to_sae_map(se).param_count() == 4360


def test_shape_mismatches_raise(rng):
    cfg = SaEConfig(8, 4, 2)
    p = init_sae_params(cfg, rng)
    with pytest.raises(DimensionError):
        sae_forward(Tensor(np.ones((1, 4, 2, 2))), p, cfg)
    with pytest.raises(DimensionError):
        sae_forward(Tensor(np.ones((1, 8, 2, 2))), p, SaEConfig(8, 4, 3))
    with pytest.raises(DimensionError):
        sae_to_se_map(p)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(-50, 50))
def test_gate_range_and_channelwise_scaling(seed, scale):
    rng = np.random.default_rng(seed)
    cfg = SaEConfig(8, 4, 2)
    p = init_sae_params(cfg, rng, np.float64)
    u = scale * rng.normal(size=(2, 8, 3, 3))
    s = gate_scales(Tensor(u), p, cfg).data
    assert np.all((s > 0) & (s < 1))
    ref, ref_s = scalar_gate(
        u, [w.data for w in p.branch_weights], [b.data for b in p.branch_biases], p.excite_weight.data, p.excite_bias.data
    )
    np.testing.assert_allclose(s, ref_s, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(sae_forward(Tensor(u), p, cfg).data, u * s[:, :, None, None], rtol=1e-12)
    np.testing.assert_allclose(sae_forward(Tensor(u), p, cfg).data, ref, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("k", [1, 4])
def test_gate_gradients(k, rng):
    c, r = 8, 4
    cfg = SaEConfig(c, r, k)
    p0 = init_sae_params(cfg, rng, np.float64)
    weights = rng.normal(size=(2, c, 3, 3))
    params = {"u": rng.normal(size=(2, c, 3, 3)), "w2": p0.excite_weight.data, "b2": p0.excite_bias.data}
    for i in range(k):
        params[f"branch_w{i}"] = p0.branch_weights[i].data
        params[f"branch_b{i}"] = p0.branch_biases[i].data

    def f(t):
        p = SaEParams([t[f"branch_w{i}"] for i in range(k)], [t[f"branch_b{i}"] for i in range(k)], t["w2"], t["b2"])
        return tsum(mul(sae_forward(t["u"], p, cfg), Tensor(weights)))

    assert param_grad_check(f, params) < 1e-4
