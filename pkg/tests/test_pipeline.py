import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthoquant.attention import ExecConfig
from orthoquant.numerics import PrecisionMode
from orthoquant.pipeline import (
    LayerKind,
    ModelSpec,
    bitwidth_sweep,
    bypass_config,
    gelu,
    gelu_bf16,
    init_model,
    layer_norm,
    rotated_layer_norm,
    run_quantized,
    run_reference,
)
from orthoquant.quant import ActivationKind, FusionParams, Method, synth_activations
from orthoquant.transforms import apply_wht

SMALL = ModelSpec(S=2, P=32, C=128, h=4)


def rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


@pytest.fixture(scope="module")
def model():
    return init_model(SMALL, 0)


@pytest.fixture(scope="module")
def x():
    return synth_activations("gaussian", SMALL.tokens, SMALL.C, 1)


@pytest.fixture(scope="module")
def ref(model, x):
    return run_reference(model, x)


def test_spec_layers_alternate():
    kinds = ModelSpec(blocks=3).layers
    assert kinds == [LayerKind.FRAME, LayerKind.MLP, LayerKind.GLOBAL, LayerKind.MLP,
                     LayerKind.FRAME, LayerKind.MLP]
    with pytest.raises(ValueError):
        ModelSpec(C=96)


def test_init_deterministic_and_seed_sensitive():
    a, b, c = init_model(SMALL, 3), init_model(SMALL, 3), init_model(SMALL, 4)
    for la, lb, lc in zip(a.layers, b.layers, c.layers):
        for key in la.weights:
            assert np.array_equal(la.weights[key], lb.weights[key])
            assert not np.array_equal(la.weights[key], lc.weights[key])
        assert np.array_equal(la.norm.gamma, lb.norm.gamma)


def test_init_fan_in_variance():
    m = init_model(ModelSpec(S=1, P=4, C=256, h=4, blocks=1), 0)
    for lp in m.layers:
        for key, w in lp.weights.items():
            if w.ndim == 2:
                assert abs(w.var() * w.shape[0] - 1) < 0.2, key


def test_init_norm_params():
    lp = init_model(ModelSpec(S=1, P=4, C=512, h=8, blocks=1), 0).layers[0]
    assert np.all(lp.norm.gamma >= 0) and abs(lp.norm.gamma.mean() - 1) < 0.05
    assert abs(lp.norm.beta.std() - 0.02) < 0.005
    assert np.all(lp.norm.layerscale >= 0) and abs(lp.norm.layerscale.std() - 0.1) < 0.02


def test_reference_metrics_are_exact(ref):
    assert ref.metrics == {"mse": 0.0, "max_abs": 0.0, "cosine": 1.0}
    assert len(ref.residuals) == len(SMALL.layers)


def test_reference_matches_manual_first_layer(model, x, ref):
    # an MLP layer re-derived from scratch
    lp = model.layers[1]
    r0 = ref.residuals[0]
    w = lp.weights
    mlp = gelu(layer_norm(r0, lp.norm) @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]
    np.testing.assert_allclose(ref.residuals[1], r0 + mlp * lp.norm.layerscale, atol=1e-12)


def test_input_validation(model):
    with pytest.raises(ValueError):
        run_reference(model, np.ones((3, SMALL.C)))
    bad = np.ones((SMALL.tokens, SMALL.C))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        run_reference(model, bad)


@pytest.mark.parametrize("method", list(Method))
def test_bypass_f64_matches_reference(model, x, ref, method):
    res = run_quantized(model, x, config=bypass_config(method, "f64"), reference=ref)
    assert rel(res.output, ref.output) < 1e-10


@pytest.mark.parametrize("method", [Method.WHT, Method.VERSAQ])
def test_bypass_bf16_rotated_equals_plain_dataflow(model, x, ref, method):
    plain = run_quantized(model, x, config=bypass_config(Method.RTN, "bf16"), reference=ref)
    rot = run_quantized(model, x, config=bypass_config(method, "bf16"), reference=ref)
    assert rel(rot.output, plain.output) < 1e-6


def test_integer_dct_variant_bypass(model, x, ref):
    res = run_quantized(model, x, config=bypass_config(Method.VERSAQ, "f64"), reference=ref,
                        dct_variant="integer")
    assert rel(res.output, ref.output) < 1e-10


@given(st.integers(0, 2**31))
@settings(max_examples=25)
def test_rotated_residual_linearity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 8, 128))
    lhs = apply_wht(apply_wht(a) + apply_wht(b))
    assert np.abs(lhs - (a + b)).max() < 1e-12


@given(st.integers(0, 2**31), st.booleans())
@settings(max_examples=25)
def test_rotated_layer_norm_matches_plain(seed, bf16):
    r = np.random.default_rng(seed).standard_normal((6, 64)) * 2 + 0.5
    plain = rotated_layer_norm(r, 1e-6, False, bf16)
    rot = rotated_layer_norm(apply_wht(r), 1e-6, True, bf16)
    assert np.abs(apply_wht(rot) - plain).max() < 1e-10
    fp = FusionParams.identity(64)
    if not bf16:
        np.testing.assert_allclose(plain, layer_norm(r, fp), atol=1e-12)


def test_gelu_bf16_close_to_float():
    x = np.linspace(-6, 6, 1001)
    assert np.abs(gelu_bf16(x) - gelu(x)).max() < 0.05
    assert gelu(0.0) == 0.0


def test_zero_input_has_no_nan(model):
    z = np.zeros((SMALL.tokens, SMALL.C))
    ref = run_reference(model, z)
    assert np.all(np.isfinite(ref.output))
    for mode in PrecisionMode:
        for method in Method:
            res = run_quantized(model, z, mode, method, reference=ref)
            assert np.all(np.isfinite(res.output)), (mode, method)
            assert all(np.isfinite(v) for v in res.metrics.values())


@pytest.mark.parametrize("kind", list(ActivationKind))
def test_no_nan_all_generators(model, kind):
    xin = synth_activations(kind, SMALL.tokens, SMALL.C, 2)
    ref = run_reference(model, xin)
    for mode in PrecisionMode:
        for method in Method:
            res = run_quantized(model, xin, mode, method, reference=ref)
            assert np.all(np.isfinite(res.output))


def test_quantized_run_is_deterministic(model, x, ref):
    a = run_quantized(model, x, "w4a4", "versaq", reference=ref)
    b = run_quantized(model, x, "w4a4", "versaq", reference=ref)
    assert np.array_equal(a.output, b.output) and a.metrics == b.metrics


def test_layer_metrics_trace(model, x, ref):
    res = run_quantized(model, x, "w4a8", "versaq", reference=ref)
    assert len(res.layer_metrics) == len(SMALL.layers)
    assert res.layer_metrics[-1] == res.metrics


def test_bf16_mode_is_close(model, x, ref):
    res = run_quantized(model, x, "bf16", "rtn", reference=ref)
    assert res.metrics["cosine"] > 0.999


MEDIUM = ModelSpec(S=2, P=64, C=256, h=4)  # 4 blocks, head dim 64 as in the default geometry


def test_w4a8_versaq_beats_rtn_on_paired_seeds():
    wins = 0
    for seed in range(50):
        m = init_model(MEDIUM, seed)
        xin = synth_activations("gaussian", MEDIUM.tokens, MEDIUM.C, 1000 + seed)
        r = run_reference(m, xin)
        v = run_quantized(m, xin, "w4a8", "versaq", reference=r).metrics["cosine"]
        b = run_quantized(m, xin, "w4a8", "rtn", reference=r).metrics["cosine"]
        wins += v > b
    assert wins >= 45, f"VersaQ > RTN on {wins}/50 seeds"


# --- bit-width sweeps ----------------------------------------------------------

@pytest.fixture(scope="module")
def saturated_case():
    m = init_model(SMALL, 0)
    xin = synth_activations("saturated", SMALL.tokens, SMALL.C, 0)
    return m, xin, run_reference(m, xin)


def test_sweep_rows_and_determinism(saturated_case):
    m, xin, r = saturated_case
    a = bitwidth_sweep(m, xin, "weight", range(3, 9), method="rtn", reference=r)
    b = bitwidth_sweep(m, xin, "weight", range(3, 9), method="rtn", reference=r)
    assert [row["bits"] for row in a] == list(range(3, 9))
    assert all(row["weight_bits"] == 8 for row in a)
    assert a == b


def test_sweep_endpoint_ordering_rtn(saturated_case):
    m, xin, r = saturated_case
    for fixed in ("weight", "activation"):
        rows = bitwidth_sweep(m, xin, fixed, [3, 8], method="rtn", reference=r)
        assert rows[0]["mse"] > rows[1]["mse"]


def test_sweep_weight8_near_reference(saturated_case):
    m, xin, r = saturated_case
    for method in (Method.RTN, Method.VERSAQ):
        row = bitwidth_sweep(m, xin, "activation", [8], fixed_bits=None, method=method, reference=r)[0]
        assert row["cosine"] > 0.999


def test_sweep_activation_growth_versaq_below_rtn(saturated_case):
    # growth = mse(A4) / mse(A8) with weights at 8 bits; VersaQ starts from a
    # much lower A8 error, so its ratio is not guaranteed to be the smaller one
    m, xin, r = saturated_case
    growth = {}
    for method in (Method.RTN, Method.VERSAQ):
        rows = bitwidth_sweep(m, xin, "weight", [4, 8], method=method, reference=r)
        growth[method] = rows[0]["mse"] / rows[1]["mse"]
    assert growth[Method.VERSAQ] < growth[Method.RTN], growth


def test_sweep_rejects_bad_range(saturated_case):
    m, xin, r = saturated_case
    with pytest.raises(ValueError):
        bitwidth_sweep(m, xin, "weight", [2, 4], reference=r)
    with pytest.raises(ValueError):
        bitwidth_sweep(m, xin, "both", [4], reference=r)
