import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthoquant.accelsim import (
    BFU_II,
    BFU_LATENCY,
    HardwareConfig,
    LayerOp,
    Nonlinear,
    OpKind,
    bfu_fpadd,
    bfu_fpmul,
    bfu_fptmp_invsqrt,
    bfu_pipeline_cycles,
    int4_mac,
    int8_mac_bitfusion,
    model_ops,
    simulate_attention_baseline,
    simulate_gemm,
    simulate_idct,
    simulate_model,
    simulate_nonlinear,
    simulate_ops,
    simulate_tiled_attention,
    simulate_wht,
    weight_stream_bytes,
)
from orthoquant.attention import AttentionConfig, TileConfig
from orthoquant.numerics import PrecisionMode, bf16_add, bf16_mul, bf16_round, bf16_same, bf16_to_float
from orthoquant.pipeline import ModelSpec

HW = HardwareConfig()
MODES = list(PrecisionMode)


# --- integer PEs ---------------------------------------------------------------

def test_int4_mac_examples():
    assert int4_mac(7, -8, 0) == -56
    assert int4_mac(0, 5, 123) == 123
    assert int4_mac(-1, -1, 0) == 1
    with pytest.raises(ValueError):
        int4_mac(8, 1)
    with pytest.raises(OverflowError):
        int4_mac(7, 7, 2**31 - 10)


def test_bitfusion_examples():
    assert int8_mac_bitfusion(77, -3) == -231
    # hand decomposition of the same product
    assert (-4 << 8) + (52 << 4) + (-13 << 4) + 169 == -231
    assert int8_mac_bitfusion(-128, -128) == 16384
    assert int8_mac_bitfusion(0, -77) == 0


def test_bitfusion_exhaustive():
    a, b = np.meshgrid(np.arange(-128, 128), np.arange(-128, 128), indexing="ij")
    assert np.array_equal(int8_mac_bitfusion(a, b), a * b)


# --- BFU -----------------------------------------------------------------------

def _corner_set():
    vals = [0x0000, 0x8000, 0x0080, 0x8080, 0x7F7F, 0xFF7F, 0x3F80, 0x3F81, 0x3F7F, 0xBF80, 0xBF81,
            0x7F80, 0xFF80, 0x0001, 0x807F, 0x4000, 0x0100]
    v = np.array(vals, dtype=np.uint16)
    a, b = np.meshgrid(v, v, indexing="ij")
    return a.ravel(), b.ravel()


def test_bfu_mul_example():
    assert float(bf16_to_float(bfu_fpmul(bf16_round(1.5), bf16_round(2.0)))) == 3.0


def test_bfu_add_cancellation_is_positive_zero():
    x = bf16_round(np.array([1.0, -3.5, 1e-30, 7e30]))
    assert np.all(bfu_fpadd(x, x ^ np.uint16(0x8000)) == 0x0000)


def test_bfu_corner_set_matches_reference():
    a, b = _corner_set()
    assert np.all(bf16_same(bfu_fpadd(a, b), bf16_add(a, b, ftz=True)))
    assert np.all(bf16_same(bfu_fpmul(a, b), bf16_mul(a, b, ftz=True)))


def test_bfu_random_pairs_match_reference():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 1 << 16, 200_000).astype(np.uint16)
    b = rng.integers(0, 1 << 16, 200_000).astype(np.uint16)
    assert np.all(bf16_same(bfu_fpadd(a, b), bf16_add(a, b, ftz=True)))
    assert np.all(bf16_same(bfu_fpmul(a, b), bf16_mul(a, b, ftz=True)))


@given(st.integers(0, 0xFFFF), st.integers(-12, 12), st.integers(0, 0xFFFF))
def test_bfu_add_near_exponents(a, shift, mant):
    # operands with close exponents exercise alignment and cancellation
    a = np.uint16(a)
    e = ((int(a) >> 7) & 0xFF) + shift
    if not 0 < e < 255:
        return
    b = np.uint16((mant & 0x807F) | (e << 7))
    assert bf16_same(bfu_fpadd(a, b), bf16_add(a, b, ftz=True))
    assert bf16_same(bfu_fpmul(a, b), bf16_mul(a, b, ftz=True))


def test_bfu_pipeline_model():
    assert BFU_LATENCY == 4 and BFU_II == 1
    assert bfu_pipeline_cycles(1) == 4
    assert bfu_pipeline_cycles(100) == 103
    assert bfu_pipeline_cycles(0) == 0


def test_invsqrt_examples():
    assert 0.4975 <= float(bf16_to_float(bfu_fptmp_invsqrt(bf16_round(4.0)))) <= 0.5025
    assert abs(float(bf16_to_float(bfu_fptmp_invsqrt(bf16_round(1.0)))) - 1.0) <= 0.005


def test_invsqrt_scaling_by_four():
    x = bf16_round(np.exp2(np.linspace(-50, 50, 400)))
    y = bf16_to_float(bfu_fptmp_invsqrt(x))
    y4 = bf16_to_float(bfu_fptmp_invsqrt(bf16_round(bf16_to_float(x) * 4)))
    assert np.array_equal(y4, y / 2)


def test_invsqrt_rejects_bad_input():
    for v in (0.0, -1.0, np.inf):
        with pytest.raises(ValueError):
            bfu_fptmp_invsqrt(bf16_round(v))


def test_invsqrt_log_sweep_error_bound():
    x = bf16_round(np.exp2(np.linspace(-60, 60, 1000)))
    xs = bf16_to_float(x)
    err = np.abs(bf16_to_float(bfu_fptmp_invsqrt(x)) * np.sqrt(xs) - 1.0)
    assert err.max() <= 0.005, f"max relative error {err.max():.4%}"


# --- hardware config -----------------------------------------------------------

def test_hardware_hierarchy():
    assert HW.int8_array == (64, 64)
    assert HW.int4_array == (128, 128)
    r, c = HW.int8_array
    assert HW.bfu_rows * HW.bfu_cols * 4 == r * c
    assert HW.array(PrecisionMode.BF16) == (64, 16, 4)


def test_hardware_config_file(tmp_path):
    p = tmp_path / "hw.cfg"
    p.write_text("dram_bytes_per_cycle = 51.2\ncomponent_power_w.qu = 0.5\n# comment\n")
    hw = HardwareConfig.from_file(p)
    assert hw.dram_bytes_per_cycle == 51.2 and hw.component_power_w["qu"] == 0.5
    assert hw.component_power_w["bfu_array"] == 1.79
    back = HardwareConfig.from_mapping({k: str(v) for k, v in hw.to_mapping().items()})
    assert back == hw
    p.write_text("dram_bw = 3\n")
    with pytest.raises(ValueError, match="dram_bw"):
        HardwareConfig.from_file(p)
    with pytest.raises(ValueError):
        HardwareConfig(dram_bytes_per_cycle=0)


# --- GEMM timing -------------------------------------------------------------

def closed_form_total(M, K, N, mode, hw):
    pr, pc, fill = hw.array(mode)
    ob = {PrecisionMode.BF16: 2.0, PrecisionMode.W4A8: 1.0, PrecisionMode.W4A4: 0.5}[mode]
    compute = math.ceil(M / pr) * math.ceil(N / pc) * K + fill + math.ceil(M * N * ob / hw.writeback_bytes_per_cycle)
    wbytes = 2 * K * N if mode is PrecisionMode.BF16 else math.ceil(K * N / 2) + 2 * N
    n = math.ceil(wbytes / (hw.weight_buffer_bytes / 2))
    load = math.ceil(wbytes / n / hw.dram_bytes_per_cycle)
    c = math.ceil(compute / n)
    return load + (n - 1) * max(c, load) + c


def test_gemm_64_cube_int8_example():
    rep = simulate_gemm(LayerOp(OpKind.GEMM, PrecisionMode.W4A8, 64, 64, 64, weight_bytes=0), HW)
    # 64 (K) + 126 (fill) + 40 (drain: 4096 B / 102.4 B per cycle)
    assert rep.total_cycles == 64 + 126 + 40


@pytest.mark.parametrize("mode", MODES, ids=lambda m: m.value)
def test_gemm_closed_form_grid(mode):
    dims = [16, 64, 100, 256]
    for M in dims:
        for K in dims:
            for N in dims:
                rep = simulate_gemm(LayerOp(OpKind.GEMM, mode, M, K, N), HW)
                assert rep.total_cycles == closed_form_total(M, K, N, mode, HW), (M, K, N)


def test_weight_stream_examples():
    assert weight_stream_bytes(64, 64, PrecisionMode.BF16) == 8192
    assert weight_stream_bytes(64, 64, PrecisionMode.W4A4) == 2176
    bf = math.ceil(8192 / HW.dram_bytes_per_cycle)
    q4 = math.ceil(2176 / HW.dram_bytes_per_cycle)
    assert (bf, q4) == (80, 22)
    assert 3.5 <= bf / q4 <= 4.0


@pytest.mark.parametrize("mode", MODES, ids=lambda m: m.value)
def test_report_invariants_gemm(mode):
    rep = simulate_gemm(LayerOp(OpKind.GEMM, mode, 512, 512, 2048), HW)
    compute = rep.phases.get("compute_int", 0) + rep.phases.get("compute_bf16", 0)
    assert rep.total_cycles >= max(compute, rep.phases["weight_load"])
    assert all(v >= 0 for v in rep.energy.values())
    assert math.isclose(rep.energy_total, sum(rep.energy.values()), rel_tol=1e-9)
    doc = json.loads(rep.to_json())
    assert {"total_cycles", "phases", "energy", "peaks", "flags"} <= set(doc)


def test_wht_has_no_weight_traffic():
    op = LayerOp(OpKind.ONLINE_WHT, PrecisionMode.W4A8, 4096, 512, 512)
    rep = simulate_wht(op, HW)
    assert rep.phases["weight_load"] == 0
    assert rep.energy["weight_buf"] == 0 and rep.energy["dram"] == 0
    gemm = simulate_gemm(LayerOp(OpKind.GEMM, PrecisionMode.W4A8, 4096, 512, 512, weight_bytes=0), HW)
    assert rep.total_cycles == gemm.total_cycles
    with pytest.raises(ValueError):
        simulate_wht(replace(op, mode=PrecisionMode.BF16), HW)


def test_idct_uses_int8_array():
    rep = simulate_idct(LayerOp(OpKind.IDCT, PrecisionMode.W4A4, 256, 32, 512), HW)
    assert rep.total_cycles == math.ceil(256 / 64) * math.ceil(512 / 64) * 32 + 126 + math.ceil(256 * 512 / 102.4)


def test_nonlinear_cost():
    rep = simulate_nonlinear(LayerOp(OpKind.NONLINEAR, PrecisionMode.BF16, nonlinear=Nonlinear.GELU,
                                     elements=1024 * 16), HW)
    assert rep.total_cycles == 16 * 16 + BFU_LATENCY


mode_st = st.sampled_from(MODES)
dim_st = st.integers(1, 3000)


@given(mode_st, dim_st, dim_st, dim_st, st.floats(1.0, 500.0), st.floats(1.0, 4.0))
@settings(max_examples=100)
def test_bandwidth_monotone_gemm(mode, M, K, N, bw, factor):
    op = LayerOp(OpKind.GEMM, mode, M, K, N)
    slow = simulate_gemm(op, replace(HW, dram_bytes_per_cycle=bw))
    fast = simulate_gemm(op, replace(HW, dram_bytes_per_cycle=bw * factor))
    assert fast.total_cycles <= slow.total_cycles


@given(mode_st, st.integers(8, 1024), st.sampled_from([16, 32, 64]), st.integers(1, 4),
       st.floats(5.0, 300.0), st.floats(1.0, 8.0), st.booleans())
@settings(max_examples=40)
def test_bandwidth_monotone_attention(mode, L, d, heads, bw, factor, frame):
    cfg = AttentionConfig(2, L, d * heads, heads)
    for fn in (simulate_tiled_attention, simulate_attention_baseline):
        slow = fn(cfg, TileConfig(), replace(HW, dram_bytes_per_cycle=bw), mode, frame)
        fast = fn(cfg, TileConfig(), replace(HW, dram_bytes_per_cycle=bw * factor), mode, frame)
        assert fast.total_cycles <= slow.total_cycles


@given(mode_st, st.integers(1, 20000), st.integers(1, 20000), st.integers(1, 4096))
@settings(max_examples=100)
def test_buffer_honesty(mode, M, K, N):
    hw = replace(HW, input_buffer_bytes=65536, weight_buffer_bytes=65536)
    rep = simulate_gemm(LayerOp(OpKind.GEMM, mode, M, K, N), hw)
    caps = {"weight_buf": hw.weight_buffer_bytes, "input_buf": hw.input_buffer_bytes,
            "output_buf": hw.output_buffer_bytes}
    over = [k for k, v in rep.peaks.items() if v > caps[k]]
    assert sorted(f"infeasible:{k}" for k in over) == sorted(rep.flags)
    assert rep.feasible == (not over)


def test_overflow_is_flagged():
    rep = simulate_gemm(LayerOp(OpKind.GEMM, PrecisionMode.BF16, 64, 4096, 64), replace(HW, input_buffer_bytes=1024))
    assert "infeasible:input_buf" in rep.flags and not rep.feasible


@given(mode_st, dim_st, dim_st, dim_st)
@settings(max_examples=50)
def test_energy_additivity(mode, M, K, N):
    rep = simulate_gemm(LayerOp(OpKind.GEMM, mode, M, K, N), HW)
    parts = sum(rep.energy.values())
    assert math.isclose(rep.energy_total, parts, rel_tol=1e-9)
    assert all(v >= 0 for v in rep.energy.values())


# --- attention timing ---------------------------------------------------------

def test_tiled_peak_independent_of_length():
    a = simulate_tiled_attention(AttentionConfig(4, 256, 512, 8), TileConfig(), HW, PrecisionMode.W4A8)
    b = simulate_tiled_attention(AttentionConfig(16, 256, 512, 8), TileConfig(), HW, PrecisionMode.W4A8)
    assert a.peaks == b.peaks
    assert a.peaks["score_buffer"] == 64 * 64 * 2


def test_recompute_overhead_is_one_extra_sweep():
    rep = simulate_tiled_attention(AttentionConfig(8, 256, 512, 8), TileConfig(), HW, PrecisionMode.W4A4)
    assert rep.phases["qk_stage1"] == rep.phases["qk_stage2"]


@pytest.mark.parametrize("mode", [PrecisionMode.W4A4, PrecisionMode.W4A8])
def test_tiled_beats_spill_baseline(mode):
    cfg = AttentionConfig(16, 256, 512, 8)  # S*P = 4096
    tiled = simulate_tiled_attention(cfg, TileConfig(), HW, mode)
    base = simulate_attention_baseline(cfg, TileConfig(), HW, mode)
    assert 64 * 4096 * 2 > HW.output_buffer_bytes
    assert "spill:score_buffer" in base.flags
    assert tiled.feasible
    assert tiled.total_cycles < base.total_cycles


def test_frame_wise_attention_is_feasible():
    rep = simulate_tiled_attention(AttentionConfig(4, 256, 512, 8), TileConfig(), HW, PrecisionMode.W4A4,
                                   frame_wise=True)
    assert rep.feasible


# --- whole model ------------------------------------------------------------------

def test_model_ops_structure():
    spec = ModelSpec(S=1)
    names = [op.name for op in model_ops(spec, PrecisionMode.W4A4)]
    assert names[0] == "wht_enter" and names[-1] == "wht_exit"
    assert sum(n.endswith(".attn") for n in names) == spec.blocks
    bf = model_ops(spec, PrecisionMode.BF16)
    assert not any(op.kind in (OpKind.ONLINE_WHT, OpKind.IDCT, OpKind.QUANT_DEQUANT) for op in bf)


def test_model_breakdown_sums():
    rep = simulate_model(ModelSpec(S=2), HW, PrecisionMode.W4A4)
    assert rep.feasible
    assert set(rep.breakdown) == {"weight_load", "attention", "other"}
    busy = rep.breakdown["attention"] + rep.breakdown["other"]
    assert rep.total_cycles >= busy
    assert rep.total_cycles >= rep.breakdown["weight_load"]
    assert math.isclose(rep.energy_total, sum(rep.energy.values()), rel_tol=1e-9)


def test_model_w4a4_halves_runtime():
    spec = ModelSpec()
    q = simulate_model(spec, HW, PrecisionMode.W4A4).total_cycles
    b = simulate_model(spec, HW, PrecisionMode.BF16).total_cycles
    assert q <= 0.5 * b


def test_model_speedup_largest_at_one_frame_and_attention_share_grows():
    speedups, shares = {}, {}
    for S in (1, 2, 4, 8, 16):
        spec = ModelSpec().with_frames(S)
        q = simulate_model(spec, HW, PrecisionMode.W4A4)
        b = simulate_model(spec, HW, PrecisionMode.BF16)
        speedups[S] = b.total_cycles / q.total_cycles
        shares[S] = q.breakdown["attention"] / q.total_cycles
    assert max(speedups, key=speedups.get) == 1
    vals = [shares[S] for S in (1, 2, 4, 8, 16)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_model_bandwidth_monotone():
    spec = ModelSpec(S=2)
    prev = None
    for bw in (25.6, 51.2, 102.4, 204.8):
        t = simulate_model(spec, replace(HW, dram_bytes_per_cycle=bw), PrecisionMode.W4A8).total_cycles
        assert prev is None or t <= prev
        prev = t


def test_chained_ops_prefetch_weights():
    ops = [LayerOp(OpKind.GEMM, PrecisionMode.BF16, 256, 512, 512, name=f"g{i}") for i in range(3)]
    chained = simulate_ops(ops, HW)
    separate = sum(simulate_gemm(op, HW).total_cycles for op in ops)
    assert chained.total_cycles <= separate
