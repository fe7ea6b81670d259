"""Functional models of the compute fabric and an analytic cycle/energy model.

Functional part: INT4 MAC, an INT8 MAC composed from four INT4 partial
products, and BF16 add/multiply/inverse-sqrt built from small-integer
sub-operations (sign, 8-bit exponent, 8-bit significand).

Timing part: every operator has a closed-form cycle count.  Weight
streaming is double buffered: while pass ``p`` computes, pass ``p + 1``
loads, and only the first load is exposed.  Passes of consecutive operators
are chained the same way, so weights of the next layer prefetch under the
current layer's compute.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .numerics import BF16_NAN, PrecisionMode
from .tensorio import read_kv

# ---------------------------------------------------------------------------
# integer PEs


def int4_mac(a, b, acc=0):
    """``acc + a*b`` for signed 4-bit codes with a 32-bit accumulator."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if np.any((a < -8) | (a > 7)) or np.any((b < -8) | (b > 7)):
        raise ValueError("INT4 operands must lie in [-8, 7]")
    out = np.asarray(acc, dtype=np.int64) + a * b
    if np.any(np.abs(out) >= 2 ** 31):
        raise OverflowError("32-bit accumulator overflow")
    return out if out.ndim else int(out)


def int8_mac_bitfusion(a, b):
    """Signed 8x8 product from four 4-bit partial products and shifts.

    ``a = a_h*16 + a_l`` with ``a_h`` signed and ``a_l`` unsigned nibbles.
    Only the high x high partial is a pure INT4 product; the mixed partials
    are signed x unsigned and use a widened multiplier input.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if np.any((a < -128) | (a > 127)) or np.any((b < -128) | (b > 127)):
        raise ValueError("INT8 operands must lie in [-128, 127]")
    ah, al = a >> 4, a & 0xF
    bh, bl = b >> 4, b & 0xF
    hh = int4_mac(ah, bh)
    out = (hh << 8) + ((ah * bl) << 4) + ((al * bh) << 4) + al * bl
    return out if out.ndim else int(out)


# ---------------------------------------------------------------------------
# BFU: BF16 arithmetic on an integer datapath (subnormals flush to zero)

BFU_LATENCY = 4
BFU_II = 1
_EXT = 3  # guard, round, sticky


def bfu_pipeline_cycles(n_ops: int) -> int:
    return 0 if n_ops <= 0 else BFU_LATENCY + (n_ops - 1) * BFU_II


def _fields(bits):
    b = np.asarray(bits, dtype=np.uint16).astype(np.int64)
    s = b >> 15
    e = (b >> 7) & 0xFF
    m = b & 0x7F
    zero = e == 0  # zero or subnormal: flushed
    sig = np.where(zero, 0, m | 0x80)
    return s, e, m, sig, zero


def _pack(s, e, sig):
    # sig holds the 8-bit significand with the hidden bit set
    return ((s << 15) | (e << 7) | (sig & 0x7F)).astype(np.uint16)


def _round_rne(sig_ext):
    """Round a significand carrying _EXT extra low bits; returns (sig, carry)."""
    lsb = (sig_ext >> _EXT) & 1
    guard = (sig_ext >> (_EXT - 1)) & 1
    rest = sig_ext & ((1 << (_EXT - 1)) - 1)
    up = guard & ((rest != 0) | lsb)
    sig = (sig_ext >> _EXT) + up
    carry = sig >> 8
    return np.where(carry == 1, sig >> 1, sig), carry


def _finish(s, e, sig, zero_result):
    """Overflow / flush-to-zero handling after rounding."""
    out = _pack(s, np.clip(e, 0, 255), sig)
    out = np.where(e >= 255, (s << 15) | 0x7F80, out)
    out = np.where((e <= 0) | zero_result, s << 15, out)
    return out.astype(np.uint16)


def _shift_right_sticky(x, d):
    d = np.minimum(d, 16)
    lost = x & ((np.int64(1) << d) - 1)
    return (x >> d) | (lost != 0)


def bfu_fpadd(a, b):
    x_s, x_e, x_m, x_sig, x_z = _fields(a)
    y_s, y_e, y_m, y_sig, y_z = _fields(b)
    # order by magnitude (exponent compare, then significand compare)
    swap = (y_e > x_e) | ((y_e == x_e) & (y_sig > x_sig))
    s1, e1, g1 = np.where(swap, y_s, x_s), np.where(swap, y_e, x_e), np.where(swap, y_sig, x_sig)
    s2, e2, g2 = np.where(swap, x_s, y_s), np.where(swap, x_e, y_e), np.where(swap, x_sig, y_sig)
    d = e1 - e2
    big = g1 << _EXT
    small = _shift_right_sticky(g2 << _EXT, d)
    same = s1 == s2
    acc = np.where(same, big + small, big - small)
    e = e1.copy()
    # carry out of the 8-bit significand: renormalize right
    over = acc >= (1 << (8 + _EXT))
    acc = np.where(over, _shift_right_sticky(acc, 1), acc)
    e = e + over
    # cancellation: renormalize left (exact, sticky bits are zero when d <= 1)
    for _ in range(8 + _EXT):
        low = (acc > 0) & (acc < (1 << (7 + _EXT)))
        acc = np.where(low, acc << 1, acc)
        e = e - low
    sig, carry = _round_rne(acc)
    e = e + carry
    exact_zero = acc == 0
    s = np.where(exact_zero, 0, s1)
    out = _finish(s, e, sig, exact_zero)
    # operands that flushed to zero pass the other operand through
    xz_bits = (x_s << 15).astype(np.uint16)
    yz_bits = (y_s << 15).astype(np.uint16)
    a_u = np.asarray(a, dtype=np.uint16)
    b_u = np.asarray(b, dtype=np.uint16)
    out = np.where(x_z & ~y_z, np.where(y_e == 0, yz_bits, b_u), out)
    out = np.where(y_z & ~x_z, np.where(x_e == 0, xz_bits, a_u), out)
    out = np.where(x_z & y_z, ((x_s & y_s) << 15).astype(np.uint16), out)
    return _specials_add(x_s, x_e, x_m, y_s, y_e, y_m, out)


def _specials_add(x_s, x_e, x_m, y_s, y_e, y_m, out):
    x_inf, y_inf = (x_e == 255) & (x_m == 0), (y_e == 255) & (y_m == 0)
    x_nan, y_nan = (x_e == 255) & (x_m != 0), (y_e == 255) & (y_m != 0)
    out = np.where(x_inf, (x_s << 15) | 0x7F80, out)
    out = np.where(y_inf, (y_s << 15) | 0x7F80, out)
    out = np.where(x_inf & y_inf & (x_s != y_s), BF16_NAN, out)
    out = np.where(x_nan | y_nan, BF16_NAN, out)
    return out.astype(np.uint16)


def bfu_fpmul(a, b):
    x_s, x_e, x_m, x_sig, x_z = _fields(a)
    y_s, y_e, y_m, y_sig, y_z = _fields(b)
    s = x_s ^ y_s
    prod = x_sig * y_sig  # 8x8 -> 16 bit
    e = x_e + y_e - 127
    hi = prod >= (1 << 15)
    # keep 8 significand bits plus _EXT extension bits with sticky
    acc = np.where(hi, _shift_right_sticky(prod, 8 - _EXT), _shift_right_sticky(prod, 7 - _EXT))
    e = e + hi
    sig, carry = _round_rne(acc)
    e = e + carry
    out = _finish(s, e, sig, x_z | y_z)
    x_inf, y_inf = (x_e == 255) & (x_m == 0), (y_e == 255) & (y_m == 0)
    x_nan, y_nan = (x_e == 255) & (x_m != 0), (y_e == 255) & (y_m != 0)
    inf = x_inf | y_inf
    out = np.where(inf, (s << 15) | 0x7F80, out)
    out = np.where((x_inf & y_z) | (y_inf & x_z) | x_nan | y_nan, BF16_NAN, out)
    return out.astype(np.uint16)


INVSQRT_MAGIC = 0x5F37
_BF16_HALF = np.uint16(0x3F00)
_BF16_THREE_HALVES = np.uint16(0x3FC0)


def bfu_fptmp_invsqrt(x):
    """``x ** -0.5`` on BF16 patterns: bit-trick seed plus one Newton step."""
    b = np.asarray(x, dtype=np.uint16)
    e = (b >> 7) & 0xFF
    if np.any(b & 0x8000) or np.any(e == 255) or np.any(e == 0):
        raise ValueError("inverse sqrt needs positive, finite, normal BF16 input")
    y = (INVSQRT_MAGIC - (b.astype(np.int64) >> 1)).astype(np.uint16)
    half_x = bfu_fpmul(b, _BF16_HALF)
    t = bfu_fpmul(half_x, bfu_fpmul(y, y))
    t = bfu_fpadd(_BF16_THREE_HALVES, t ^ np.uint16(0x8000))
    return bfu_fpmul(y, t)


# ---------------------------------------------------------------------------
# hardware description

DEFAULT_POWER_W = {"bfu_array": 1.79, "qu": 0.12, "weight_buf": 0.13, "input_buf": 0.12, "output_buf": 0.02}
AREA_MM2 = {"bfu_array": 2.77, "qu": 0.06, "weight_buf": 0.54, "input_buf": 0.48, "output_buf": 0.03, "total": 3.88}


@dataclass(frozen=True)
class HardwareConfig:
    bfu_rows: int = 64
    bfu_cols: int = 16
    weight_buffer_bytes: int = 2 * 131072
    input_buffer_bytes: int = 2 * 131072
    output_buffer_bytes: int = 32768
    clock_hz: float = 1e9
    dram_bytes_per_cycle: float = 102.4
    writeback_bytes_per_cycle: float = 102.4
    qu_values_per_cycle: int = 64
    exp_bfu_ops: int = 8
    bf16_fill_cycles: int = 4
    dram_pj_per_bit: float = 5.0
    component_power_w: dict = field(default_factory=lambda: dict(DEFAULT_POWER_W))

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "component_power_w":
                missing = set(DEFAULT_POWER_W) - set(v)
                if missing:
                    raise ValueError(f"component_power_w is missing {sorted(missing)}")
                if any(p <= 0 for p in v.values()):
                    raise ValueError("component powers must be positive")
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")

    @property
    def bfus(self) -> int:
        return self.bfu_rows * self.bfu_cols

    @property
    def int8_array(self) -> tuple[int, int]:
        # four INT8 PEs per BFU, stacked along the columns
        return self.bfu_rows, self.bfu_cols * 4

    @property
    def int4_array(self) -> tuple[int, int]:
        r, c = self.int8_array
        return 2 * r, 2 * c

    def array(self, mode: PrecisionMode) -> tuple[int, int, int]:
        """(rows, cols, fill cycles) of the fabric in ``mode``."""
        if mode is PrecisionMode.BF16:
            return self.bfu_rows, self.bfu_cols, self.bf16_fill_cycles
        r, c = self.int4_array if mode is PrecisionMode.W4A4 else self.int8_array
        return r, c, r + c - 2

    @classmethod
    def from_file(cls, path) -> "HardwareConfig":
        """``key = value`` file; power entries use ``component_power_w.<name>``."""
        raw = read_kv(path)
        return cls.from_mapping(raw, source=str(path))

    @classmethod
    def from_mapping(cls, raw: dict, source: str = "mapping") -> "HardwareConfig":
        names = {f.name: f for f in fields(cls)}
        kw: dict = {}
        power = dict(DEFAULT_POWER_W)
        for key, value in raw.items():
            if key.startswith("component_power_w."):
                comp = key.split(".", 1)[1]
                if comp not in DEFAULT_POWER_W:
                    raise ValueError(f"{source}: unknown power component {comp!r}")
                power[comp] = float(value)
                continue
            if key not in names or key == "component_power_w":
                raise ValueError(f"{source}: unknown hardware key {key!r}")
            default = names[key].default
            try:
                kw[key] = type(default)(float(value)) if isinstance(default, int) else float(value)
            except ValueError:
                raise ValueError(f"{source}: bad value for {key!r}: {value!r}") from None
        kw["component_power_w"] = power
        return cls(**kw)

    def to_mapping(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "component_power_w"}
        for k, v in sorted(self.component_power_w.items()):
            out[f"component_power_w.{k}"] = v
        return out


# ---------------------------------------------------------------------------
# operators


class OpKind(enum.Enum):
    GEMM = "gemm"
    TILED_ATTENTION = "tiled_attention"
    ONLINE_WHT = "online_wht"
    IDCT = "idct"
    NONLINEAR = "nonlinear"
    QUANT_DEQUANT = "quant_dequant"


class Nonlinear(enum.Enum):
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    GELU = "gelu"
    ROPE = "rope"
    ELEMENTWISE = "elementwise"


# BFU operations per element (exp contributes its own cost where used)
NONLINEAR_OPS = {Nonlinear.LAYERNORM: 5, Nonlinear.GELU: 16, Nonlinear.ROPE: 3, Nonlinear.ELEMENTWISE: 1}
STATS_BASE_OPS = 3  # 2 fpmul + 1 fpadd per element, plus one exp
NORMALIZE_BASE_OPS = 2  # subtract + multiply, plus one exp


def out_bytes(mode: PrecisionMode) -> float:
    return {PrecisionMode.BF16: 2.0, PrecisionMode.W4A8: 1.0, PrecisionMode.W4A4: 0.5}[mode]


def act_bytes(mode: PrecisionMode) -> float:
    return {PrecisionMode.BF16: 2.0, PrecisionMode.W4A8: 1.0, PrecisionMode.W4A4: 0.5}[mode]


def weight_stream_bytes(K: int, N: int, mode: PrecisionMode) -> int:
    """Off-chip bytes of a ``K x N`` weight: codes plus one BF16 scale per column."""
    if mode is PrecisionMode.BF16:
        return 2 * K * N
    return math.ceil(K * N * mode.weight_bits / 8) + 2 * N


@dataclass(frozen=True)
class LayerOp:
    kind: OpKind
    mode: PrecisionMode
    M: int = 0
    K: int = 0
    N: int = 0
    weight_bytes: int | None = None  # None: derive from K, N and mode (GEMM) or 0
    quant_values: int = 0
    nonlinear: Nonlinear | None = None
    elements: int = 0
    attention: tuple | None = None  # (AttentionConfig-like, TileConfig, frame_wise)
    name: str = ""

    def __post_init__(self):
        if self.kind in (OpKind.GEMM, OpKind.ONLINE_WHT, OpKind.IDCT):
            if min(self.M, self.K, self.N) < 1:
                raise ValueError(f"{self.kind.value} needs positive M, K, N")
        if self.weight_bytes is None:
            wb = weight_stream_bytes(self.K, self.N, self.mode) if self.kind is OpKind.GEMM else 0
            object.__setattr__(self, "weight_bytes", wb)
        if self.kind in (OpKind.NONLINEAR, OpKind.QUANT_DEQUANT) and self.elements < 1:
            raise ValueError(f"{self.kind.value} needs a positive element count")
        if self.weight_bytes < 0:
            raise ValueError("weight_bytes must be >= 0")


@dataclass
class SimReport:
    total_cycles: int
    phases: dict = field(default_factory=dict)
    energy: dict = field(default_factory=dict)
    peaks: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    utilization: float = 0.0
    breakdown: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    passes: list = field(default_factory=list, repr=False)  # [(load, compute, category)]

    @property
    def feasible(self) -> bool:
        return not any(f.startswith("infeasible") for f in self.flags)

    @property
    def energy_total(self) -> float:
        return float(sum(self.energy.values()))

    def to_dict(self) -> dict:
        return {
            "total_cycles": int(self.total_cycles),
            "phases": {k: _num(v) for k, v in self.phases.items()},
            "energy": {k: float(v) for k, v in self.energy.items()},
            "peaks": {k: _num(v) for k, v in self.peaks.items()},
            "flags": list(self.flags),
            "utilization": float(self.utilization),
            "breakdown": {k: _num(v) for k, v in self.breakdown.items()},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


def _chain(passes) -> tuple[int, int]:
    """Total cycles and exposed load cycles for a ping-pong chain of passes."""
    if not passes:
        return 0, 0
    total = passes[0][0]
    exposed = passes[0][0]
    for (_, c), (l_next, _) in zip(passes, passes[1:]):
        total += max(c, l_next)
        exposed += max(0, l_next - c)
    total += passes[-1][1]
    return total, exposed


def _check_peaks(peaks: dict, hw: HardwareConfig) -> list[str]:
    caps = {"weight_buf": hw.weight_buffer_bytes, "input_buf": hw.input_buffer_bytes,
            "output_buf": hw.output_buffer_bytes}
    return [f"infeasible:{k}" for k, v in peaks.items() if k in caps and v > caps[k]]


def _energy(hw: HardwareConfig, *, bfu_cycles, qu_cycles, weight_buf_cycles, io_cycles, dram_bytes) -> dict:
    p = hw.component_power_w
    t = 1.0 / hw.clock_hz
    return {
        "bfu_array": p["bfu_array"] * bfu_cycles * t,
        "qu": p["qu"] * qu_cycles * t,
        "weight_buf": p["weight_buf"] * weight_buf_cycles * t,
        "input_buf": p["input_buf"] * io_cycles * t,
        "output_buf": p["output_buf"] * io_cycles * t,
        "dram": hw.dram_pj_per_bit * 1e-12 * 8.0 * dram_bytes,
    }


def gemm_compute_cycles(M: int, K: int, N: int, mode: PrecisionMode, hw: HardwareConfig) -> int:
    pr, pc, fill = hw.array(mode)
    drain = math.ceil(M * N * out_bytes(mode) / hw.writeback_bytes_per_cycle)
    return math.ceil(M / pr) * math.ceil(N / pc) * K + fill + drain


def qu_cycles(values: int, hw: HardwareConfig) -> int:
    return math.ceil(values / hw.qu_values_per_cycle) if values > 0 else 0


def with_quant_stage(compute: int, qu: int) -> int:
    """QU conversion hides under the GEMM when it keeps up, otherwise runs after it."""
    return compute if qu <= compute else compute + qu


def weight_passes(weight_bytes: int, hw: HardwareConfig) -> int:
    if weight_bytes <= 0:
        return 0
    return math.ceil(weight_bytes / (hw.weight_buffer_bytes / 2))


def simulate_gemm(op: LayerOp, hw: HardwareConfig) -> SimReport:
    """Output-stationary GEMM with double-buffered weight streaming.

    ``compute = ceil(M/Pr) ceil(N/Pc) K + fill + ceil(M N out_bytes / wb)``;
    weights split evenly into ``n = ceil(bytes / (capacity/2))`` passes of
    ``L = ceil(bytes / n / bw)`` load and ``C = ceil(compute / n)`` compute
    cycles; ``total = L + (n-1) max(C, L) + C``.
    """
    mode = op.mode
    pr, pc, _ = hw.array(mode)
    compute = with_quant_stage(gemm_compute_cycles(op.M, op.K, op.N, mode, hw), qu_cycles(op.quant_values, hw))
    n = weight_passes(op.weight_bytes, hw)
    if n == 0:
        passes = [(0, compute)]
    else:
        load = math.ceil(op.weight_bytes / n / hw.dram_bytes_per_cycle)
        passes = [(load, math.ceil(compute / n))] * n
    total, exposed = _chain(passes)
    per_pass = math.ceil(op.weight_bytes / n) if n else 0
    peaks = {
        "weight_buf": per_pass * (2 if n > 1 else 1),
        "input_buf": math.ceil(min(op.M, pr) * op.K * act_bytes(mode)),
        "output_buf": math.ceil(min(op.M, pr) * min(op.N, pc) * out_bytes(mode)),
    }
    flags = _check_peaks(peaks, hw)
    busy = sum(c for _, c in passes)
    qu = qu_cycles(op.quant_values, hw)
    energy = _energy(hw, bfu_cycles=busy, qu_cycles=qu, weight_buf_cycles=busy if op.weight_bytes else 0,
                     io_cycles=busy, dram_bytes=op.weight_bytes)
    macs = op.M * op.K * op.N
    util = macs / (pr * pc * total) if total else 0.0
    kind = "compute_bf16" if mode is PrecisionMode.BF16 else "compute_int"
    phases = {"weight_load": exposed, kind: busy, "dram_stall": max(0, exposed - passes[0][0])}
    return SimReport(total, phases, energy, peaks, flags, util, {}, {"op": op.name or op.kind.value},
                     [(l, c, "other") for l, c in passes])


def simulate_wht(op: LayerOp, hw: HardwareConfig) -> SimReport:
    """Online WHT: a GEMM whose +-1 operands come from a mux, so no weight traffic."""
    if not op.mode.is_int:
        raise ValueError("online WHT runs on the integer array (INT mode only)")
    if op.K != op.N:
        raise ValueError("WHT is square: K must equal N")
    return simulate_gemm(replace(op, kind=OpKind.GEMM, weight_bytes=0, quant_values=0), hw)


def simulate_idct(op: LayerOp, hw: HardwareConfig) -> SimReport:
    """Block IDCT after a fused GEMM: K = block size, integer matrix held on chip."""
    mode = PrecisionMode.W4A8  # integer DCT entries need the INT8 array
    g = replace(op, kind=OpKind.GEMM, mode=mode, weight_bytes=0, quant_values=0)
    return simulate_gemm(g, hw)


def nonlinear_cycles(kind: Nonlinear, elements: int, hw: HardwareConfig) -> int:
    ops = NONLINEAR_OPS[kind] if kind is not Nonlinear.SOFTMAX else STATS_BASE_OPS + hw.exp_bfu_ops
    return math.ceil(elements * ops / hw.bfus) + BFU_LATENCY


def simulate_nonlinear(op: LayerOp, hw: HardwareConfig) -> SimReport:
    c = nonlinear_cycles(op.nonlinear, op.elements, hw)
    energy = _energy(hw, bfu_cycles=c, qu_cycles=0, weight_buf_cycles=0, io_cycles=c, dram_bytes=0)
    return SimReport(c, {"compute_bf16": c}, energy, {}, [], 0.0, {}, {"op": op.name or op.nonlinear.value},
                     [(0, c, "other")])


def simulate_quant(op: LayerOp, hw: HardwareConfig) -> SimReport:
    c = qu_cycles(op.elements, hw)
    energy = _energy(hw, bfu_cycles=0, qu_cycles=c, weight_buf_cycles=0, io_cycles=c, dram_bytes=0)
    return SimReport(c, {"quant": c}, energy, {}, [], 0.0, {}, {"op": op.name or "quant"}, [(0, c, "other")])


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class AttentionShape:
    """Geometry of one attention layer as the simulator sees it."""

    batches: int  # independent sequences per head (frames, or 1 for global)
    length: int
    heads: int
    d_k: int


def attention_shape(cfg, frame_wise: bool) -> AttentionShape:
    if frame_wise:
        return AttentionShape(cfg.S, cfg.P, cfg.heads, cfg.d_k)
    return AttentionShape(1, cfg.S * cfg.P, cfg.heads, cfg.d_k)


def _qtile_costs(shape: AttentionShape, tiles, mode: PrecisionMode, hw: HardwareConfig, tq: int) -> dict:
    """Per Q-tile cycle components of the two-stage kernel."""
    L, d = shape.length, shape.d_k
    tk = min(tiles.t_k, L)
    pr, pc, fill = hw.array(mode)
    n_k = math.ceil(L / tk)
    qk = n_k * math.ceil(tq / pr) * math.ceil(tk / pc) * d + fill
    elems = tq * L
    stats = math.ceil(elems * (STATS_BASE_OPS + hw.exp_bfu_ops) / hw.bfus) + BFU_LATENCY
    norm = math.ceil(elems * (NORMALIZE_BASE_OPS + hw.exp_bfu_ops) / hw.bfus) + BFU_LATENCY
    n_v = math.ceil(L / min(tiles.t_v, L))
    sv = math.ceil(tq / pr) * math.ceil(d / pc) * L + n_v * fill
    wb = math.ceil(tq * d * out_bytes(mode) / hw.writeback_bytes_per_cycle)
    if mode.is_int:
        # stage 1 dequantizes scores, stage 2 quantizes probabilities
        stage1 = with_quant_stage(qk, qu_cycles(elems, hw)) + stats
        stage2 = with_quant_stage(qk, qu_cycles(elems, hw)) + norm + with_quant_stage(sv, qu_cycles(elems, hw)) + wb
    else:
        stage1 = qk + stats
        stage2 = qk + norm + sv + wb
    ab = act_bytes(mode)
    dram1 = L * d * ab  # K
    dram2 = 2 * L * d * ab  # K again and V
    return {"qk": qk, "stats": stats, "norm": norm, "sv": sv, "writeback": wb,
            "stage1": max(stage1, math.ceil(dram1 / hw.dram_bytes_per_cycle)),
            "stage2": max(stage2, math.ceil(dram2 / hw.dram_bytes_per_cycle)),
            "compute": stage1 + stage2, "dram_bytes": dram1 + dram2}


def _q_tiles(L: int, tq: int) -> list[int]:
    full, rem = divmod(L, tq)
    return [tq] * full + ([rem] if rem else [])


def simulate_tiled_attention(cfg, tiles, hw: HardwareConfig, mode: PrecisionMode,
                             frame_wise: bool = False) -> SimReport:
    """Two-stage recompute tiling; cost summed over heads, sequences and Q-tiles.

    Frame-wise layers use the same tile sizes clipped to the frame length.
    """
    shape = attention_shape(cfg, frame_wise)
    L, d = shape.length, shape.d_k
    tq_nom = min(tiles.t_q, L)
    reps = shape.batches * shape.heads
    totals = dict.fromkeys(("qk_stage1", "qk_stage2", "stats", "normalize", "sv", "writeback"), 0)
    cycles = busy = 0
    dram_bytes = 0.0
    for tq in _q_tiles(L, tq_nom):
        c = _qtile_costs(shape, tiles, mode, hw, tq)
        cycles += reps * (c["stage1"] + c["stage2"])
        busy += reps * c["compute"]
        dram_bytes += reps * c["dram_bytes"]
        totals["qk_stage1"] += reps * c["qk"]
        totals["qk_stage2"] += reps * c["qk"]
        totals["stats"] += reps * c["stats"]
        totals["normalize"] += reps * c["norm"]
        totals["sv"] += reps * c["sv"]
        totals["writeback"] += reps * c["writeback"]
    ab = act_bytes(mode)
    tk = min(tiles.t_k, L)
    peaks = {
        "input_buf": math.ceil(2 * (tq_nom * d + tk * d) * ab),
        "weight_buf": math.ceil(2 * tk * d * ab),
        # live score tile (BF16) + (M, sigma) registers + O staging
        "output_buf": tq_nom * tk * 2 + 2 * tq_nom * 2 + math.ceil(tq_nom * d * out_bytes(mode)),
        "score_buffer": tq_nom * tk * 2,
    }
    flags = _check_peaks(peaks, hw)
    quant = 3 * reps * L * L if mode.is_int else 0
    energy = _energy(hw, bfu_cycles=busy, qu_cycles=qu_cycles(quant, hw), weight_buf_cycles=busy,
                     io_cycles=busy, dram_bytes=dram_bytes)
    phases = dict(totals)
    phases["compute_int" if mode.is_int else "compute_bf16"] = busy
    phases["dram_stall"] = cycles - busy
    macs = reps * 3 * L * L * d  # QK twice + SV
    pr, pc, _ = hw.array(mode)
    util = macs / (pr * pc * cycles) if cycles else 0.0
    return SimReport(cycles, phases, energy, peaks, flags, util, {}, {"op": "tiled_attention"},
                     [(0, cycles, "attention")])


def simulate_attention_baseline(cfg, tiles, hw: HardwareConfig, mode: PrecisionMode,
                                frame_wise: bool = False) -> SimReport:
    """Cache-all-scores attention: one QK^T sweep per Q-tile keeps the full
    ``t_q x L`` BF16 score block.  When it exceeds the output buffer the block
    spills to DRAM and is read back by each of the three softmax passes
    (max, exp-sum, normalize)."""
    shape = attention_shape(cfg, frame_wise)
    L, d = shape.length, shape.d_k
    tq_nom = min(tiles.t_q, L)
    tk = min(tiles.t_k, L)
    pr, pc, fill = hw.array(mode)
    reps = shape.batches * shape.heads
    ab = act_bytes(mode)
    score_bytes = tq_nom * L * 2
    spill = score_bytes > hw.output_buffer_bytes
    cycles = busy = 0
    dram_bytes = 0.0
    for tq in _q_tiles(L, tq_nom):
        elems = tq * L
        qk = math.ceil(L / tk) * math.ceil(tq / pr) * math.ceil(tk / pc) * d + fill
        passes = math.ceil(elems * (1 + (1 + hw.exp_bfu_ops) + (NORMALIZE_BASE_OPS + hw.exp_bfu_ops)) / hw.bfus)
        sv = math.ceil(tq / pr) * math.ceil(d / pc) * L + fill
        wb = math.ceil(tq * d * out_bytes(mode) / hw.writeback_bytes_per_cycle)
        if mode.is_int:
            comp = with_quant_stage(qk, qu_cycles(elems, hw)) + passes + BFU_LATENCY + \
                with_quant_stage(sv, qu_cycles(elems, hw)) + wb
        else:
            comp = qk + passes + BFU_LATENCY + sv + wb
        traffic = 2 * L * d * ab + (4 * tq * L * 2 if spill else 0)
        cycles += reps * max(comp, math.ceil(traffic / hw.dram_bytes_per_cycle))
        busy += reps * comp
        dram_bytes += reps * traffic
    peaks = {
        "input_buf": math.ceil(2 * (tq_nom * d + tk * d) * ab),
        "weight_buf": math.ceil(2 * tk * d * ab),
        "output_buf": min(score_bytes, hw.output_buffer_bytes),
        "score_buffer": score_bytes,
    }
    flags = ["spill:score_buffer"] if spill else []
    energy = _energy(hw, bfu_cycles=busy, qu_cycles=0, weight_buf_cycles=busy, io_cycles=busy,
                     dram_bytes=dram_bytes)
    phases = {"compute_int" if mode.is_int else "compute_bf16": busy, "dram_stall": cycles - busy}
    return SimReport(cycles, phases, energy, peaks, flags, 0.0, {}, {"op": "attention_baseline"},
                     [(0, cycles, "attention")])


# ---------------------------------------------------------------------------
# whole model


def model_ops(spec, mode: PrecisionMode, method=None, tiles=None) -> list[LayerOp]:
    """Operator sequence of one forward pass of the toy model.

    BF16 mode is the unquantized baseline: no rotations, DCTs or QU work.
    """
    from .attention import TileConfig
    from .pipeline import LayerKind
    from .quant import Method

    method = Method.VERSAQ if method is None else Method(method)
    tiles = tiles or TileConfig()
    T, C, hid, h = spec.tokens, spec.C, spec.hidden, spec.h
    quant = mode.is_int
    rot = quant and method.rotates
    dct = quant and method.uses_dct
    qv = (lambda n: n) if quant else (lambda n: 0)
    cfg = spec.attention
    ops: list[LayerOp] = []

    def nl(kind, n, name):
        ops.append(LayerOp(OpKind.NONLINEAR, mode, nonlinear=kind, elements=n, name=name))

    if rot:
        ops.append(LayerOp(OpKind.ONLINE_WHT, mode, T, C, C, name="wht_enter"))
    for i, kind in enumerate(spec.layers):
        tag = f"l{i}"
        nl(Nonlinear.LAYERNORM, T * C, f"{tag}.ln")
        if kind.is_attention:
            ops.append(LayerOp(OpKind.GEMM, mode, T, C, 3 * C, quant_values=qv(T * C), name=f"{tag}.qkv"))
            if dct:
                ops.append(LayerOp(OpKind.IDCT, mode, T, 32, 3 * C, name=f"{tag}.qkv_idct"))
            nl(Nonlinear.ROPE, 2 * T * C, f"{tag}.rope")
            if rot:
                ops.append(LayerOp(OpKind.ONLINE_WHT, mode, 3 * T * h, spec.d_k, spec.d_k, name=f"{tag}.head_wht"))
            if quant:
                ops.append(LayerOp(OpKind.QUANT_DEQUANT, mode, elements=3 * T * C, name=f"{tag}.qkv_quant"))
            ops.append(LayerOp(OpKind.TILED_ATTENTION, mode, attention=(cfg, tiles, kind is LayerKind.FRAME),
                               name=f"{tag}.attn"))
            ops.append(LayerOp(OpKind.GEMM, mode, T, C, C, quant_values=qv(T * C), name=f"{tag}.proj"))
            if dct:
                ops.append(LayerOp(OpKind.IDCT, mode, T, 32, C, name=f"{tag}.proj_idct"))
        else:
            ops.append(LayerOp(OpKind.GEMM, mode, T, C, hid, quant_values=qv(T * C), name=f"{tag}.fc1"))
            if dct:
                ops.append(LayerOp(OpKind.IDCT, mode, T, 32, hid, name=f"{tag}.fc1_idct"))
            nl(Nonlinear.GELU, T * hid, f"{tag}.gelu")
            if rot:
                ops.append(LayerOp(OpKind.ONLINE_WHT, mode, T, hid, hid, name=f"{tag}.hidden_wht"))
                # coordinate 0 of the rotated hidden state bypasses the quantizer (rank-1 update)
                nl(Nonlinear.ELEMENTWISE, 2 * T * C, f"{tag}.dc_update")
            ops.append(LayerOp(OpKind.GEMM, mode, T, hid, C, quant_values=qv(T * hid), name=f"{tag}.fc2"))
            if dct:
                ops.append(LayerOp(OpKind.IDCT, mode, T, 32, C, name=f"{tag}.fc2_idct"))
        nl(Nonlinear.ELEMENTWISE, T * C, f"{tag}.residual")
    if rot:
        ops.append(LayerOp(OpKind.ONLINE_WHT, mode, T, C, C, name="wht_exit"))
    return ops


def simulate_op(op: LayerOp, hw: HardwareConfig, baseline_attention: bool = False) -> SimReport:
    if op.kind is OpKind.GEMM:
        return simulate_gemm(op, hw)
    if op.kind is OpKind.ONLINE_WHT:
        return simulate_wht(op, hw)
    if op.kind is OpKind.IDCT:
        return simulate_idct(op, hw)
    if op.kind is OpKind.NONLINEAR:
        return simulate_nonlinear(op, hw)
    if op.kind is OpKind.QUANT_DEQUANT:
        return simulate_quant(op, hw)
    cfg, tiles, frame = op.attention
    fn = simulate_attention_baseline if baseline_attention else simulate_tiled_attention
    return fn(cfg, tiles, hw, op.mode, frame)


def simulate_ops(ops: list[LayerOp], hw: HardwareConfig, baseline_attention: bool = False) -> SimReport:
    """Chain every operator's passes so weight loads overlap preceding compute."""
    chain: list[tuple[int, int, str]] = []
    energy: dict[str, float] = {}
    peaks: dict[str, int] = {}
    flags: list[str] = []
    phases: dict[str, int] = {}
    macs = 0.0
    for op in ops:
        rep = simulate_op(op, hw, baseline_attention)
        cat = "attention" if op.kind is OpKind.TILED_ATTENTION else "other"
        chain += [(l, c, cat) for l, c, _ in rep.passes]
        for k, v in rep.energy.items():
            energy[k] = energy.get(k, 0.0) + v
        for k, v in rep.peaks.items():
            peaks[k] = max(peaks.get(k, 0), v)
        for f in rep.flags:
            tagged = f"{f}@{op.name}" if op.name else f
            if tagged not in flags:
                flags.append(tagged)
        for k, v in rep.phases.items():
            if k in ("weight_load", "dram_stall"):
                continue
            phases[k] = phases.get(k, 0) + v
        if op.kind in (OpKind.GEMM, OpKind.ONLINE_WHT, OpKind.IDCT):
            macs += op.M * op.K * op.N
    total, exposed = _chain([(l, c) for l, c, _ in chain])
    breakdown = {"weight_load": exposed,
                 "attention": sum(c for _, c, k in chain if k == "attention"),
                 "other": sum(c for _, c, k in chain if k == "other")}
    phases["weight_load"] = exposed
    phases["dram_stall"] = exposed - (chain[0][0] if chain else 0)
    mode = ops[0].mode if ops else PrecisionMode.BF16
    pr, pc, _ = hw.array(mode)
    util = macs / (pr * pc * total) if total else 0.0
    return SimReport(total, phases, energy, peaks, flags, util, breakdown,
                     {"ops": len(ops), "area_mm2": dict(AREA_MM2)}, [(l, c, k) for l, c, k in chain])


def simulate_model(spec, hw: HardwareConfig, mode: PrecisionMode, method=None, tiles=None,
                   baseline_attention: bool = False) -> SimReport:
    rep = simulate_ops(model_ops(spec, mode, method, tiles), hw, baseline_attention)
    rep.meta.update({"mode": mode.value, "S": spec.S, "P": spec.P, "C": spec.C, "heads": spec.h,
                     "blocks": spec.blocks, "method": (method.value if hasattr(method, "value") else method)
                     if method is not None else "versaq"})
    return rep
