"""Multi-head attention: float reference, RoPE, and the two-stage tiled kernel.

Tensors with heads use the layout ``(..., L, d)``; the leading axes are
batch (heads, frames) and are processed together.  The tiled kernel keeps
only per-row running statistics between its two sweeps over K and never
materializes a full score row.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .numerics import QuantTensor, PrecisionMode, bf16_quantize
from .quant import Method, PreparedWeight, quantize_dynamic
from .transforms import apply_block_operator, apply_wht, is_pow2


@dataclass(frozen=True)
class AttentionConfig:
    S: int
    P: int
    C: int
    heads: int
    rope_base: float | None = 100.0

    def __post_init__(self):
        if self.C % self.heads:
            raise ValueError(f"C={self.C} is not divisible by {self.heads} heads")
        if not is_pow2(self.d_k):
            raise ValueError(f"head dim {self.d_k} must be a power of two")
        if self.S * self.P < 1:
            raise ValueError("need at least one token")

    @property
    def d_k(self) -> int:
        return self.C // self.heads

    @property
    def softmax_scale(self) -> float:
        return self.d_k ** -0.5

    @property
    def tokens(self) -> int:
        return self.S * self.P


@dataclass(frozen=True)
class TileConfig:
    t_q: int = 64
    t_k: int = 64
    t_v: int = 2048

    def __post_init__(self):
        if min(self.t_q, self.t_k, self.t_v) < 1:
            raise ValueError("tile sizes must be positive")
        if self.t_v % self.t_k:
            raise ValueError(f"t_v={self.t_v} must be a multiple of t_k={self.t_k}")


@dataclass(frozen=True)
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wproj: np.ndarray
    b_qkv: np.ndarray | None = None
    b_proj: np.ndarray | None = None


class LayoutMode(enum.Enum):
    GLOBAL = "global"
    FRAME = "frame"


@dataclass(frozen=True)
class TokenLayout:
    mode: LayoutMode
    S: int
    P: int
    C: int


def relayout(x, src: TokenLayout, dst: TokenLayout) -> np.ndarray:
    """Switch between ``(S*P, C)`` global rows and ``(S, P, C)`` frames."""
    if (src.S, src.P, src.C) != (dst.S, dst.P, dst.C):
        raise ValueError("layouts disagree on S, P or C")
    x = np.asarray(x)
    want = (src.S * src.P, src.C) if src.mode is LayoutMode.GLOBAL else (src.S, src.P, src.C)
    if x.shape != want:
        raise ValueError(f"expected shape {want} for {src.mode.value} layout, got {x.shape}")
    if dst.mode is LayoutMode.GLOBAL:
        return x.reshape(dst.S * dst.P, dst.C)
    return x.reshape(dst.S, dst.P, dst.C)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, c = x.shape
    return x.reshape(t, heads, c // heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, d = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * d)


def rope_apply(x, positions, base: float) -> np.ndarray:
    """Rotary embedding on interleaved pairs ``(x[2j], x[2j+1])`` of the last axis."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if d % 2:
        raise ValueError("RoPE needs an even head dimension")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[-2],):
        raise ValueError("one position per row is required")
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    a, b = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


def patch_positions(cfg: AttentionConfig) -> np.ndarray:
    """Patch index within its frame for every token of the global layout."""
    return np.tile(np.arange(cfg.P), cfg.S)


def softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_core(q, k, v, scale: float) -> np.ndarray:
    """``softmax(q k^T * scale) v`` with max subtraction, float64."""
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    return np.matmul(softmax(s), v)


def reference_mha(x, weights: AttentionWeights, cfg: AttentionConfig, frame_wise: bool = False) -> np.ndarray:
    """Float64 MHA on ``(S*P, C)`` tokens, confined to frames when ``frame_wise``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.tokens, cfg.C):
        raise ValueError(f"expected input {(cfg.tokens, cfg.C)}, got {x.shape}")
    for w in (weights.wq, weights.wk, weights.wv, weights.wproj):
        if w.shape != (cfg.C, cfg.C):
            raise ValueError("projection weights must be C x C")
    c = cfg.C
    b = np.zeros(3 * c) if weights.b_qkv is None else weights.b_qkv
    projs = (weights.wq, weights.wk, weights.wv)
    q, k, v = (split_heads(x @ w + b[i * c:(i + 1) * c], cfg.heads) for i, w in enumerate(projs))
    if cfg.rope_base is not None:
        pos = patch_positions(cfg)
        q, k = rope_apply(q, pos, cfg.rope_base), rope_apply(k, pos, cfg.rope_base)
    if frame_wise:
        shape = (cfg.heads * cfg.S, cfg.P, cfg.d_k)
        o = attention_core(q.reshape(shape), k.reshape(shape), v.reshape(shape), cfg.softmax_scale)
        o = o.reshape(cfg.heads, cfg.tokens, cfg.d_k)
    else:
        o = attention_core(q, k, v, cfg.softmax_scale)
    out = merge_heads(o) @ weights.wproj
    if weights.b_proj is not None:
        out = out + weights.b_proj
    return out


@dataclass
class SoftmaxStats:
    """Running row max ``m`` and max-subtracted exp-sum ``sigma``."""

    m: np.ndarray
    sigma: np.ndarray

    @classmethod
    def init(cls, shape) -> "SoftmaxStats":
        return cls(np.full(shape, -np.inf), np.zeros(shape))


def _exp_shift(a: np.ndarray, m: np.ndarray) -> np.ndarray:
    # e^(a - m) with e^(-inf) = 0 for untouched rows
    with np.errstate(invalid="ignore"):
        out = np.exp(a - m)
    return np.where(np.isneginf(a), 0.0, out)


def streaming_update(stats: SoftmaxStats, tile_max, tile_sum, precision: str = "f64") -> SoftmaxStats:
    """Fold one tile's (max, exp-sum) into the running statistics.

    ``precision="bf16"`` rounds every intermediate the way the BF16 units
    would (exp results, products and the sum).
    """
    tile_max = np.asarray(tile_max, dtype=np.float64)
    tile_sum = np.asarray(tile_sum, dtype=np.float64)
    m_new = np.maximum(stats.m, tile_max)
    old = _exp_shift(stats.m, m_new)
    new = _exp_shift(tile_max, m_new)
    if precision == "bf16":
        r = bf16_quantize
        sigma = r(r(stats.sigma * r(old)) + r(tile_sum * r(new)))
    else:
        sigma = stats.sigma * old + tile_sum * new
    return SoftmaxStats(m_new, sigma)


@dataclass
class AttentionTrace:
    """Instrumentation for the tiled kernel's buffer and output discipline."""

    rows: int = 0
    peak_score_rows: int = 0
    peak_score_entries: int = 0
    score_tiles: int = 0
    o_writes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    o_reads: int = 0

    def start(self, rows: int) -> None:
        self.rows = rows
        self.o_writes = np.zeros(rows, dtype=np.int64)

    def score_tile(self, rows: int, cols: int) -> None:
        self.score_tiles += 1
        self.peak_score_rows = max(self.peak_score_rows, rows)
        self.peak_score_entries = max(self.peak_score_entries, rows * cols)

    def wrote(self, r0: int, r1: int) -> None:
        self.o_writes[r0:r1] += 1


def _unpack(t):
    """Return (values, scale); scale is None for dense float input."""
    if isinstance(t, QuantTensor):
        if t.scales.shape != (1,):
            raise ValueError("tiled attention needs per-tensor scales")
        return t.codes.astype(np.float64), float(t.scales[0])
    if isinstance(t, tuple):
        vals, scale = t
        return np.asarray(vals, dtype=np.float64), float(scale)
    return np.asarray(t, dtype=np.float64), None


def tiled_attention(q, k, v, tiles: TileConfig = TileConfig(), *, softmax_scale: float | None = None,
                    mode: PrecisionMode | None = None, prob_bits: int | None = None,
                    softmax_precision: str | None = None, trace: AttentionTrace | None = None) -> np.ndarray:
    """Two-stage recomputation tiling of ``softmax(q k^T / sqrt(d)) v``.

    ``q``, ``k``, ``v`` are float arrays, per-tensor ``QuantTensor`` or
    ``(codes, scale)`` pairs.  Stage 1 sweeps K tiles to build the row
    statistics and drops every score tile; stage 2 sweeps K again in
    ``t_v`` groups, recomputes the scores, normalizes, optionally
    re-quantizes the probabilities per ``t_q x t_k`` tile to ``prob_bits``
    and accumulates into the output row tile, which is written once.

    ``mode=None`` is the float64 oracle.  INT modes default to BF16 softmax
    arithmetic and activation-bit probabilities; BF16 mode rounds
    probabilities to BF16.
    """
    qv, sq = _unpack(q)
    kv, sk = _unpack(k)
    vv, sv = _unpack(v)
    if qv.shape[-1] != kv.shape[-1] or kv.shape[-2] != vv.shape[-2]:
        raise ValueError("q/k/v shapes are incompatible")
    if softmax_scale is None:
        softmax_scale = qv.shape[-1] ** -0.5
    if softmax_precision is None:
        softmax_precision = "f64" if mode is None else "bf16"
    bf16_probs = mode is PrecisionMode.BF16 and prob_bits is None
    if prob_bits is None and mode is not None and mode.is_int:
        prob_bits = mode.act_bits
    score_scale = softmax_scale * (sq if sq is not None else 1.0) * (sk if sk is not None else 1.0)
    v_scale = sv if sv is not None else 1.0
    use_bf16 = softmax_precision == "bf16"
    rnd = bf16_quantize if use_bf16 else (lambda a: a)

    L, Lk = qv.shape[-2], kv.shape[-2]
    batch = qv.shape[:-2]
    out = np.empty(batch + (L, vv.shape[-1]))
    if trace is not None:
        trace.start(L)
    kt = np.swapaxes(kv, -1, -2)

    def scores(qi, j0, j1):
        s = np.matmul(qi, kt[..., j0:j1]) * score_scale
        if trace is not None:
            trace.score_tile(s.shape[-2], s.shape[-1])
        return rnd(s)

    for i0 in range(0, L, tiles.t_q):
        i1 = min(i0 + tiles.t_q, L)
        qi = qv[..., i0:i1, :]
        stats = SoftmaxStats.init(batch + (i1 - i0,))
        for j0 in range(0, Lk, tiles.t_k):
            s = scores(qi, j0, min(j0 + tiles.t_k, Lk))
            tmax = s.max(axis=-1)
            tsum = rnd(rnd(np.exp(s - tmax[..., None])).sum(axis=-1))
            stats = streaming_update(stats, tmax, tsum, softmax_precision)
        inv_sigma = rnd(1.0 / stats.sigma)[..., None]
        m = stats.m[..., None]
        acc = np.zeros(batch + (i1 - i0, vv.shape[-1]))
        for n0 in range(0, Lk, tiles.t_v):
            n1 = min(n0 + tiles.t_v, Lk)
            for m0 in range(n0, n1, tiles.t_k):
                m1 = min(m0 + tiles.t_k, n1)
                p = rnd(rnd(np.exp(scores(qi, m0, m1) - m)) * inv_sigma)
                vm = vv[..., m0:m1, :]
                if prob_bits is not None:
                    codes, pscale = _quantize_tiles(p, prob_bits)
                    acc += np.matmul(codes, vm) * (pscale * v_scale)
                else:
                    if bf16_probs:
                        p = bf16_quantize(p)
                    acc += np.matmul(p, vm) * v_scale
        out[..., i0:i1, :] = acc
        if trace is not None:
            trace.wrote(i0, i1)
    return out


def _quantize_tiles(p: np.ndarray, bits: int):
    """Dynamic symmetric quantization with one scale per batch element of the tile."""
    lim = (1 << (bits - 1)) - 1
    amax = np.abs(p).max(axis=(-2, -1), keepdims=True)
    scale = np.where(amax > 0, amax / lim, 1.0)
    return np.clip(np.rint(p / scale), -lim, lim), scale


# ---------------------------------------------------------------------------
# quantized dataflow


@dataclass(frozen=True)
class ExecConfig:
    """How a quantized run executes.

    ``weight_bits`` / ``act_bits`` of ``None`` bypass integer rounding;
    ``bf16_storage`` rounds GEMM operands to BF16 instead (BF16 mode);
    ``bf16_nonlinear`` emulates BF16 in LayerNorm statistics, RoPE, GELU
    and softmax, otherwise those run in float64.
    """

    method: Method = Method.VERSAQ
    weight_bits: int | None = 4
    act_bits: int | None = 8
    bf16_storage: bool = False
    bf16_nonlinear: bool = True
    tiles: TileConfig = TileConfig()
    dc_passthrough: bool = True

    @classmethod
    def for_mode(cls, mode: PrecisionMode, method: Method = Method.VERSAQ, **kw) -> "ExecConfig":
        if mode is PrecisionMode.BF16:
            base = dict(method=method, weight_bits=None, act_bits=None, bf16_storage=True)
        else:
            base = dict(method=method, weight_bits=mode.weight_bits, act_bits=mode.act_bits)
        base.update(kw)
        return cls(**base)

    @property
    def softmax_precision(self) -> str:
        return "bf16" if self.bf16_nonlinear else "f64"

    def round_bf16(self, x: np.ndarray) -> np.ndarray:
        return bf16_quantize(x) if self.bf16_nonlinear else x

    def quantize_act(self, x: np.ndarray):
        """Activation as fed to an INT GEMM: ``(codes, scale)`` or a dense array."""
        if self.act_bits is not None:
            return quantize_dynamic(x, self.act_bits)
        if self.bf16_storage:
            return bf16_quantize(x)
        return x


def qgemm(x, pw: PreparedWeight, ex: ExecConfig, dc: np.ndarray | None = None) -> np.ndarray:
    """INT (or float) GEMM with a prepared weight, then IDCT and bias.

    ``dc`` is an optional BF16 column that replaces input coordinate 0 and
    enters as a rank-1 update instead of through the activation quantizer.
    """
    if dc is not None:
        x = x.copy()
        x[:, 0] = 0.0
    a = ex.quantize_act(x)
    if isinstance(a, tuple):
        codes, scale = a
        if pw.w_final is not None:
            y = (codes @ pw.w_final.codes.astype(np.float64)) * (scale * pw.w_final.scales)
        else:
            y = (codes * scale) @ pw.fused
        if dc is not None:
            y = y + dc[:, None] * pw.dense()[0][None, :]
    else:
        w = pw.dense()
        if ex.bf16_storage:
            w = bf16_quantize(w)
        if dc is not None:
            a = a.copy()
            a[:, 0] = dc
        y = a @ w
        if ex.bf16_storage:
            y = bf16_quantize(y)
    if pw.dct_inverse is not None:
        y = apply_block_operator(y, pw.dct_inverse)
    return y + pw.bias_final


@dataclass(eq=False)
class PreparedAttention:
    qkv: PreparedWeight
    proj: PreparedWeight


def quantized_attention_block(n_rot, prepared: PreparedAttention, cfg: AttentionConfig,
                              ex: ExecConfig, frame_wise: bool = False) -> np.ndarray:
    """Four-stage quantized attention on a normalized, rotated-domain input.

    1. INT GEMM with the fused QKV weight, on-chip IDCT, bias;
    2. BF16 dequant, RoPE on Q/K, per-head WHT on Q/K/V, re-quantize;
    3. two-stage tiled attention;
    4. INT GEMM with the fused output projection and IDCT.

    Returns the block's contribution in the rotated residual domain.
    """
    c, h = cfg.C, cfg.heads
    y = qgemm(n_rot, prepared.qkv, ex)
    y = ex.round_bf16(y)
    q, k, v = (split_heads(y[:, i * c:(i + 1) * c], h) for i in range(3))
    if cfg.rope_base is not None:
        pos = patch_positions(cfg)
        q = ex.round_bf16(rope_apply(q, pos, cfg.rope_base))
        k = ex.round_bf16(rope_apply(k, pos, cfg.rope_base))
    if ex.method.rotates:
        q, k, v = apply_wht(q), apply_wht(k), apply_wht(v)
    qa, ka, va = (ex.quantize_act(t) for t in (q, k, v))

    if frame_wise:
        shape = (h * cfg.S, cfg.P, cfg.d_k)
        qa, ka, va = (_reshape_act(t, shape) for t in (qa, ka, va))
        tiles = TileConfig(cfg.P, cfg.P, cfg.P)
    else:
        tiles = ex.tiles
    mode = None
    if ex.act_bits is not None:
        mode = PrecisionMode.W4A4 if ex.act_bits <= 4 else PrecisionMode.W4A8
    elif ex.bf16_storage:
        mode = PrecisionMode.BF16
    o = tiled_attention(qa, ka, va, tiles, softmax_scale=cfg.softmax_scale, mode=mode,
                        prob_bits=ex.act_bits, softmax_precision=ex.softmax_precision)
    o = merge_heads(o.reshape(h, cfg.tokens, cfg.d_k))
    return qgemm(o, prepared.proj, ex)


def _reshape_act(t, shape):
    if isinstance(t, tuple):
        return t[0].reshape(shape), t[1]
    return t.reshape(shape)
