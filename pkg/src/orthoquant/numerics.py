"""Scalar and matrix primitives with exact, reproducible semantics.

Dense matrices are plain ``float64`` numpy arrays.  BF16 values are carried
as ``uint16`` bit patterns (the upper half of an IEEE binary32), and all
BF16 arithmetic is emulated by rounding mathematically exact results with
round-to-nearest-even, so results never depend on the host FPU.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

BF16_MANT_BITS = 7
BF16_EXP_BIAS = 127
BF16_MIN_NORMAL = 2.0 ** -126
BF16_MAX = (2.0 - 2.0 ** -7) * 2.0 ** 127
BF16_NAN = 0x7FC0
BF16_POS_INF = 0x7F80
BF16_NEG_INF = 0xFF80


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


_DROP = 52 - BF16_MANT_BITS  # float64 mantissa bits below the BF16 lsb


def bf16_round(x, ftz: bool = False) -> np.ndarray:
    """Round float64 value(s) to the nearest BF16 pattern (RNE).

    Rounding happens directly from the 64-bit value, so no intermediate
    binary32 rounding step can create a spurious tie.  Overflow goes to
    signed infinity; the subnormal range is honoured unless ``ftz`` is set,
    in which case any result below the smallest normal flushes to signed
    zero (the result is rounded with an unbounded exponent first).
    """
    shape = np.shape(x)
    x = np.ascontiguousarray(x, dtype=np.float64)
    u = x.view(np.uint64)
    lsb = (u >> np.uint64(_DROP)) & np.uint64(1)
    u = (u + (np.uint64((1 << (_DROP - 1)) - 1) + lsb)) & ~np.uint64((1 << _DROP) - 1)
    r = u.view(np.float64)
    finite = np.isfinite(x)
    r = np.where(finite, r, x)
    r = np.where(finite & (np.abs(r) > BF16_MAX), np.copysign(np.inf, x), r)
    tiny = (np.abs(r) < BF16_MIN_NORMAL) & (x != 0)
    if ftz:
        r = np.where(tiny, np.copysign(0.0, x), r)
    elif tiny.any():
        r = np.where(tiny, _round_subnormal(np.where(tiny, x, 0.0)), r)
    return _to_bits(r).reshape(shape)


def _to_bits(r: np.ndarray) -> np.ndarray:
    # r holds BF16-representable values, so the binary32 conversion is exact
    bits = (r.astype(np.float32).view(np.uint32) >> 16).astype(np.uint16)
    nan = np.isnan(r)
    if nan.any():
        bits = np.where(nan, np.uint16(BF16_NAN), bits)
    return bits


def _round_subnormal(x: np.ndarray) -> np.ndarray:
    """RNE onto the fixed BF16 subnormal grid (quantum 2**-133)."""
    q = -126 - BF16_MANT_BITS
    r = np.ldexp(np.rint(np.ldexp(x, -q)), q)
    return np.where(r == 0.0, np.copysign(0.0, x), r)


def bf16_round_reference(x, ftz: bool = False) -> np.ndarray:
    """Slow frexp-based RNE rounding; kept as an independent check of ``bf16_round``."""
    x = _as_f64(x)
    out = np.empty(x.shape, dtype=np.float64)
    finite = np.isfinite(x)
    xf = np.where(finite, x, 0.0)
    _, e = np.frexp(xf)
    # frexp: |x| = m * 2**e with m in [0.5, 1); the leading bit sits at e - 1
    lead = e.astype(np.int64) - 1
    if not ftz:
        lead = np.maximum(lead, -126)
    quantum_exp = lead - BF16_MANT_BITS
    r = np.ldexp(np.rint(np.ldexp(xf, -quantum_exp)), quantum_exp)
    r = np.where(np.abs(r) > BF16_MAX, np.copysign(np.inf, xf), r)
    if ftz:
        r = np.where(np.abs(r) < BF16_MIN_NORMAL, np.copysign(0.0, xf), r)
    r = np.where(r == 0.0, np.copysign(0.0, xf), r)
    out[finite] = r[finite]
    out[~finite] = x[~finite]
    return _to_bits(out)


def bf16_to_float(bits) -> np.ndarray:
    """Exact float64 value of BF16 pattern(s)."""
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    with np.errstate(invalid="ignore"):  # signalling NaN payloads
        return b.view(np.float32).astype(np.float64)


def bf16_quantize(x, ftz: bool = False) -> np.ndarray:
    """Round to BF16 and return the value as float64 (same shape)."""
    return bf16_to_float(bf16_round(x, ftz=ftz))


def bf16_flush(bits) -> np.ndarray:
    """Replace subnormal BF16 patterns by signed zero."""
    b = np.asarray(bits, dtype=np.uint16)
    sub = ((b & 0x7F80) == 0) & ((b & 0x007F) != 0)
    return np.where(sub, b & np.uint16(0x8000), b).astype(np.uint16)


def bf16_add(a, b, ftz: bool = False) -> np.ndarray:
    """Exact sum of two BF16 patterns, rounded to BF16.

    float64 holds the exact sum whenever the exponents are within 45 of
    each other; beyond that the smaller operand is far below half an ulp
    and the float64 rounding cannot manufacture a BF16 tie.
    """
    if ftz:
        a, b = bf16_flush(a), bf16_flush(b)
    with np.errstate(invalid="ignore"):  # inf - inf is NaN by definition
        return bf16_round(bf16_to_float(a) + bf16_to_float(b), ftz=ftz)


def bf16_mul(a, b, ftz: bool = False) -> np.ndarray:
    """Exact product of two BF16 patterns (16 significant bits fit in f64), rounded."""
    if ftz:
        a, b = bf16_flush(a), bf16_flush(b)
    with np.errstate(invalid="ignore"):  # 0 * inf
        return bf16_round(bf16_to_float(a) * bf16_to_float(b), ftz=ftz)


def bf16_same(a, b) -> np.ndarray:
    """Bitwise equality that treats every NaN pattern as equal."""
    a = np.asarray(a, dtype=np.uint16)
    b = np.asarray(b, dtype=np.uint16)
    nan_a = ((a & 0x7F80) == 0x7F80) & ((a & 0x7F) != 0)
    nan_b = ((b & 0x7F80) == 0x7F80) & ((b & 0x7F) != 0)
    return (a == b) | (nan_a & nan_b)


def matmul(a, b) -> np.ndarray:
    """Reference float64 GEMM with a fixed k-major accumulation order.

    ``out`` starts at zero and receives the rank-1 update ``a[:, k] b[k, :]``
    for k = 0, 1, ... in turn, so every output element is summed in the
    same order on every platform.
    """
    a = _as_f64(a)
    b = _as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects rank-2 matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


class Granularity(enum.Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


class PrecisionMode(enum.Enum):
    BF16 = "bf16"
    W4A8 = "w4a8"
    W4A4 = "w4a4"

    @property
    def weight_bits(self) -> int:
        return 16 if self is PrecisionMode.BF16 else 4

    @property
    def act_bits(self) -> int:
        return {"bf16": 16, "w4a8": 8, "w4a4": 4}[self.value]

    @property
    def is_int(self) -> bool:
        return self is not PrecisionMode.BF16

    @classmethod
    def parse(cls, name: str) -> "PrecisionMode":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown precision mode {name!r} (expected bf16, w4a8 or w4a4)") from None


def qmax(bit_width: int) -> int:
    """Largest code of the symmetric, zero-point-free range."""
    return (1 << (bit_width - 1)) - 1


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """Integer codes plus scale metadata for a rank-2 matrix.

    Codes are stored widened in ``int8`` regardless of ``bit_width``.
    Per-channel scales run along the last (column) axis.
    """

    codes: np.ndarray
    bit_width: int
    scales: np.ndarray
    granularity: Granularity

    def __post_init__(self):
        codes = np.asarray(self.codes)
        scales = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if codes.ndim != 2:
            raise ValueError("QuantTensor codes must be rank-2")
        if not 2 <= self.bit_width <= 8:
            raise ValueError(f"unsupported bit width {self.bit_width}")
        lim = qmax(self.bit_width)
        if codes.size and (codes.min() < -lim or codes.max() > lim):
            raise ValueError(f"codes outside symmetric {self.bit_width}-bit range")
        if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
            raise ValueError("scales must be finite and positive")
        expected = 1 if self.granularity is Granularity.PER_TENSOR else codes.shape[1]
        if scales.shape != (expected,):
            raise ValueError(f"expected {expected} scale(s) for {self.granularity.value}, got {scales.shape}")
        object.__setattr__(self, "codes", codes.astype(np.int8, copy=False))
        object.__setattr__(self, "scales", scales)

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scales[np.newaxis, :]
