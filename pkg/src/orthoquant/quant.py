"""Quantizers, offline weight preparation and activation analysis.

Three weight-preparation methods share one code path and differ only in
which orthogonal factors are folded into the weight before rounding:

========  ===============================================
rtn       ``diag(gamma) W``
wht       ``H^T diag(gamma) W``
versaq    ``H^T diag(gamma) W D``  (D = DCT along outputs)
========  ===============================================

The terminal step is always symmetric round-to-nearest (half-to-even).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numerics import Granularity, QuantTensor, qmax
from .tensorio import save_tensor, write_kv
from .transforms import (
    DctVariant,
    apply_block_operator,
    apply_block_wht,
    apply_wht,
    block_dct_operators,
    block_hadamard,
    dct_operators,
    hadamard_matrix,
    is_pow2,
)


class Method(enum.Enum):
    RTN = "rtn"
    WHT = "wht"
    VERSAQ = "versaq"

    @property
    def rotates(self) -> bool:
        return self is not Method.RTN

    @property
    def uses_dct(self) -> bool:
        return self is Method.VERSAQ

    @classmethod
    def parse(cls, name: str) -> "Method":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown method {name!r} (expected rtn, wht or versaq)") from None


def _group_scale(amax: np.ndarray, bit_width: int) -> np.ndarray:
    scale = amax / qmax(bit_width)
    return np.where(amax > 0, scale, 1.0)


def rtn_quantize(x, bit_width: int, granularity: Granularity | str = Granularity.PER_TENSOR) -> QuantTensor:
    """Symmetric round-to-nearest-even quantization of a rank-2 matrix.

    Per-channel groups are columns (the output channels of a ``K x N``
    weight).  An all-zero group gets scale 1 and zero codes.
    """
    x = np.asarray(x, dtype=np.float64)
    granularity = Granularity(granularity)
    if x.ndim != 2:
        raise ValueError("rtn_quantize expects a rank-2 matrix")
    if x.size == 0:
        raise ValueError("cannot quantize an empty matrix")
    if not 3 <= bit_width <= 8:
        raise ValueError(f"bit width must be in [3, 8], got {bit_width}")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    if granularity is Granularity.PER_TENSOR:
        scale = _group_scale(np.array([np.abs(x).max()]), bit_width)
    else:
        scale = _group_scale(np.abs(x).max(axis=0), bit_width)
    lim = qmax(bit_width)
    codes = np.clip(np.rint(x / scale[np.newaxis, :]), -lim, lim)
    return QuantTensor(codes.astype(np.int8), bit_width, scale, granularity)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.dequantize()


def quantize_dynamic(x, bit_width: int) -> tuple[np.ndarray, float]:
    """Per-tensor dynamic quantization of an array of any rank.

    Returns float64 integer-valued codes and the scalar scale; used for
    activations, which are never calibrated.
    """
    x = np.asarray(x, dtype=np.float64)
    amax = float(np.abs(x).max()) if x.size else 0.0
    scale = amax / qmax(bit_width) if amax > 0 else 1.0
    lim = qmax(bit_width)
    return np.clip(np.rint(x / scale), -lim, lim), scale


@dataclass(frozen=True)
class FusionParams:
    """LayerNorm scale/bias and the LayerScale vector of one block."""

    gamma: np.ndarray
    beta: np.ndarray
    layerscale: np.ndarray | None = None
    eps: float = 1e-6

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if g.shape != b.shape or g.ndim != 1:
            raise ValueError("gamma and beta must be vectors of equal length")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)
        if self.layerscale is not None:
            object.__setattr__(self, "layerscale", np.asarray(self.layerscale, dtype=np.float64))

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-6) -> "FusionParams":
        return cls(np.ones(channels), np.zeros(channels), None, eps)


class TransformPack:
    """Per-model orthogonal factors, cached by order.

    DCTs wider than ``dct_block`` are applied block-diagonally with a
    ``dct_block``-point transform (the on-chip integer core is at most 32).
    """

    def __init__(self, channels: int, head_dim: int, dct_block: int = 32,
                 dct_variant: DctVariant | str = DctVariant.ORTHONORMAL):
        if not (is_pow2(channels) and is_pow2(head_dim)):
            raise ValueError("channels and head_dim must be powers of two")
        self.channels = channels
        self.head_dim = head_dim
        self.dct_block = dct_block
        self.dct_variant = DctVariant(dct_variant)

    def hadamard(self, order: int) -> np.ndarray:
        return hadamard_matrix(order)

    def head_rotation(self, total: int | None = None) -> np.ndarray:
        return _block_had(total or self.channels, self.head_dim)

    def dct(self, order: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense block-diagonal (forward, inverse) operators of size ``order``."""
        block = min(self.dct_block, order)
        return _block_dct(order, block, self.dct_variant)

    def dct_block_ops(self, order: int) -> tuple[np.ndarray, np.ndarray]:
        """The single (forward, inverse) block that ``dct(order)`` repeats."""
        block = min(self.dct_block, order)
        if order % block:
            raise ValueError(f"{order} is not a multiple of DCT block {block}")
        return dct_operators(block, self.dct_variant)


@lru_cache(maxsize=32)
def _block_had(total: int, block: int) -> np.ndarray:
    return block_hadamard(total, block)


@lru_cache(maxsize=32)
def _block_dct(total: int, block: int, variant: DctVariant):
    return block_dct_operators(total, block, variant)


@dataclass(eq=False)
class PreparedWeight:
    """A fused (and usually quantized) weight ready for an INT GEMM.

    ``fused`` is the transformed float weight before rounding; ``w_final``
    is ``None`` when quantization is bypassed.  ``bias_final`` lives in the
    domain reached after the on-chip IDCT; ``dct_inverse`` is the IDCT block
    applied to each consecutive group of output columns.
    """

    fused: np.ndarray
    w_final: QuantTensor | None
    bias_final: np.ndarray
    method: Method
    bit_width: int | None
    dct_inverse: np.ndarray | None = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)

    def dense(self) -> np.ndarray:
        return self.fused if self.w_final is None else self.w_final.dequantize()

    def save(self, stem: str) -> None:
        """Write ``stem.vq3t`` (codes or f64 weight), ``stem.scales.vq3t`` and ``stem.meta``."""
        if self.w_final is None:
            save_tensor(f"{stem}.vq3t", self.fused, "f64")
        else:
            save_tensor(f"{stem}.vq3t", self.w_final.codes, "i8")
            save_tensor(f"{stem}.scales.vq3t", self.w_final.scales, "f64")
        save_tensor(f"{stem}.bias.vq3t", self.bias_final, "f64")
        write_kv(f"{stem}.meta", {
            "method": self.method.value,
            "bit_width": self.bit_width if self.bit_width is not None else "none",
            "granularity": self.w_final.granularity.value if self.w_final is not None else "none",
            **{k: v for k, v in self.meta.items()},
        })


def prepare_weights(w, fp: FusionParams | None, method: Method | str, bit_width: int | None,
                    transforms: TransformPack, *, input_rotation: str = "channel",
                    rotate_output: bool = False, bias=None) -> PreparedWeight:
    """Fold LayerNorm scale, rotations and the DCT into ``w`` and quantize.

    ``input_rotation`` picks the rotation the incoming activations carry:
    ``"channel"`` (full Hadamard of the input width), ``"head"``
    (block-diagonal per-head Hadamard) or ``"none"``.  With
    ``rotate_output`` the product is left multiplied into the rotated
    residual domain (``... diag(lambda) H``).  Offline only.
    """
    method = Method(method)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weights must be rank-2")
    k, n = w.shape
    gamma = np.ones(k) if fp is None else fp.gamma
    beta = np.zeros(k) if fp is None else fp.beta
    lam = None if fp is None else fp.layerscale
    if gamma.shape != (k,):
        raise ValueError(f"gamma length {gamma.shape[0]} does not match weight rows {k}")
    if lam is not None and lam.shape != (n,):
        raise ValueError(f"layerscale length {lam.shape[0]} does not match weight cols {n}")

    fused = gamma[:, None] * w
    b = beta @ w
    if bias is not None:
        b = b + np.asarray(bias, dtype=np.float64)
    if lam is not None:
        fused = fused * lam[None, :]
        b = b * lam
    meta = {"rows": k, "cols": n, "input_rotation": "none", "output_rotation": "none", "dct_order": 0}
    if method.rotates:
        if input_rotation == "channel":
            fused = apply_wht(fused, axis=0)  # H^T = H
            meta["input_rotation"] = f"hadamard{k}"
        elif input_rotation == "head":
            fused = apply_block_wht(fused, transforms.head_dim, axis=0)
            meta["input_rotation"] = f"head_hadamard{transforms.head_dim}"
        elif input_rotation != "none":
            raise ValueError(f"unknown input rotation {input_rotation!r}")
        if rotate_output:
            fused = apply_wht(fused)
            b = apply_wht(b)
            meta["output_rotation"] = f"hadamard{n}"
    inverse = None
    if method.uses_dct:
        fwd, inverse = transforms.dct_block_ops(n)
        fused = apply_block_operator(fused, fwd)
        meta["dct_order"] = min(transforms.dct_block, n)
        meta["dct_variant"] = transforms.dct_variant.value
    q = None if bit_width is None else rtn_quantize(fused, bit_width, Granularity.PER_CHANNEL)
    return PreparedWeight(fused, q, b, method, bit_width, inverse, meta)


def fold_ln_stats_rotated(x_rot) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean and population variance of ``x`` recovered from ``x @ H``.

    The first Hadamard coefficient is ``sum(x) / sqrt(C)`` and the rotation
    preserves the Euclidean norm, so no un-rotation is needed.
    """
    x_rot = np.asarray(x_rot, dtype=np.float64)
    c = x_rot.shape[-1]
    mean = x_rot[..., 0] / np.sqrt(c)
    var = np.einsum("...i,...i->...", x_rot, x_rot) / c - mean * mean
    return mean, np.maximum(var, 0.0)


@dataclass(frozen=True)
class SaliencyProfile:
    channel_variance: np.ndarray
    minimum: np.ndarray
    p25: np.ndarray
    p75: np.ndarray
    maximum: np.ndarray


def channel_saliency(x) -> SaliencyProfile:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("channel_saliency needs a matrix with at least 2 rows")
    p25, p75 = np.percentile(x, [25, 75], axis=0)
    return SaliencyProfile(x.var(axis=0), x.min(axis=0), p25, p75, x.max(axis=0))


class ActivationKind(enum.Enum):
    SATURATED = "saturated"
    SPIKY = "spiky"
    GAUSSIAN = "gaussian"


SATURATED_FRACTION = 0.05
SPIKY_FRACTION = 0.001
INFLATE_FACTOR = 20.0


def synth_activations(kind: ActivationKind | str, rows: int, cols: int, seed: int, *,
                      fraction: float | None = None, factor: float = INFLATE_FACTOR) -> np.ndarray:
    """Unit Gaussian activations with optional planted outliers.

    ``saturated`` inflates whole channels (every row), ``spiky`` inflates
    isolated entries.  Deterministic in ``seed``.
    """
    kind = ActivationKind(kind)
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, cols))
    if kind is ActivationKind.SATURATED:
        frac = SATURATED_FRACTION if fraction is None else fraction
        n = max(1, int(round(frac * cols)))
        chans = rng.choice(cols, size=n, replace=False)
        x[:, chans] *= factor
    elif kind is ActivationKind.SPIKY:
        frac = SPIKY_FRACTION if fraction is None else fraction
        n = max(1, int(round(frac * rows * cols)))
        flat = rng.choice(rows * cols, size=n, replace=False)
        x.flat[flat] *= factor
    return x


def saturated_channels(rows: int, cols: int, seed: int, fraction: float = SATURATED_FRACTION) -> np.ndarray:
    """Indices of the channels ``synth_activations('saturated', ...)`` inflates."""
    rng = np.random.default_rng(seed)
    rng.standard_normal((rows, cols))
    return np.sort(rng.choice(cols, size=max(1, int(round(fraction * cols))), replace=False))


def quant_error(reference, test) -> dict[str, float]:
    ref = np.asarray(reference, dtype=np.float64).ravel()
    tst = np.asarray(test, dtype=np.float64).ravel()
    if np.shape(reference) != np.shape(test):
        raise ValueError(f"shape mismatch: {np.shape(reference)} vs {np.shape(test)}")
    diff = tst - ref
    nr, nt = np.linalg.norm(ref), np.linalg.norm(tst)
    if np.array_equal(ref, tst):
        cos = 1.0
    elif nr == 0 or nt == 0:
        cos = 0.0
    else:
        cos = float(np.clip(np.dot(ref, tst) / (nr * nt), -1.0, 1.0))
    return {
        "mse": float(np.mean(diff * diff)) if diff.size else 0.0,
        "max_abs": float(np.abs(diff).max()) if diff.size else 0.0,
        "cosine": cos,
    }
