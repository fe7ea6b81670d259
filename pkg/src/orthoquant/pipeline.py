"""Toy alternating-attention transformer, float reference and quantized runs.

Layer ``k`` of the attention stack is frame-wise when ``k`` is even and
global otherwise; every attention layer is followed by a GELU MLP.  The
quantized path enters the Hadamard-rotated residual domain once, keeps the
residual stream there (float64) and leaves it after the last block.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionWeights,
    ExecConfig,
    PreparedAttention,
    TileConfig,
    qgemm,
    quantized_attention_block,
    reference_mha,
)
from .numerics import PrecisionMode, bf16_quantize
from .quant import (
    FusionParams,
    Method,
    PreparedWeight,
    TransformPack,
    fold_ln_stats_rotated,
    prepare_weights,
    quant_error,
)
from .transforms import DctVariant, apply_wht, is_pow2


class LayerKind(enum.Enum):
    FRAME = "frame_attention"
    GLOBAL = "global_attention"
    MLP = "mlp"

    @property
    def is_attention(self) -> bool:
        return self is not LayerKind.MLP


@dataclass(frozen=True)
class ModelSpec:
    S: int = 2
    P: int = 256
    C: int = 512
    h: int = 8
    blocks: int = 4
    mlp_ratio: int = 4
    rope_base: float | None = 100.0
    eps: float = 1e-6

    def __post_init__(self):
        if not (is_pow2(self.C) and is_pow2(self.C * self.mlp_ratio)):
            raise ValueError("channel dims must be powers of two")
        if self.blocks < 1:
            raise ValueError("need at least one attention block")
        self.attention  # validates the head split

    @property
    def layers(self) -> list[LayerKind]:
        out = []
        for k in range(self.blocks):
            out += [LayerKind.FRAME if k % 2 == 0 else LayerKind.GLOBAL, LayerKind.MLP]
        return out

    @property
    def hidden(self) -> int:
        return self.C * self.mlp_ratio

    @property
    def d_k(self) -> int:
        return self.C // self.h

    @property
    def tokens(self) -> int:
        return self.S * self.P

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.S, self.P, self.C, self.h, self.rope_base)

    def with_frames(self, S: int) -> "ModelSpec":
        return ModelSpec(S, self.P, self.C, self.h, self.blocks, self.mlp_ratio, self.rope_base, self.eps)


@dataclass(eq=False)
class LayerParams:
    kind: LayerKind
    norm: FusionParams
    weights: dict[str, np.ndarray]


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    layers: list[LayerParams]
    seed: int


def init_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministic Gaussian weights with variance 1/fan_in."""
    rng = np.random.default_rng(seed)
    c, hid = spec.C, spec.hidden

    def lin(k, n):
        return rng.standard_normal((k, n)) / np.sqrt(k)

    def small(n):
        return rng.normal(0.0, 0.02, n)

    layers = []
    for kind in spec.layers:
        gamma = np.abs(rng.normal(1.0, 0.2, c))
        beta = small(c)
        lam = np.abs(rng.normal(1.0, 0.1, c))
        fp = FusionParams(gamma, beta, lam, spec.eps)
        if kind.is_attention:
            w = {"wq": lin(c, c), "wk": lin(c, c), "wv": lin(c, c), "wproj": lin(c, c),
                 "b_qkv": small(3 * c), "b_proj": small(c)}
        else:
            w = {"w1": lin(c, hid), "w2": lin(hid, c), "b1": small(hid), "b2": small(c)}
        layers.append(LayerParams(kind, fp, w))
    return Model(spec, layers, seed)


def layer_norm(x: np.ndarray, fp: FusionParams) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + fp.eps) * fp.gamma + fp.beta


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-form GELU."""
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def gelu_bf16(x: np.ndarray) -> np.ndarray:
    """tanh-form GELU with every intermediate rounded to BF16."""
    r = bf16_quantize
    x = r(x)
    x3 = r(r(x * x) * x)
    inner = r(r(x + r(0.044715 * x3)) * r(np.sqrt(2.0 / np.pi)))
    t = r(np.tanh(inner))
    return r(r(0.5 * x) * r(1.0 + t))


@dataclass
class RunResult:
    output: np.ndarray
    metrics: dict[str, float]
    layer_metrics: list[dict[str, float]] = field(default_factory=list)
    residuals: list[np.ndarray] = field(default_factory=list, repr=False)


def _check_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = (model.spec.tokens, model.spec.C)
    if x.shape != want:
        raise ValueError(f"input must be S*P x C = {want}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def run_reference(model: Model, x) -> RunResult:
    """Float64 forward pass."""
    cfg = model.spec.attention
    r = _check_input(model, x).copy()
    residuals = []
    for lp in model.layers:
        a = layer_norm(r, lp.norm)
        w = lp.weights
        if lp.kind.is_attention:
            aw = AttentionWeights(w["wq"], w["wk"], w["wv"], w["wproj"], w["b_qkv"], w["b_proj"])
            out = reference_mha(a, aw, cfg, frame_wise=lp.kind is LayerKind.FRAME)
        else:
            out = gelu(a @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]
        r = r + out * lp.norm.layerscale
        residuals.append(r.copy())
    same = [quant_error(t, t) for t in residuals]
    return RunResult(r, quant_error(r, r), same, residuals)


def prepare_model(model: Model, ex: ExecConfig, dct_variant: DctVariant | str = DctVariant.ORTHONORMAL,
                  dct_block: int = 32) -> list:
    """Offline preparation of every linear layer for one execution config."""
    spec = model.spec
    tp = TransformPack(spec.C, spec.d_k, dct_block, dct_variant)
    wb, m = ex.weight_bits, ex.method
    out = []
    for lp in model.layers:
        w, fp = lp.weights, lp.norm
        ln = FusionParams(fp.gamma, fp.beta, None, fp.eps)
        if lp.kind.is_attention:
            qkv = prepare_weights(np.hstack([w["wq"], w["wk"], w["wv"]]), ln, m, wb, tp,
                                  input_rotation="channel", bias=w["b_qkv"])
            post = FusionParams(np.ones(spec.C), np.zeros(spec.C), fp.layerscale, fp.eps)
            proj = prepare_weights(w["wproj"], post, m, wb, tp, input_rotation="head",
                                   rotate_output=True, bias=w["b_proj"])
            out.append(PreparedAttention(qkv, proj))
        else:
            hid = spec.hidden
            w1 = prepare_weights(w["w1"], ln, m, wb, tp, input_rotation="channel", bias=w["b1"])
            post = FusionParams(np.ones(hid), np.zeros(hid), fp.layerscale, fp.eps)
            w2 = prepare_weights(w["w2"], post, m, wb, tp, input_rotation="channel",
                                 rotate_output=True, bias=w["b2"])
            out.append((w1, w2))
    return out


def rotated_layer_norm(r: np.ndarray, eps: float, rotated: bool, bf16: bool) -> np.ndarray:
    """Normalize rows of the residual stream (gamma/beta live in the weights).

    In the rotated domain only coordinate 0 carries the mean, so centring
    touches that coordinate alone.
    """
    if rotated:
        mean, var = fold_ln_stats_rotated(r)
    else:
        mean, var = r.mean(axis=-1), r.var(axis=-1)
    if bf16:
        mean = bf16_quantize(mean)
        rstd = bf16_quantize(1.0 / np.sqrt(bf16_quantize(var + eps)))
    else:
        rstd = 1.0 / np.sqrt(var + eps)
    n = r.copy()
    if rotated:
        n[:, 0] -= mean * np.sqrt(r.shape[-1])
    else:
        n -= mean[:, None]
    return n * rstd[:, None]


def bypass_config(method: Method | str = Method.VERSAQ, nonlinear: str = "bf16") -> ExecConfig:
    """No integer rounding anywhere (the infinite-bit-width sentinel)."""
    return ExecConfig(Method(method), None, None, False, nonlinear == "bf16")


def run_quantized(model: Model, x, mode: PrecisionMode | str = PrecisionMode.W4A8,
                  method: Method | str = Method.VERSAQ, *, config: ExecConfig | None = None,
                  reference: RunResult | None = None,
                  dct_variant: DctVariant | str = DctVariant.ORTHONORMAL) -> RunResult:
    """Quantized forward pass; ``config`` overrides ``mode``/``method`` when given."""
    spec = model.spec
    x = _check_input(model, x)
    ex = config or ExecConfig.for_mode(PrecisionMode(mode), Method(method))
    if reference is None:
        reference = run_reference(model, x)
    prepared = prepare_model(model, ex, dct_variant)
    cfg = spec.attention
    rot = ex.method.rotates
    r = apply_wht(x) if rot else x.copy()
    residuals, layer_metrics = [], []
    for lp, pw, ref in zip(model.layers, prepared, reference.residuals):
        n = rotated_layer_norm(r, lp.norm.eps, rot, ex.bf16_nonlinear)
        if lp.kind.is_attention:
            r = r + quantized_attention_block(n, pw, cfg, ex, frame_wise=lp.kind is LayerKind.FRAME)
        else:
            r = r + _mlp_block(n, pw, ex)
        plain = apply_wht(r) if rot else r.copy()
        residuals.append(plain)
        layer_metrics.append(quant_error(ref, plain))
    out = residuals[-1]
    return RunResult(out, quant_error(reference.output, out), layer_metrics, residuals)


def _mlp_block(n: np.ndarray, pw: tuple[PreparedWeight, PreparedWeight], ex: ExecConfig) -> np.ndarray:
    w1, w2 = pw
    hdn = qgemm(n, w1, ex)
    hdn = gelu_bf16(hdn) if ex.bf16_nonlinear else gelu(hdn)
    dc = None
    if ex.method.rotates:
        hdn = apply_wht(hdn)
        # GELU output has a positive per-token mean, which the WHT gathers
        # into coordinate 0; that coordinate skips the INT quantizer
        if ex.dc_passthrough and ex.act_bits is not None:
            dc = ex.round_bf16(hdn[:, 0])
    return qgemm(hdn, w2, ex, dc=dc)


def bitwidth_sweep(model: Model, x, fixed: str = "weight", bits=range(3, 9), *,
                   fixed_bits: int | None = 8, method: Method | str = Method.VERSAQ,
                   reference: RunResult | None = None, nonlinear: str = "bf16") -> list[dict]:
    """Metrics while one side's bit width varies and the other stays fixed.

    ``fixed="weight"`` holds weights at ``fixed_bits`` and sweeps activation
    bits; ``fixed="activation"`` does the reverse.  ``fixed_bits=None``
    leaves the fixed side unquantized.
    """
    if fixed not in ("weight", "activation"):
        raise ValueError("fixed must be 'weight' or 'activation'")
    bits = list(bits)
    if not bits or min(bits) < 3 or max(bits) > 8:
        raise ValueError("swept bit widths must lie in [3, 8]")
    method = Method(method)
    if reference is None:
        reference = run_reference(model, x)
    rows = []
    for b in bits:
        wb, ab = (fixed_bits, b) if fixed == "weight" else (b, fixed_bits)
        ex = ExecConfig(method, wb, ab, False, nonlinear == "bf16")
        res = run_quantized(model, x, config=ex, reference=reference)
        rows.append({"bits": b, "weight_bits": wb, "act_bits": ab, "method": method.value, **res.metrics})
    return rows


__all__ = [
    "LayerKind", "ModelSpec", "Model", "LayerParams", "RunResult", "init_model", "run_reference",
    "run_quantized", "prepare_model", "bitwidth_sweep", "bypass_config", "layer_norm", "gelu",
    "gelu_bf16", "rotated_layer_norm", "TileConfig",
]
