"""Activation bit-width sweep with 8-bit weights on saturated inputs."""

from orthoquant.pipeline import ModelSpec, bitwidth_sweep, init_model, run_reference
from orthoquant.quant import synth_activations

spec = ModelSpec(S=2, P=32, C=128, h=4)
model = init_model(spec, seed=0)
x = synth_activations("saturated", spec.tokens, spec.C, seed=0)
ref = run_reference(model, x)
for method in ("rtn", "versaq"):
    rows = bitwidth_sweep(model, x, "weight", range(3, 9), method=method, reference=ref)
    print(method, " ".join(f"A{r['bits']}:{r['cosine']:.4f}" for r in rows))
