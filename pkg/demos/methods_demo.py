"""RTN vs WHT-only vs VersaQ on the toy model for each input family."""

from orthoquant.pipeline import ModelSpec, init_model, run_quantized, run_reference
from orthoquant.quant import Method, synth_activations

spec = ModelSpec(S=2, P=64, C=256, h=4)
print(f"{'input':10s} {'mode':5s} " + " ".join(f"{m.value:>8s}" for m in Method))
for kind in ("gaussian", "spiky", "saturated"):
    model = init_model(spec, seed=1)
    x = synth_activations(kind, spec.tokens, spec.C, seed=1)
    ref = run_reference(model, x)
    for mode in ("w4a8", "w4a4"):
        cos = [run_quantized(model, x, mode, m, reference=ref).metrics["cosine"] for m in Method]
        print(f"{kind:10s} {mode:5s} " + " ".join(f"{c:8.4f}" for c in cos))
