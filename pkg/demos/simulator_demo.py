"""Cycle breakdown of the default toy model across frame counts and modes."""

from orthoquant.accelsim import HardwareConfig, simulate_model
from orthoquant.numerics import PrecisionMode
from orthoquant.pipeline import ModelSpec

hw = HardwareConfig()
print(f"{'S':>3s} {'mode':5s} {'cycles':>12s} {'attn share':>10s} {'speedup':>8s}")
for S in (1, 2, 4, 8, 16):
    spec = ModelSpec().with_frames(S)
    base = simulate_model(spec, hw, PrecisionMode.BF16).total_cycles
    for mode in PrecisionMode:
        rep = simulate_model(spec, hw, mode)
        share = rep.breakdown["attention"] / rep.total_cycles
        print(f"{S:3d} {mode.value:5s} {rep.total_cycles:12d} {share:10.2f} {base / rep.total_cycles:8.2f}")
