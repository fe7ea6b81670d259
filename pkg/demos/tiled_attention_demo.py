"""Tiled attention with streaming softmax statistics against the dense reference."""

import numpy as np

from orthoquant.attention import AttentionTrace, TileConfig, attention_core, tiled_attention

rng = np.random.default_rng(0)
for L in (64, 1030, 4096):
    q, k, v = (rng.standard_normal((L, 64)) for _ in range(3))
    tr = AttentionTrace()
    out = tiled_attention(q, k, v, TileConfig(64, 64, 2048), trace=tr)
    err = np.abs(out - attention_core(q, k, v, 1 / 8)).max()
    print(f"L={L:5d}  max err {err:.1e}  peak score entries {tr.peak_score_entries}"
          f"  (dense would hold {L * L})")
