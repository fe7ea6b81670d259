"""Outlier spreading with the fast WHT and DCT energy compaction."""

import numpy as np

from orthoquant.quant import rtn_quantize, dequantize
from orthoquant.transforms import apply_dct, apply_idct, apply_wht, dct_matrix

rng = np.random.default_rng(0)

# one channel carries a 40x spike
x = rng.standard_normal((1, 256))
x[0, 17] = 40.0
r = apply_wht(x)
print(f"max |x| = {np.abs(x).max():6.2f}   max |Hx| = {np.abs(r).max():6.2f}")

for name, v, back in (("plain", x, lambda y: y), ("rotated", r, apply_wht)):
    err = np.abs(back(dequantize(rtn_quantize(v, 4))) - x).mean()
    print(f"4-bit RTN mean abs error, {name:8s}: {err:.4f}")

# smooth rows put most energy into the first DCT coefficients
t = np.linspace(0, 1, 64)
smooth = np.cos(2 * np.pi * t) + 0.3 * t
c = apply_dct(smooth)
print("fraction of energy in first 4 DCT coefficients:",
      round(float((c[:4] ** 2).sum() / (c ** 2).sum()), 4))
print("orthonormal round trip error:", np.abs(apply_idct(c) - smooth).max())
print("integer DCT (order 8) round trip error:",
      np.abs(apply_idct(apply_dct(smooth, block=8, variant="integer"), block=8, variant="integer") - smooth).max())
print("DCT order 4 is orthogonal:", np.allclose(dct_matrix(4) @ dct_matrix(4).T, np.eye(4)))
