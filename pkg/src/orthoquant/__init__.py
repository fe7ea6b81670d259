"""Orthogonal-transform quantization toolkit and accelerator model.

Submodules: ``numerics`` (BF16 and quantized-tensor primitives),
``transforms`` (WHT/DCT), ``quant`` (weight preparation), ``attention``
(tiled attention), ``pipeline`` (toy model), ``accelsim`` (cycle and energy
model) and ``cli``.
"""

__version__ = "0.1.0"
