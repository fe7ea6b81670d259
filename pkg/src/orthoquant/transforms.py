"""Walsh-Hadamard and DCT machinery.

Conventions: a transform of a row vector ``x`` is ``x @ M.T`` where ``M``
holds one basis function per row.  The normalized Sylvester Hadamard matrix
is symmetric, so ``apply_wht`` is simply ``x @ H`` and is its own inverse.
"""

from __future__ import annotations

import enum
from functools import lru_cache

import numpy as np


class DctVariant(enum.Enum):
    ORTHONORMAL = "orthonormal"
    INTEGER = "integer"


INTEGER_DCT_SIZES = (4, 8, 16, 32)

# Integer approximations of 64*sqrt(2)*cos(m*pi/64) used by the HEVC core
# transform, indexed by m = 0..32 (m = 0 is only used by the DC row).
_HEVC_COS = np.array([
    64, 90, 90, 90, 89, 88, 87, 85, 83, 82, 80, 78, 75, 73, 70, 67,
    64, 61, 57, 54, 50, 46, 43, 38, 36, 31, 25, 22, 18, 13, 9, 4, 0,
], dtype=np.int64)


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_pow2(n: int, what: str = "order") -> None:
    if not is_pow2(int(n)):
        raise ValueError(f"{what} must be a power of two, got {n}")


@lru_cache(maxsize=None)
def _hadamard_cached(order: int) -> np.ndarray:
    h2 = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)
    h = np.ones((1, 1))
    while h.shape[0] < order:
        h = np.kron(h2, h)
    h.setflags(write=False)
    return h


def hadamard_matrix(order: int) -> np.ndarray:
    """Normalized Sylvester Hadamard matrix, built as H_2 (x) H_{n/2}."""
    _check_pow2(order)
    return _hadamard_cached(int(order))


def apply_wht(x, axis: int = -1) -> np.ndarray:
    """Fast normalized WHT along ``axis`` (in-place radix-2 butterflies).

    For rank-2 input and ``axis=-1`` this equals ``x @ hadamard_matrix(n)``.
    """
    x = np.ascontiguousarray(np.moveaxis(np.array(x, dtype=np.float64, copy=True), axis, -1))
    n = x.shape[-1]
    _check_pow2(n, "transformed dimension")
    lead = x.shape[:-1]
    h = 1
    while h < n:
        v = x.reshape(*lead, n // (2 * h), 2, h)
        a = v[..., 0, :].copy()
        v[..., 0, :] += v[..., 1, :]
        v[..., 1, :] = a - v[..., 1, :]
        h *= 2
    x *= 1.0 / np.sqrt(n)
    return np.moveaxis(x, -1, axis)


def apply_block_wht(x, block: int, axis: int = -1) -> np.ndarray:
    """Independent order-``block`` WHTs on consecutive groups along ``axis``."""
    _check_pow2(block)
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    n = x.shape[-1]
    if n % block:
        raise ValueError(f"{n} is not a multiple of block {block}")
    y = apply_wht(x.reshape(*x.shape[:-1], n // block, block)).reshape(x.shape)
    return np.moveaxis(y, -1, axis)


def block_hadamard(total: int, block: int) -> np.ndarray:
    """Block-diagonal matrix of order-``block`` Hadamards (per-head rotation)."""
    _check_pow2(block)
    if total % block:
        raise ValueError(f"{total} is not a multiple of block {block}")
    return np.kron(np.eye(total // block), hadamard_matrix(block))


def _orthonormal_dct(order: int) -> np.ndarray:
    k = np.arange(order)[:, None]
    n = np.arange(order)[None, :]
    m = np.cos(np.pi * (2 * n + 1) * k / (2 * order)) * np.sqrt(2.0 / order)
    m[0, :] = 1.0 / np.sqrt(order)
    return m


def _hevc_entry(k: int, n: int) -> int:
    theta = ((2 * n + 1) * k) % 128
    if theta > 64:
        theta = 128 - theta
    if theta <= 32:
        return int(_HEVC_COS[theta])
    return -int(_HEVC_COS[64 - theta])


def hevc_matrix(order: int) -> np.ndarray:
    """Integer HEVC/H.265 core-transform matrix (rows are basis functions)."""
    if order not in INTEGER_DCT_SIZES:
        raise ValueError(f"integer DCT supports orders {INTEGER_DCT_SIZES}, got {order}")
    step = 32 // order
    m = np.empty((order, order), dtype=np.int64)
    for k in range(order):
        for n in range(order):
            m[k, n] = 64 if k == 0 else _hevc_entry(k * step, n)
    return m


def integer_dct_scale(order: int) -> float:
    """Nominal Gram scalar c with T T^T ~= c I (64^2 * order)."""
    return 4096.0 * order


@lru_cache(maxsize=None)
def _dct_cached(order: int, variant: DctVariant) -> np.ndarray:
    if variant is DctVariant.ORTHONORMAL:
        m = _orthonormal_dct(order)
    else:
        m = hevc_matrix(order).astype(np.float64)
    m.setflags(write=False)
    return m


def dct_matrix(order: int, variant: DctVariant | str = DctVariant.ORTHONORMAL) -> np.ndarray:
    """DCT-II basis matrix.  ``INTEGER`` returns the raw HEVC integers."""
    variant = DctVariant(variant)
    if order < 1:
        raise ValueError("order must be >= 1")
    if variant is DctVariant.INTEGER and order not in INTEGER_DCT_SIZES:
        raise ValueError(f"integer DCT supports orders {INTEGER_DCT_SIZES}, got {order}")
    return _dct_cached(int(order), variant)


@lru_cache(maxsize=None)
def _integer_forward(order: int) -> np.ndarray:
    # exact inverse of the on-chip inverse y -> y @ T / c, transposed for x @ F
    t = hevc_matrix(order).astype(np.float64)
    f = np.linalg.inv(t / integer_dct_scale(order))
    f.setflags(write=False)
    return f


def dct_operators(order: int, variant: DctVariant | str = DctVariant.ORTHONORMAL) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(forward, inverse)`` right-multiplication operators.

    ``x @ forward`` is the DCT of each row and ``y @ inverse`` undoes it.
    For ``INTEGER`` the inverse is the on-chip matrix ``T / c`` (integer
    entries, scalar compensation) and the forward operator is its exact
    inverse, which is what offline weight preparation multiplies in.
    """
    variant = DctVariant(variant)
    m = dct_matrix(order, variant)
    if variant is DctVariant.ORTHONORMAL:
        return m.T, m
    return _integer_forward(order), m / integer_dct_scale(order)


def block_dct_operators(total: int, block: int, variant: DctVariant | str = DctVariant.ORTHONORMAL):
    """Block-diagonal DCT operators of size ``total`` built from ``block``-point transforms."""
    if total % block:
        raise ValueError(f"{total} is not a multiple of DCT block {block}")
    fwd, inv = dct_operators(block, variant)
    eye = np.eye(total // block)
    return np.kron(eye, fwd), np.kron(eye, inv)


def apply_block_operator(x, op: np.ndarray, axis: int = -1) -> np.ndarray:
    """Right-multiply every consecutive ``op``-sized group along ``axis`` by ``op``."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    n = x.shape[-1]
    b = op.shape[0]
    if n % b:
        raise ValueError(f"dimension {n} is not a multiple of transform size {b}")
    y = (x.reshape(*x.shape[:-1], n // b, b) @ op).reshape(x.shape)
    return np.moveaxis(y, -1, axis)


def apply_dct(x, axis: int = -1, block: int | None = None,
              variant: DctVariant | str = DctVariant.ORTHONORMAL) -> np.ndarray:
    """DCT along ``axis``; ``block`` applies a block-diagonal transform."""
    x = np.asarray(x, dtype=np.float64)
    order = x.shape[axis] if block is None else block
    fwd, _ = dct_operators(order, variant)
    return apply_block_operator(x, fwd, axis)


def apply_idct(y, axis: int = -1, block: int | None = None,
               variant: DctVariant | str = DctVariant.ORTHONORMAL) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    order = y.shape[axis] if block is None else block
    _, inv = dct_operators(order, variant)
    return apply_block_operator(y, inv, axis)

