"""Toeplitz-hash privacy amplification over GF(2).

The m x n Toeplitz matrix is described by its first column and first row, i.e.
a seed of m + n - 1 bits with ``T[i, j] = seed[i - j + n - 1]``.  The product
``T @ x`` is then a slice of the full linear convolution ``seed * x``, which we
evaluate with an FFT and reduce mod 2.
"""

from __future__ import annotations

import numpy as np

from .errors import InsufficientMaterial, InvalidArgument

SAFETY_MARGIN_BITS = 64


def output_length_bytes(n_bits: int, leaked_bits: int) -> int:
    return (n_bits - leaked_bits - SAFETY_MARGIN_BITS) // 8


def toeplitz_seed(n: int, m: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=m + n - 1, dtype=np.uint8)


def toeplitz_multiply(seed_bits: np.ndarray, x: np.ndarray, m: int) -> np.ndarray:
    """Return ``T @ x mod 2`` for the Toeplitz matrix described by ``seed_bits``."""
    n = len(x)
    if len(seed_bits) != m + n - 1:
        raise InvalidArgument(f"seed must hold {m + n - 1} bits, got {len(seed_bits)}")
    if m == 0:
        return np.zeros(0, dtype=np.uint8)
    size = 1 << (len(seed_bits) + n - 1).bit_length()
    conv = np.fft.irfft(
        np.fft.rfft(seed_bits.astype(np.float64), size) * np.fft.rfft(x.astype(np.float64), size),
        size,
    )
    # Entries are integer counts <= n; rounding is exact well below 2**40.
    counts = np.rint(conv[n - 1 : n - 1 + m]).astype(np.int64)
    return (counts & 1).astype(np.uint8)


def privacy_amplify(bits, leaked_bits: int, seed: int) -> bytes:
    """Compress ``bits`` into ``floor((len(bits) - leaked_bits - 64) / 8)`` bytes."""
    x = np.asarray(bits, dtype=np.uint8)
    if leaked_bits < 0:
        raise InvalidArgument("leaked_bits must be non-negative")
    if len(x) <= leaked_bits + SAFETY_MARGIN_BITS:
        raise InsufficientMaterial(
            f"{len(x)} bits cannot cover {leaked_bits} leaked bits plus a "
            f"{SAFETY_MARGIN_BITS}-bit margin"
        )
    m = 8 * output_length_bytes(len(x), leaked_bits)
    out = toeplitz_multiply(toeplitz_seed(len(x), m, seed), x, m)
    return np.packbits(out).tobytes()
