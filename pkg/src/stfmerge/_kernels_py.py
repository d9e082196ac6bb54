"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def topk_magnitude_mask(flat, k):
    """Boolean mask selecting the ``k`` largest-magnitude entries of ``flat``.

    Ties at the threshold magnitude keep the lowest flat indices.
    """
    flat = np.ascontiguousarray(flat).ravel()
    n = flat.size
    if k <= 0 or n == 0:
        return np.zeros(n, dtype=bool)
    if k >= n:
        return np.ones(n, dtype=bool)
    mag = np.abs(flat.astype(np.float64, copy=False))
    thresh = np.partition(mag, n - k)[n - k]
    mask = mag > thresh
    need = k - int(np.count_nonzero(mask))
    if need > 0:
        mask[np.flatnonzero(mag == thresh)[:need]] = True
    return mask


def bf16_to_f32(raw):
    """Widen raw bfloat16 bit patterns (uint16) to float32. Exact."""
    raw = np.asarray(raw, dtype=np.uint16)
    return (raw.astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16(values):
    """Round float32 values to bfloat16 bit patterns, nearest-even."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    rounded = ((bits + np.uint32(0x7FFF) + ((bits >> 16) & np.uint32(1))) >> 16).astype(np.uint16)
    nan = ((bits & 0x7F800000) == 0x7F800000) & ((bits & 0x007FFFFF) != 0)
    if nan.any():
        rounded[nan] = ((bits[nan] >> 16) | 0x0040).astype(np.uint16)
    return rounded
