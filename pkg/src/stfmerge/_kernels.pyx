# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for magnitude trimming and bfloat16 conversion.

Same contracts as ``stfmerge._kernels_py``; ``stfmerge.kernels`` picks one
at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memset
from libc.stdint cimport uint16_t, uint32_t, uint64_t

cnp.import_array()

ctypedef fused real_t:
    float
    double


cdef inline uint64_t _key(real_t x) noexcept nogil:
    # Magnitude as an unsigned integer: with the sign bit cleared, IEEE bit
    # patterns of non-negative floats sort like the floats themselves.
    if real_t is float:
        return (<uint32_t*>&x)[0] & 0x7FFFFFFFu
    else:
        return (<uint64_t*>&x)[0] & 0x7FFFFFFFFFFFFFFFu


cdef inline uint32_t _coarse(real_t x) noexcept nogil:
    # Top 11 magnitude bits of x rounded to float32. Rounding is monotone, so
    # a larger coarse digit always means a larger magnitude.
    cdef float f = <float>x
    return ((<uint32_t*>&f)[0] & 0x7FFFFFFFu) >> 20


DEF RADIX_BITS = 11
DEF RADIX_SIZE = 2048


cdef inline int _walk(Py_ssize_t* hist, Py_ssize_t* above, Py_ssize_t k) noexcept nogil:
    # highest digit whose bucket holds the k-th largest key
    cdef int digit = RADIX_SIZE - 1
    while above[0] + hist[digit] < k:
        above[0] += hist[digit]
        digit -= 1
    return digit


def _topk_mask(real_t[::1] flat, Py_ssize_t k):
    cdef Py_ssize_t n = flat.shape[0]
    cdef Py_ssize_t i, j, m, above = 0
    cdef int shift, hi_shift, digit, top, d
    cdef uint32_t c
    cdef Py_ssize_t hist[RADIX_SIZE]
    cdef Py_ssize_t sub[4][RADIX_SIZE]
    mask_arr = np.zeros(n, dtype=np.bool_)
    if k <= 0 or n == 0:
        return mask_arr
    if k >= n:
        mask_arr[:] = True
        return mask_arr
    cdef const real_t* src = &flat[0]
    cdef cnp.npy_bool* out = <cnp.npy_bool*>cnp.PyArray_DATA(mask_arr)
    # Radix select on magnitudes. Pass 1 buckets every entry by a coarse
    # digit; later passes refine only the bucket holding the k-th largest.
    with nogil:
        # four interleaved histograms so clustered keys do not serialize
        memset(sub, 0, sizeof(sub))
        for i in range(0, n - 3, 4):
            sub[0][_coarse(src[i])] += 1
            sub[1][_coarse(src[i + 1])] += 1
            sub[2][_coarse(src[i + 2])] += 1
            sub[3][_coarse(src[i + 3])] += 1
        for i in range(n - n % 4, n):
            sub[0][_coarse(src[i])] += 1
        for digit in range(RADIX_SIZE):
            hist[digit] = sub[0][digit] + sub[1][digit] + sub[2][digit] + sub[3][digit]
        top = _walk(hist, &above, k)
        m = hist[top]
    # entries above the bucket are in, entries below are out; the bucket is
    # gathered in index order so threshold ties resolve to the lowest index
    cand_arr = np.empty(m, dtype=np.uint64)
    idx_arr = np.empty(m, dtype=np.intp)
    cdef uint64_t* cand = <uint64_t*>cnp.PyArray_DATA(cand_arr)
    cdef Py_ssize_t* idx = <Py_ssize_t*>cnp.PyArray_DATA(idx_arr)
    with nogil:
        m = 0
        for i in range(n):
            c = _coarse(src[i])
            out[i] = c > <uint32_t>top
            if c == <uint32_t>top:
                cand[m] = _key(src[i])
                idx[m] = i
                m += 1
        # float32 keys already agree on the coarse bits; float64 keys do not
        hi_shift = 20 if real_t is float else 63
        while hi_shift > 0:
            shift = hi_shift - RADIX_BITS if hi_shift > RADIX_BITS else 0
            memset(hist, 0, sizeof(hist))
            for i in range(m):
                hist[(cand[i] >> shift) & (RADIX_SIZE - 1)] += 1
            digit = _walk(hist, &above, k)
            j = 0
            for i in range(m):
                d = (cand[i] >> shift) & (RADIX_SIZE - 1)
                if d > digit:
                    out[idx[i]] = 1
                elif d == digit:
                    cand[j] = cand[i]
                    idx[j] = idx[i]
                    j += 1
            m = j
            hi_shift = shift
        # every survivor equals the threshold; take the lowest indices
        for i in range(k - above):
            out[idx[i]] = 1
    return mask_arr


def topk_magnitude_mask(flat, Py_ssize_t k):
    """Boolean mask selecting the ``k`` largest-magnitude entries of ``flat``.

    Ties at the threshold magnitude keep the lowest flat indices.
    """
    arr = np.ascontiguousarray(flat).ravel()
    if arr.dtype != np.float32:
        arr = arr.astype(np.float64, copy=False)
    return _topk_mask(arr, k)


def bf16_to_f32(raw):
    """Widen raw bfloat16 bit patterns (uint16) to float32. Exact."""
    cdef const uint16_t[::1] src = np.ascontiguousarray(raw, dtype=np.uint16).ravel()
    cdef Py_ssize_t n = src.shape[0], i
    out = np.empty(n, dtype=np.uint32)
    cdef uint32_t[::1] dst = out
    with nogil:
        for i in range(n):
            dst[i] = (<uint32_t>src[i]) << 16
    return out.view(np.float32).reshape(np.shape(raw))


def f32_to_bf16(values):
    """Round float32 values to bfloat16 bit patterns, nearest-even."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    cdef const uint32_t[::1] src = arr.ravel().view(np.uint32)
    cdef Py_ssize_t n = src.shape[0], i
    cdef uint32_t bits
    out = np.empty(n, dtype=np.uint16)
    cdef uint16_t[::1] dst = out
    with nogil:
        for i in range(n):
            bits = src[i]
            if (bits & 0x7F800000u) == 0x7F800000u and (bits & 0x007FFFFFu) != 0:
                dst[i] = <uint16_t>((bits >> 16) | 0x0040u)  # quiet NaN
            else:
                dst[i] = <uint16_t>((bits + 0x7FFFu + ((bits >> 16) & 1u)) >> 16)
    return out.reshape(arr.shape)
