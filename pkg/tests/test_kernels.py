import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stfmerge import _kernels_py, kernels


def brute_topk(flat, k):
    # stable sort on -|x| keeps lower indices first among equal magnitudes
    order = sorted(range(len(flat)), key=lambda i: (-abs(float(flat[i])), i))
    mask = np.zeros(len(flat), dtype=bool)
    mask[order[:k]] = True
    return mask


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize(
    "values, k, expected",
    [
        ([1, -3, 2, 0.5, 5], 1, [0, 0, 0, 0, 1]),
        ([2, -2, 1], 1, [1, 0, 0]),
        ([-2, 2, 1], 1, [1, 0, 0]),
        ([0, 0, 0], 2, [1, 1, 0]),
        ([1, 2, 3], 0, [0, 0, 0]),
        ([1, 2, 3], 3, [1, 1, 1]),
        ([1, 2, 3], 7, [1, 1, 1]),
    ],
)
def test_topk_fixed_cases(backend, values, k, expected):
    for dtype in (np.float32, np.float64):
        mask = backend.topk_magnitude_mask(np.array(values, dtype=dtype), k)
        assert mask.tolist() == [bool(e) for e in expected]


def test_topk_empty(backend):
    assert backend.topk_magnitude_mask(np.zeros(0), 3).shape == (0,)


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float32, st.integers(1, 60), elements=st.sampled_from([0.0, -0.0, 1.0, -1.0, 2.5, -2.5, 3.0, 1e-3])),
    st.integers(0, 70),
)
def test_topk_matches_brute_force_with_ties(flat, k):
    expected = brute_topk(flat, k)
    assert (_kernels_py.topk_magnitude_mask(flat, k) == expected).all()
    assert (kernels.topk_magnitude_mask(flat, k) == expected).all()


@settings(max_examples=200, deadline=None)
@given(
    st.sampled_from([np.float32, np.float64]).flatmap(
        lambda dt: arrays(
            dt,
            st.integers(1, 80),
            elements=st.floats(allow_nan=False, allow_infinity=True, width=32 if dt is np.float32 else 64),
        )
    ),
    st.integers(0, 90),
)
def test_topk_full_range_magnitudes(flat, k):
    # subnormals, huge exponents and infinities all order correctly by bit pattern
    expected = brute_topk(flat, k)
    assert (kernels.topk_magnitude_mask(flat, k) == expected).all()
    assert (_kernels_py.topk_magnitude_mask(flat, k) == expected).all()


def test_backends_agree_large(rng):
    x = rng.standard_normal(200_003)
    x[::7] = np.round(x[::7], 1)  # many ties
    for k in (1, 17, 100_000, 200_002):
        a = _kernels_py.topk_magnitude_mask(x, k)
        b = kernels.topk_magnitude_mask(x, k)
        assert (a == b).all() and a.sum() == k


def test_bf16_widening_exact(backend):
    raw = np.arange(0, 2**16, 1, dtype=np.uint16)
    wide = backend.bf16_to_f32(raw)
    assert (wide.view(np.uint32) >> 16 == raw).all()
    assert (wide.view(np.uint32) & 0xFFFF == 0).all()


def test_bf16_round_trip_and_rounding(backend, rng):
    raw = rng.integers(0, 2**16, size=5000, dtype=np.uint16)
    finite = np.isfinite(_kernels_py.bf16_to_f32(raw))
    raw = raw[finite]
    assert (backend.f32_to_bf16(backend.bf16_to_f32(raw)) == raw).all()
    # 1 + 2^-8 lies exactly halfway between bf16 neighbours 1 and 1 + 2^-7: ties to even -> 1
    half = np.array([1 + 2**-8, 1 + 3 * 2**-8], dtype=np.float32)
    assert backend.bf16_to_f32(backend.f32_to_bf16(half)).tolist() == [1.0, 1 + 2**-6]


def test_bf16_backends_agree(rng):
    x = (rng.standard_normal(10_000) * 10 ** rng.uniform(-8, 8, 10_000)).astype(np.float32)
    x[:3] = [np.nan, np.inf, -np.inf]
    a = _kernels_py.f32_to_bf16(x)
    b = kernels.f32_to_bf16(x)
    assert (a == b).all()
