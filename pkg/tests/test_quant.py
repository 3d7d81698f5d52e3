import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quantnet.quant import (
    AccumulatorOverflow,
    QuantParams,
    QuantTensor,
    compute_qfactor,
    dequantize,
    qadd,
    qmul_accumulate,
    quantize,
    round_half_to_even,
)

import oracle


def qt(values, factor, precision):
    return QuantTensor(np.asarray(values, dtype=np.int64), QuantParams(factor, precision))


@pytest.mark.parametrize(
    "value,expected",
    [(0.5, 0), (1.5, 2), (-2.5, -2), (1.4999, 1), (2.5, 2), (-0.5, 0), (3.0, 3)],
)
def test_round_half_to_even(value, expected):
    assert round_half_to_even(value) == expected


def test_round_ties_balance():
    # Banker's rounding sends exactly half of the half-integer ties downward.
    down = up = 0
    for k in range(-1000, 1000):
        z = round_half_to_even(k + 0.5)
        assert z in (k, k + 1)
        if z == k:
            down += 1
        else:
            up += 1
    assert down == up == 1000


class TestQuantize:
    def test_unit_range(self):
        z = quantize(np.array([1.0]), 1 / 255, 8)
        assert z.data.tolist() == [255]
        assert z.factor == 1 / 255

    def test_zeros(self):
        z = quantize(np.array([0.0, -0.0]), 0.123, 7)
        assert z.data.tolist() == [0, 0]

    def test_clamp_high(self):
        assert quantize(np.array([1000.0]), 1.0, 7).data.tolist() == [127]

    def test_clamp_low(self):
        assert quantize(np.array([-1000.0]), 1.0, 7).data.tolist() == [-128]

    def test_nonpositive_factor_rejected(self):
        with pytest.raises(ValueError):
            quantize(np.array([1.0]), 0.0, 8)
        with pytest.raises(ValueError):
            quantize(np.array([1.0]), -0.5, 8)


class TestDequantize:
    def test_inverse_of_unit_range(self):
        assert dequantize(qt([255], 1 / 255, 8)).tolist() == [1.0]

    def test_zeros(self):
        assert dequantize(qt([0, 0, 0], 0.37, 8)).tolist() == [0.0, 0.0, 0.0]

    def test_negative(self):
        assert dequantize(qt([-128], 0.5, 7)).tolist() == [-64.0]


class TestQadd:
    def test_additive_identity(self):
        out = qadd(qt([10], 1.0, 8), qt([0], 1.0, 8), 8)
        assert out.data.tolist() == [10] and out.factor == 1.0

    def test_mixed_factors(self):
        out = qadd(qt([4], 0.5, 8), qt([2], 1.0, 8), 8)
        assert out.data.tolist() == [4] and out.factor == 1.0

    def test_saturates(self):
        out = qadd(qt([200], 1.0, 8), qt([200], 1.0, 8), 8)
        assert out.data.tolist() == [255]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            qadd(qt([1, 2], 1.0, 8), qt([1], 1.0, 8), 8)


class TestQmulAccumulate:
    def test_scalar_product(self):
        out = qmul_accumulate(qt([[1]], 2.0, 7), qt([[3]], 0.5, 8))
        assert out.data.tolist() == [[3]] and out.factor == 1.0 and out.precision == 31

    def test_identity_contraction(self):
        z = np.array([[5], [-7], [31]])
        out = qmul_accumulate(qt(np.eye(3, dtype=np.int64), 1.0, 7), qt(z, 0.25, 8))
        assert np.array_equal(out.data, z) and out.factor == 0.25

    def test_extreme_magnitudes_fit(self):
        out = qmul_accumulate(qt([[127]], 1.0, 7), qt([[255]], 1.0, 8))
        assert out.data.tolist() == [[32385]]

    def test_overflow_detected(self):
        n = 70000  # 70000 * 127 * 255 ~ 2.27e9 > 2^31 - 1
        w = qt(np.full((1, n), 127), 1.0, 7)
        x = qt(np.full((n, 1), 255), 1.0, 8)
        with pytest.raises(AccumulatorOverflow):
            qmul_accumulate(w, x)


@pytest.mark.parametrize("max_abs,p,expected", [(255, 8, 1.0), (127, 7, 1.0), (0, 8, 1.0)])
def test_compute_qfactor(max_abs, p, expected):
    assert compute_qfactor(max_abs, p) == expected


def test_compute_qfactor_general():
    assert compute_qfactor(2.55, 8) == pytest.approx(0.01)
    assert compute_qfactor(1.27, 7) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        compute_qfactor(-1.0, 8)


# --- properties -------------------------------------------------------------

factors = st.floats(min_value=1e-4, max_value=1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, derandomize=True)
@given(factors, st.sampled_from([7, 8, 31]), st.integers(0, 2**31))
def test_range_invariant(q, p, seed):
    rng = np.random.default_rng(seed)
    r = rng.uniform(-1e6, 1e6, 16)
    z = quantize(r, q, p)
    assert z.data.min() >= -(1 << p) and z.data.max() <= (1 << p) - 1


@settings(max_examples=200, derandomize=True)
@given(factors, st.sampled_from([7, 8, 31]), st.integers(0, 2**31))
def test_round_trip_bound(q, p, seed):
    rng = np.random.default_rng(seed)
    limit = q * ((1 << p) - 1)
    r = rng.uniform(-limit, limit, 32)
    err = np.abs(dequantize(quantize(r, q, p)) - r)
    assert np.all(err <= q / 2)


@settings(max_examples=200, derandomize=True)
@given(factors, st.sampled_from([7, 8, 31]), st.integers(0, 2**31))
def test_quantize_dequantize_idempotent(q, p, seed):
    rng = np.random.default_rng(seed)
    z = rng.integers(-(1 << p), (1 << p), 16)
    original = qt(z, q, p)
    again = quantize(dequantize(original), q, p)
    assert np.array_equal(again.data, original.data)
    assert again.params == original.params


@settings(max_examples=100, derandomize=True)
@given(factors, factors)
def test_factor_propagation(qa, qb):
    w = qt([[2, -1], [0, 3]], qa, 7)
    x = qt([[1], [4]], qb, 8)
    assert qmul_accumulate(w, x).factor == qa * qb
    a = qt([[1, 2]], qa, 8)
    b = qt([[3, 4]], qb, 8)
    assert qadd(a, b, 8).factor == max(qa, qb)


def test_matches_exact_oracle_sample():
    # Spot check against the rational oracle; the acceptance suite runs 1000.
    rng = np.random.default_rng(7)
    for _ in range(50):
        q = float(rng.uniform(0.001, 2.0))
        p = int(rng.choice([7, 8]))
        r = rng.uniform(-300, 300, 8)
        z = quantize(r, q, p)
        assert np.array_equal(z.data, oracle.quantize_exact(r, q, p))
