import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from helpers import small_config
from rnnt.model import init_params, matrix_param_names
from rnnt.quant import (
    AsymQuantizedTensor,
    QuantizationError,
    QuantizedTensor,
    dequantize,
    max_inner_dim,
    pair_sums,
    payload_bytes,
    qmatvec,
    qmatvec_asym,
    qmatvec_int,
    qmatvec_oracle,
    quantize_asymmetric,
    quantize_model,
    quantize_symmetric,
    round_half_away,
)

reals = st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False, width=64)
tensors = arrays(np.float64, array_shapes(min_dims=1, max_dims=2, max_side=12), elements=reals)


def scalable(x):
    """False when ``x`` spans so little range that its int8 scale would overflow."""
    peak, spread = np.max(np.abs(x)), np.ptp(x)
    with np.errstate(over="ignore"):
        return (peak == 0 or np.isfinite(127 / peak)) and (spread == 0 or np.isfinite(255 / spread))


int8s = arrays(np.int8, st.integers(1, 64), elements=st.integers(-127, 127))


class TestSymmetric:
    def test_hand_example(self):
        q = quantize_symmetric([-0.5, 0.25, 0.5])
        assert q.theta == 254
        assert q.values.tolist() == [-127, 64, 127]
        np.testing.assert_allclose(dequantize(q), [-0.5, 64 / 254, 0.5], rtol=1e-7)

    def test_zero_input(self):
        q = quantize_symmetric(np.zeros(5))
        assert q.theta == 1 and not q.values.any()

    def test_rounding_is_half_away_from_zero(self):
        np.testing.assert_array_equal(round_half_away(np.array([-2.5, -0.5, 0.5, 1.5, 2.4])), [-3, -1, 1, 2, 2])

    def test_non_finite_rejected(self):
        with pytest.raises(QuantizationError):
            quantize_symmetric([1.0, np.nan])
        with pytest.raises(QuantizationError):
            quantize_asymmetric([np.inf])

    def test_tiny_range_rejected(self):
        with pytest.raises(QuantizationError, match="too small"):
            quantize_symmetric([2.2e-308])
        with pytest.raises(QuantizationError, match="too small"):
            quantize_asymmetric([0.0, 2.2e-308])

    def test_invalid_tensor_rejected(self):
        with pytest.raises(QuantizationError):
            QuantizedTensor(np.array([-128], np.int8), 1.0)
        with pytest.raises(QuantizationError):
            QuantizedTensor(np.array([1], np.int16), 1.0)
        with pytest.raises(QuantizationError):
            QuantizedTensor(np.array([1], np.int8), 0.0)

    def test_round_trip_bound_on_random_tensors(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            x = rng.normal(scale=rng.uniform(0.01, 10), size=rng.integers(1, 64))
            q = quantize_symmetric(x)
            assert np.max(np.abs(q.values / q.theta - x)) <= 0.5 / q.theta * (1 + 1e-12)

    @given(tensors)
    def test_round_trip_bound(self, x):
        assume(scalable(x))
        q = quantize_symmetric(x)
        assert np.all(np.abs(q.values / q.theta - x) <= 0.5 / q.theta * (1 + 1e-12))

    @given(tensors)
    def test_sign_symmetry(self, x):
        assume(scalable(x))
        np.testing.assert_array_equal(quantize_symmetric(-x).values, -quantize_symmetric(x).values)

    @given(tensors)
    def test_extremes_saturate_exactly(self, x):
        assume(scalable(x))
        q = quantize_symmetric(x)
        if np.any(x):
            assert np.max(np.abs(q.values)) == 127

    @given(arrays(np.int8, st.integers(1, 30), elements=st.integers(-127, 127)),
           st.floats(1e-3, 1e3))
    def test_requantizing_is_idempotent(self, values, theta):
        q = QuantizedTensor(values, theta)
        again = quantize_symmetric(dequantize(q).astype(np.float64))
        if np.max(np.abs(values)) == 127:
            np.testing.assert_array_equal(again.values, q.values)
            assert again.theta == pytest.approx(q.theta, rel=1e-6)
        np.testing.assert_array_equal(quantize_symmetric(again.dequantize()).values, again.values)

    def test_unit_theta_gives_integers(self):
        out = QuantizedTensor(np.array([-3, 0, 7], np.int8), 1.0).dequantize()
        np.testing.assert_array_equal(out, np.round(out))

    def test_row_access_and_size(self):
        q = quantize_symmetric(np.arange(6.0).reshape(2, 3))
        np.testing.assert_allclose(q[1], [3, 4, 5], atol=0.5 / q.theta)
        assert q.nbytes == 6 + 4 and (q.rows, q.cols) == (2, 3)


class TestAsymmetric:
    def test_unit_interval(self):
        x = np.random.default_rng(1).uniform(0, 1, size=1000)
        q = quantize_asymmetric(x)
        assert q.values.min() == -128 and q.values.max() == 127
        assert np.max(np.abs(q.dequantize(np.float64) - x)) <= 0.5 / q.scale * (1 + 1e-9)

    def test_error_comparable_to_symmetric(self):
        x = np.random.default_rng(2).normal(size=4096)
        err_sym = np.max(np.abs(quantize_symmetric(x).dequantize(np.float64) - x))
        err_asym = np.max(np.abs(quantize_asymmetric(x).dequantize(np.float64) - x))
        assert 0.5 <= err_asym / err_sym <= 2.0

    @pytest.mark.parametrize("value", [0.0, 3.0, -7.0, 200.0])
    def test_integer_constant_reconstructs_exactly(self, value):
        q = quantize_asymmetric(np.full(5, value))
        assert q.scale == 1.0 and not q.values.any()
        np.testing.assert_array_equal(q.dequantize(np.float64), value)

    @given(tensors)
    def test_values_within_int8(self, x):
        assume(scalable(x))
        q = quantize_asymmetric(x)
        assert q.values.dtype == np.int8 and q.scale > 0

    def test_matvec_subtracts_zero_points(self):
        rng = np.random.default_rng(3)
        W, v = rng.uniform(0, 2, size=(8, 16)), rng.uniform(-1, 3, size=16)
        qW, qv = quantize_asymmetric(W), quantize_asymmetric(v)
        np.testing.assert_allclose(qmatvec_asym(qW, qv), qW.dequantize(np.float64) @ qv.dequantize(np.float64),
                                   rtol=1e-9)
        assert isinstance(qW, AsymQuantizedTensor) and qW.nbytes == 128 + 8


class TestMatvec:
    def test_matches_wide_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            W = rng.integers(-127, 128, size=(64, 64)).astype(np.int8)
            v = rng.integers(-127, 128, size=64).astype(np.int8)
            np.testing.assert_array_equal(qmatvec_int(W, v), qmatvec_oracle(W, v))

    def test_worst_case_accumulation(self):
        n = 4096
        W = np.full((2, n), 127, np.int8)
        W[1] = -127
        v = np.full(n, 127, np.int8)
        np.testing.assert_array_equal(qmatvec_int(W, v), [n * 127 * 127, -n * 127 * 127])

    @settings(max_examples=50)
    @given(int8s, st.randoms(use_true_random=False))
    def test_accumulation_order_does_not_matter(self, v, rnd):
        W = np.array([v, v[::-1]])
        perm = list(range(len(v)))
        rnd.shuffle(perm)
        np.testing.assert_array_equal(qmatvec_int(W, v), qmatvec_int(W[:, perm], v[perm]))

    @given(int8s, int8s)
    def test_pair_sums_fit_sixteen_bits(self, a, b):
        n = min(len(a), len(b))
        sums = pair_sums(a[:n], b[:n])
        assert np.all(np.abs(sums) <= 2 * 127 * 127) and np.all(np.abs(sums) < 2 ** 15)

    def test_overflow_guard(self):
        limit = max_inner_dim()
        assert limit == 133_144
        assert limit * 127 * 127 < 2 ** 31 <= (limit + 1) * 127 * 127
        with pytest.raises(QuantizationError, match="overflow"):
            qmatvec_int(np.zeros((1, limit + 1), np.int8), np.zeros(limit + 1, np.int8))

    def test_dimension_mismatch(self):
        with pytest.raises(QuantizationError):
            qmatvec_int(np.zeros((2, 3), np.int8), np.zeros(4, np.int8))
        with pytest.raises(QuantizationError):
            quantize_symmetric(np.eye(3)) @ np.zeros(2)

    def test_identity_recovers_vector(self):
        v = np.random.default_rng(5).normal(size=32)
        qv = quantize_symmetric(v)
        out = qmatvec(quantize_symmetric(np.eye(32) * 0.5), qv) * 2
        assert np.max(np.abs(out - v)) <= 0.5 / qv.theta * (1 + 1e-9)

    def test_matmul_operator_close_to_float(self):
        rng = np.random.default_rng(6)
        W, x = rng.normal(size=(40, 24)), rng.normal(size=24)
        q = quantize_symmetric(W)
        out = q @ x.astype(np.float32)
        ref = W @ x
        assert out.dtype == np.float32
        assert np.max(np.abs(out - ref)) < 0.05 * np.max(np.abs(ref))
        np.testing.assert_allclose(q @ np.stack([x, 2 * x], axis=1), np.stack([out, q @ (2 * x)], axis=1),
                                   rtol=1e-6)


class TestModelQuantization:
    @pytest.mark.parametrize("scheme", ["sym", "asym"])
    def test_payload_ratio(self, scheme):
        config = small_config()
        params = init_params(config)
        names = matrix_param_names(config)
        quantized = quantize_model(params, names, scheme)
        assert payload_bytes(quantized, names) / payload_bytes(params, names) < 0.5
        assert all(not isinstance(quantized[k], np.ndarray) for k in names)
        assert all(quantized[k].dtype == np.float32 for k in set(params) - set(names))

    def test_unknown_scheme_or_name(self):
        params = init_params(small_config())
        with pytest.raises(QuantizationError):
            quantize_model(params, [], "int4")
        with pytest.raises(QuantizationError):
            quantize_model(params, ["nope"], "sym")
