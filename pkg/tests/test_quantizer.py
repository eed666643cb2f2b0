import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qspca.quantizer import (
    IDENTITY,
    SCALE_EPS,
    SIGNED,
    UNSIGNED,
    QuantConfig,
    fit_minmax_scales,
    quantize,
    round_half_away,
    ste_gradient_mask,
    to_fp16_scales,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestRounding:
    def test_ties_away_from_zero(self):
        np.testing.assert_array_equal(round_half_away([0.5, 1.5, 2.5, -0.5, -2.5, 0.49]), [1, 2, 3, -1, -3, 0])


class TestQuantize:
    def test_unsigned_clamps(self):
        cfg = QuantConfig(2, UNSIGNED)
        q = quantize(np.array([[3.4, -1.0]]), [1.0, 1.0], cfg)
        np.testing.assert_array_equal(q.codes, [[3, 0]])

    def test_signed_range(self):
        cfg = QuantConfig(3, SIGNED)
        q = quantize(np.array([[-9.0], [9.0], [0.6]]), [1.0], cfg)
        np.testing.assert_array_equal(q.codes[:, 0], [-4, 3, 1])

    def test_per_row_scales(self):
        cfg = QuantConfig(4, SIGNED, "per_row")
        M = np.array([[1.0, 2.0], [10.0, 20.0]])
        q = quantize(M, [1.0, 10.0], cfg)
        np.testing.assert_array_equal(q.codes, [[1, 2], [1, 2]])
        np.testing.assert_array_equal(q.dequant, M)

    def test_identity_is_pass_through(self, rng):
        M = rng.standard_normal((3, 4))
        q = quantize(M, np.ones(4), QuantConfig(mode=IDENTITY))
        np.testing.assert_array_equal(q.dequant, M)

    def test_rejects_bad_scales(self):
        with pytest.raises(ValueError):
            quantize(np.ones((2, 2)), [1.0, 0.0], QuantConfig())
        with pytest.raises(ValueError):
            quantize(np.ones((2, 2)), [1.0], QuantConfig())

    @pytest.mark.parametrize("bits", [1, 9])
    def test_bit_range(self, bits):
        with pytest.raises(ValueError):
            QuantConfig(bits)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=finite), st.integers(2, 8), st.sampled_from([SIGNED, UNSIGNED]))
    def test_codes_within_range(self, M, bits, mode):
        cfg = QuantConfig(bits, mode)
        q = quantize(M, fit_minmax_scales(M, cfg), cfg)
        lo, hi = cfg.code_range
        assert q.codes.min() >= lo and q.codes.max() <= hi

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (5, 2), elements=finite), st.integers(2, 8))
    def test_signed_error_at_most_half_step(self, M, bits):
        cfg = QuantConfig(bits, SIGNED)
        s = fit_minmax_scales(M, cfg)
        err = np.abs(quantize(M, s, cfg).dequant - M)
        assert np.all(err <= s[None, :] / 2 * (1 + 1e-12) + 1e-300)


class TestScales:
    def test_unsigned_minmax(self):
        s = fit_minmax_scales(np.array([[0.0], [3.0]]), QuantConfig(2, UNSIGNED))
        np.testing.assert_allclose(s, [1.0])

    def test_signed_minmax(self):
        s = fit_minmax_scales(np.array([[-4.0], [2.0]]), QuantConfig(3, SIGNED))
        np.testing.assert_allclose(s, [4 / 3], rtol=1e-15)

    def test_zero_channel_fallback(self):
        s = fit_minmax_scales(np.zeros((3, 2)), QuantConfig())
        np.testing.assert_array_equal(s, [SCALE_EPS, SCALE_EPS])
        fp16 = to_fp16_scales(s)
        assert np.all(fp16 > 0)
        assert np.all(quantize(np.zeros((3, 2)), fp16, QuantConfig()).codes == 0)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            fit_minmax_scales(np.array([[np.inf]]), QuantConfig())

    def test_fp16_values_survive_float16(self, rng):
        s = to_fp16_scales(np.abs(rng.standard_normal(50)) * 10.0 ** rng.integers(-9, 6, 50))
        np.testing.assert_array_equal(s.astype(np.float16).astype(np.float64), s)
        assert np.all(s > 0) and np.all(np.isfinite(s))


class TestSTE:
    def test_saturation_gate(self):
        cfg = QuantConfig(3, SIGNED)  # codes -4..3, pass-through band [-4.5, 3.5]
        M = np.array([[-4.6], [-4.5], [0.0], [3.5], [3.6]])
        np.testing.assert_array_equal(ste_gradient_mask(M, [1.0], cfg)[:, 0], [0, 1, 1, 1, 0])

    def test_identity_passes_everything(self):
        np.testing.assert_array_equal(ste_gradient_mask(np.full((2, 2), 1e9), np.ones(2), QuantConfig(mode=IDENTITY)), 1)


def test_subnormal_channel_gets_fallback_scale():
    s = fit_minmax_scales(np.full((2, 1), 5e-324), QuantConfig(2, UNSIGNED))
    np.testing.assert_array_equal(s, [SCALE_EPS])
