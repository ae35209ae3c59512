import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpvstream import dpv
from dpvstream.errors import InvalidArgumentError

HYPS = dpv.make_hypotheses(0.5, 10.0, 64)


def delta_volume(hyps, k, shape=(2, 3)):
    p = np.zeros(shape + (hyps.count,))
    p[..., k] = 1.0
    return dpv.DepthProbabilityVolume(hyps, p)


class TestHypotheses:
    def test_endpoints_and_count(self):
        assert HYPS.count == 64
        assert HYPS.centers[0] == 0.5
        assert HYPS.centers[-1] == 10.0

    def test_two_point(self):
        np.testing.assert_array_equal(dpv.make_hypotheses(1, 2, 2).centers, [1.0, 2.0])

    def test_uniform_in_disparity(self):
        expected = 1.0 / (1.0 / 0.5 + 32 * (1.0 / 10.0 - 1.0 / 0.5) / 63)
        assert HYPS.centers[32] == pytest.approx(expected, rel=1e-15)
        np.testing.assert_allclose(np.diff(HYPS.disparities), HYPS.disparity_step, rtol=1e-12)

    def test_ascending(self):
        assert np.all(np.diff(HYPS.centers) > 0)

    @pytest.mark.parametrize("args", [(0.0, 1.0, 4), (2.0, 1.0, 4), (1.0, 1.0, 4), (0.5, 10.0, 1), (0.5, 10.0, 2.5)])
    def test_rejects_invalid(self, args):
        with pytest.raises(InvalidArgumentError):
            dpv.make_hypotheses(*args)

    def test_index_of_centers(self):
        np.testing.assert_allclose(HYPS.index_of(HYPS.centers), np.arange(64), atol=1e-9)


class TestNormalize:
    def test_pair(self):
        h = dpv.make_hypotheses(1, 2, 2)
        out = dpv.normalize(np.array([[[2.0, 2.0]]]), h)
        np.testing.assert_array_equal(out.values, [[[0.5, 0.5]]])
        assert out.degenerate_pixels == 0

    def test_idempotent(self):
        raw = np.random.default_rng(0).random((4, 5, 64))
        once = dpv.normalize(raw, HYPS).values
        np.testing.assert_allclose(dpv.normalize(once, HYPS).values, once, atol=1e-12)

    def test_all_zero_pixel_becomes_uniform(self):
        raw = np.random.default_rng(1).random((3, 3, 64))
        raw[1, 2] = 0.0
        out = dpv.normalize(raw, HYPS)
        np.testing.assert_array_equal(out.values[1, 2], np.full(64, 1 / 64))
        assert out.degenerate_pixels == 1

    def test_rejects_negative(self):
        with pytest.raises(InvalidArgumentError):
            dpv.normalize(-np.ones((1, 1, 64)), HYPS)

    def test_shape_checked(self):
        with pytest.raises(InvalidArgumentError):
            dpv.DepthProbabilityVolume(HYPS, np.ones((2, 2, 10)))


class TestFromCost:
    def test_equal_costs_uniform(self):
        out = dpv.from_cost(np.full((2, 2, 64), 3.0), HYPS, 1.0)
        np.testing.assert_allclose(out.values, 1 / 64, rtol=1e-12)

    def test_two_class(self):
        out = dpv.from_cost(np.array([[[0.0, 1.0]]]), dpv.make_hypotheses(1, 2, 2), 1.0)
        np.testing.assert_allclose(out.values[0, 0], [0.7311, 0.2689], atol=1e-4)

    def test_sharp_limit(self):
        cost = np.full((1, 1, 64), 10.0)
        cost[..., 0] = 0.0
        assert dpv.from_cost(cost, HYPS, 0.1).values[0, 0, 0] > 1 - 1e-6

    def test_nan_rejected(self):
        cost = np.zeros((1, 1, 64))
        cost[0, 0, 3] = np.nan
        with pytest.raises(InvalidArgumentError):
            dpv.from_cost(cost, HYPS, 1.0)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(InvalidArgumentError):
            dpv.from_cost(np.zeros((1, 1, 64)), HYPS, tau)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        cost = rng.random((5, 6, 64))
        shift = rng.normal(size=(5, 6, 1)) * 100
        a = dpv.from_cost(cost, HYPS, 0.05).values
        b = dpv.from_cost(cost + shift, HYPS, 0.05).values
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_default_temperature_is_scale_free(self):
        cost = np.random.default_rng(3).random((5, 6, 64))
        np.testing.assert_allclose(
            dpv.from_cost(cost, HYPS).values, dpv.from_cost(1000.0 * cost, HYPS).values, atol=1e-12
        )

    def test_default_temperature_value(self):
        cost = np.zeros((1, 2, 64))
        cost[0, 0, 5] = 2.0
        cost[0, 1, 7] = 4.0
        assert dpv.default_temperature(cost) == pytest.approx(0.05 * 3.0)
        assert dpv.default_temperature(np.zeros((2, 2, 64))) == 1.0

    def test_zero_temperature_limit_hits_argmin(self):
        rng = np.random.default_rng(4)
        cost = rng.random((4, 4, 64))
        d = dpv.expected_depth(dpv.from_cost(cost, HYPS, 1e-6))
        np.testing.assert_allclose(d, HYPS.centers[np.argmin(cost, axis=-1)], rtol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 2, 8), elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 1e3))
    def test_normalized(self, cost, tau):
        h = dpv.make_hypotheses(0.5, 10.0, 8)
        np.testing.assert_allclose(dpv.from_cost(cost, h, tau).values.sum(axis=-1), 1.0, atol=1e-9)


class TestExpectedDepth:
    @pytest.mark.parametrize("k", [0, 17, 63])
    def test_delta(self, k):
        np.testing.assert_allclose(dpv.expected_depth(delta_volume(HYPS, k)), HYPS.centers[k])

    def test_two_bins(self):
        h = dpv.make_hypotheses(1, 3, 2)
        v = dpv.DepthProbabilityVolume(h, np.array([[[0.5, 0.5]]]))
        assert dpv.expected_depth(v)[0, 0] == pytest.approx(2.0)

    def test_uniform_is_mean_of_centers(self):
        v = dpv.uniform(HYPS, 2, 2)
        np.testing.assert_allclose(dpv.expected_depth(v), sum(HYPS.centers) / 64, rtol=1e-12)

    def test_argmax(self):
        p = np.full((1, 1, 64), 0.01 / 63)
        p[0, 0, 40] = 0.99
        np.testing.assert_array_equal(dpv.argmax_depth(dpv.DepthProbabilityVolume(HYPS, p)), [[HYPS.centers[40]]])


class TestConfidence:
    def test_delta_is_one(self):
        v = delta_volume(HYPS, 12)
        np.testing.assert_allclose(dpv.confidence(v, dpv.expected_depth(v)), 1.0)

    def test_uniform(self):
        v = dpv.uniform(HYPS, 2, 2)
        np.testing.assert_allclose(dpv.confidence(v, dpv.expected_depth(v)), 0.015625)

    def test_interpolates_in_disparity(self):
        h = dpv.make_hypotheses(1, 3, 2)
        v = dpv.DepthProbabilityVolume(h, np.array([[[0.8, 0.2]]]))
        d = dpv.expected_depth(v)
        assert d[0, 0] == pytest.approx(1.4)
        # oracle: np.interp on ascending disparity
        expected = np.interp(1 / 1.4, [1 / 3, 1.0], [0.2, 0.8])
        assert dpv.confidence(v, d)[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_depth_and_confidence(self):
        v = delta_volume(HYPS, 5)
        d, c = dpv.depth_and_confidence(v)
        np.testing.assert_allclose(d, HYPS.centers[5])
        np.testing.assert_allclose(c, 1.0)


class TestMask:
    def test_threshold_zero_keeps_all(self):
        d = np.full((3, 3), 2.0)
        np.testing.assert_array_equal(dpv.mask_low_confidence(d, np.full((3, 3), 0.01), 0.0), d)

    def test_threshold_one_masks_non_delta(self):
        d = np.full((3, 3), 2.0)
        np.testing.assert_array_equal(dpv.mask_low_confidence(d, np.full((3, 3), 0.999), 1.0), 0.0)

    def test_uniform_masked(self):
        v = dpv.uniform(HYPS, 2, 2)
        d, c = dpv.depth_and_confidence(v)
        assert np.all(dpv.mask_low_confidence(d, c, 0.1) == dpv.INVALID_DEPTH)

    @pytest.mark.parametrize("t", [-0.1, 1.1])
    def test_threshold_range(self, t):
        with pytest.raises(InvalidArgumentError):
            dpv.mask_low_confidence(np.ones((1, 1)), np.ones((1, 1)), t)


class TestLogVolume:
    def test_roundtrip(self):
        rng = np.random.default_rng(5)
        p = dpv.normalize(rng.random((4, 4, 64)) + 1e-20, HYPS)
        back = p.to_log().to_dpv()
        np.testing.assert_allclose(back.values, p.values, atol=1e-9)

    def test_floor_keeps_energy_finite(self):
        v = delta_volume(HYPS, 3)
        e = v.to_log().values
        assert np.isfinite(e).all()
        assert e.max() == pytest.approx(-np.log(dpv.PROB_FLOOR))

    def test_normalized_sums_to_one(self):
        e = np.random.default_rng(6).normal(size=(3, 3, 64)) * 50
        lv = dpv.LogVolume(HYPS, e).normalized()
        np.testing.assert_allclose(np.exp(-lv.values).sum(axis=-1), 1.0, atol=1e-12)
