import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from winosparse import sparsity as sp
from winosparse.winograd import build_plan, transform_filters

from conftest import assert_gradients_close, central_difference


class TestPercentileThreshold:
    def test_nearest_rank_example(self):
        mags = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        assert sp.percentile_threshold(mags, 20) == pytest.approx(0.2)

    def test_s_100_is_max(self):
        assert sp.percentile_threshold([3.0, 1.0, 2.0], 100) == 3.0

    def test_s_0_regularizes_nothing(self):
        theta = sp.percentile_threshold([1.0, 2.0], 0)
        assert theta == float("-inf")

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            sp.percentile_threshold([], 50)

    def test_deterministic_and_stable(self, rng):
        mags = rng.random(999)
        t1 = sp.percentile_threshold(mags, 37.5)
        t2 = sp.percentile_threshold(mags, 37.5)
        assert t1 == t2

    @given(
        st.lists(st.floats(0.001, 100.0), min_size=1, max_size=200),
        st.floats(0.01, 100.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_rank_property(self, mags, s):
        theta = sp.percentile_threshold(mags, s)
        arr = np.asarray(mags)
        at_or_below = int((arr <= theta).sum())
        k = math.ceil(s * len(mags) / 100.0 - 1e-9)
        assert at_or_below >= min(max(k, 1), len(mags))
        # theta is an element of the list
        assert theta in mags


class TestWinogradPartialL2:
    def test_scalar_1x1_plan(self):
        # single 1x1 layer, w=[2], s=100: R = 4, dR/dw = 4
        plans = {"c": build_plan(1, 1)}
        weights = {"c": np.array([[[[2.0]]]])}
        res = sp.winograd_partial_l2(weights, plans, 100)
        assert res.value == pytest.approx(4.0)
        assert res.grads["c"].ravel()[0] == pytest.approx(4.0)

    def test_all_zero_weights(self):
        plans = {"c": build_plan(3, 4)}
        weights = {"c": np.zeros((2, 1, 3, 3))}
        res = sp.winograd_partial_l2(weights, plans, 70)
        assert res.value == 0.0
        np.testing.assert_array_equal(res.grads["c"], np.zeros((2, 1, 3, 3)))

    def test_s100_is_full_mean_square(self, rng):
        plans = {"c": build_plan(3, 4)}
        w = rng.normal(size=(3, 2, 3, 3))
        res = sp.winograd_partial_l2({"c": w}, plans, 100)
        wd = transform_filters(w, plans["c"])
        assert res.value == pytest.approx((wd**2).mean())

    def test_missing_plan_layer_raises(self):
        plans = {"c": build_plan(3, 4)}
        with pytest.raises(ValueError, match="weights"):
            sp.winograd_partial_l2({"other": np.zeros((1, 1, 3, 3))}, plans, 50)

    def test_gradient_vs_finite_difference(self, rng):
        plans = {"a": build_plan(3, 4), "b": build_plan(2, 3)}
        weights = {
            "a": rng.normal(size=(2, 2, 3, 3)),
            "b": rng.normal(size=(3, 1, 2, 2)),
        }
        res = sp.winograd_partial_l2(weights, plans, 60)
        for name in weights:
            def f(arr, name=name):
                w2 = dict(weights)
                w2[name] = arr
                return sp.winograd_partial_l2(w2, plans, 60).value

            numeric = central_difference(f, weights[name].copy())
            assert_gradients_close(res.grads[name], numeric)

    def test_matches_spatial_for_1x1_plan_s100(self, rng):
        w = rng.normal(size=(3, 2, 1, 1))
        plans = {"c": build_plan(1, 1)}
        wd = sp.winograd_partial_l2({"c": w}, plans, 100)
        sd = sp.spatial_partial_l2({"c": w}, 100)
        assert wd.value == pytest.approx(sd.value, rel=1e-12)
        np.testing.assert_allclose(wd.grads["c"], sd.grads["c"], atol=1e-12)


class TestSpatialPartialL2:
    def test_s100_full_mean_square(self, rng):
        w = {"c": rng.normal(size=(4, 3)), "d": rng.normal(size=7)}
        res = sp.spatial_partial_l2(w, 100)
        total = np.concatenate([w["c"].ravel(), w["d"]])
        assert res.value == pytest.approx((total**2).mean())

    def test_half_includes_only_smaller(self):
        w = {"c": np.array([1.0, 0.1])}
        res = sp.spatial_partial_l2(w, 50)
        assert res.value == pytest.approx(0.01 / 2)
        np.testing.assert_allclose(res.grads["c"], [0.0, 0.1])

    def test_ties_at_threshold_included(self):
        w = {"c": np.array([0.5, 0.5, 1.0, 2.0])}
        res = sp.spatial_partial_l2(w, 25)  # theta = 0.5, both ties in
        assert res.value == pytest.approx((0.25 + 0.25) / 4)

    def test_gradient_vs_finite_difference_50_weights(self, rng):
        w = {"a": rng.normal(size=(5, 5)), "b": rng.normal(size=25)}
        res = sp.spatial_partial_l2(w, 40)
        for name in w:
            def f(arr, name=name):
                w2 = dict(w)
                w2[name] = arr
                return sp.spatial_partial_l2(w2, 40).value

            numeric = central_difference(f, w[name].copy())
            assert_gradients_close(res.grads[name], numeric)

    def test_per_layer_scope(self, rng):
        w = {"small": np.full(10, 0.01), "big": np.full(10, 10.0)}
        res = sp.spatial_partial_l2(w, 50, scope="per-layer")
        assert isinstance(res.theta, dict)
        # half of each layer regularized, not just the small layer
        assert (res.grads["big"] != 0).sum() > 0

    def test_nonnegative_and_monotone_under_shrink(self, rng):
        w = {"c": rng.normal(size=30)}
        r1 = sp.spatial_partial_l2(w, 50)
        assert r1.value >= 0
        shrunk = {"c": w["c"].copy()}
        mask = np.abs(shrunk["c"]) <= r1.theta
        shrunk["c"][mask] *= 0.5
        r2 = sp.spatial_partial_l2(shrunk, 50)
        assert r2.value < r1.value


class TestJointCost:
    def test_equilibrium(self):
        alpha, zeta = 1.3, 0.7
        r = alpha * math.exp(-zeta)
        res = sp.joint_cost(1.0, r, 0.0, zeta, 0.0, alpha)
        assert res.dzeta_wd == pytest.approx(0.0, abs=1e-12)

    def test_simple_arithmetic(self):
        res = sp.joint_cost(0.0, 2.0, 0.0, 0.0, 0.0, 1.0)
        assert res.dzeta_wd == pytest.approx(1.0)

    def test_e_only_when_both_s_zero(self):
        res = sp.joint_cost(5.0, 0.0, 0.0, 1.5, -2.0, 1.0)
        assert res.value == pytest.approx(5.0 - 1.0 * (1.5 - 2.0))
        assert res.dzeta_wd == pytest.approx(-1.0)
        assert res.dzeta_sd == pytest.approx(-1.0)

    def test_zeta_gradient_sign(self):
        # below equilibrium the gradient is negative, so descent raises zeta
        res = sp.joint_cost(0.0, 0.1, 0.1, -5.0, -5.0, 1.0)
        assert res.dzeta_wd < 0 and res.dzeta_sd < 0

    def test_zeta_gradients_vs_finite_difference(self, rng):
        for _ in range(20):
            e = float(rng.normal())
            r1, r2 = float(rng.random()), float(rng.random())
            z1, z2 = float(rng.normal()), float(rng.normal())
            alpha = float(rng.random()) + 0.1
            res = sp.joint_cost(e, r1, r2, z1, z2, alpha)
            eps = 1e-6
            fd1 = (
                sp.joint_cost(e, r1, r2, z1 + eps, z2, alpha).value
                - sp.joint_cost(e, r1, r2, z1 - eps, z2, alpha).value
            ) / (2 * eps)
            fd2 = (
                sp.joint_cost(e, r1, r2, z1, z2 + eps, alpha).value
                - sp.joint_cost(e, r1, r2, z1, z2 - eps, alpha).value
            ) / (2 * eps)
            assert res.dzeta_wd == pytest.approx(fd1, rel=1e-5, abs=1e-8)
            assert res.dzeta_sd == pytest.approx(fd2, rel=1e-5, abs=1e-8)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            sp.SparsityConfig(s_wd=101)
        with pytest.raises(ValueError):
            sp.SparsityConfig(alpha=0)
        with pytest.raises(ValueError):
            sp.SparsityConfig(threshold_scope="weird")
