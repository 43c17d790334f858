from fractions import Fraction

import numpy as np
import pytest

from winosparse import winograd as wg
from winosparse.tensor import conv2d_forward

from conftest import conv2d_bruteforce

TESTED_PLANS = [(1, 1), (2, 3), (3, 4), (3, 6), (5, 8)]


class TestBuildPlan:
    def test_degenerate_1x1(self):
        plan = wg.build_plan(1, 1)
        np.testing.assert_array_equal(plan.F, [[1.0]])
        np.testing.assert_array_equal(plan.G, [[1.0]])
        np.testing.assert_array_equal(plan.S, [[1.0]])
        out = wg.winograd_conv2d(np.full((1, 1, 1), 3.0), np.full((1, 1, 1, 1), 5.0), plan)
        np.testing.assert_allclose(out, [[[15.0]]])

    def test_shapes_3_4(self):
        plan = wg.build_plan(3, 4)
        assert plan.m == 2
        assert plan.G.shape == (4, 3)
        assert plan.F.shape == (4, 4)
        assert plan.S.shape == (4, 2)

    def test_canonical_points(self):
        plan = wg.build_plan(5, 8)
        assert plan.interpolation_points == (
            Fraction(0), Fraction(1), Fraction(-1), Fraction(2), Fraction(-2),
            Fraction(1, 2), Fraction(-1, 2),
        )

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            wg.build_plan(4, 3)
        with pytest.raises(ValueError):
            wg.build_plan(3, 9)
        with pytest.raises(ValueError):
            wg.build_plan(0, 1)

    @pytest.mark.parametrize("r,n", TESTED_PLANS)
    def test_exactness_on_unit_bases(self, r, n):
        """Exhaustive n^2 * r^2 unit-basis (patch, filter) pairs."""
        plan = wg.build_plan(r, n)
        worst = 0.0
        for pi in range(n * n):
            x = np.zeros((1, n, n))
            x[0, pi // n, pi % n] = 1.0
            for wi in range(r * r):
                w = np.zeros((1, 1, r, r))
                w[0, 0, wi // r, wi % r] = 1.0
                direct = conv2d_forward(x, w)
                X = plan.F @ x[0] @ plan.F.T
                W = wg.transform_filter(w[0, 0], plan)
                y = plan.S.T @ (W * X) @ plan.S
                worst = max(worst, np.abs(y - direct[0]).max())
        assert worst <= 1e-9

    def test_describe_prints_exact_rationals(self):
        text = wg.build_plan(3, 4).describe()
        assert "points: 0, 1, -1, inf" in text
        assert "F =" in text and "G =" in text and "S =" in text


class TestTransformFilter:
    def test_zero_filter(self):
        plan = wg.build_plan(3, 4)
        np.testing.assert_array_equal(wg.transform_filter(np.zeros((3, 3)), plan), np.zeros((4, 4)))

    def test_identity_plan_scalar(self):
        plan = wg.build_plan(1, 1)
        np.testing.assert_array_equal(wg.transform_filter(np.array([[5.0]]), plan), [[5.0]])

    def test_shape_mismatch(self):
        plan = wg.build_plan(3, 4)
        with pytest.raises(ValueError):
            wg.transform_filter(np.zeros((2, 2)), plan)

    def test_elementwise_product_matches_direct(self, rng):
        plan = wg.build_plan(3, 4)
        w = rng.normal(size=(3, 3))
        x = rng.normal(size=(4, 4))
        W = wg.transform_filter(w, plan)
        X = plan.F @ x @ plan.F.T
        y = plan.S.T @ (W * X) @ plan.S
        direct = conv2d_forward(x[None], w[None, None])
        np.testing.assert_allclose(y, direct[0], atol=1e-10)

    def test_transform_filters_batch(self, rng):
        plan = wg.build_plan(3, 4)
        w = rng.normal(size=(3, 2, 3, 3))
        batch = wg.transform_filters(w, plan)
        for d in range(3):
            for c in range(2):
                np.testing.assert_allclose(batch[d, c], wg.transform_filter(w[d, c], plan), atol=0)


class TestWinogradConv:
    def test_all_ones(self):
        plan = wg.build_plan(3, 4)
        out = wg.winograd_conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), plan)
        np.testing.assert_allclose(out, np.full((1, 2, 2), 9.0), atol=1e-10)

    def test_zero_filter_zero_output(self, rng):
        plan = wg.build_plan(3, 4)
        out = wg.winograd_conv2d(rng.normal(size=(2, 8, 8)), np.zeros((3, 2, 3, 3)), plan)
        np.testing.assert_array_equal(out, np.zeros((3, 6, 6)))

    def test_matches_direct_conv(self, rng):
        plan = wg.build_plan(3, 4)
        x = rng.normal(size=(2, 8, 8))
        w = rng.normal(size=(3, 2, 3, 3))
        direct = conv2d_forward(x, w)
        out = wg.winograd_conv2d(x, w, plan)
        assert np.abs(out - direct).max() <= 1e-9 * max(1.0, np.abs(direct).max())

    def test_matches_bruteforce(self, rng):
        plan = wg.build_plan(2, 3)
        x = rng.normal(size=(1, 5, 5))
        w = rng.normal(size=(2, 1, 2, 2))
        np.testing.assert_allclose(
            wg.winograd_conv2d(x, w, plan), conv2d_bruteforce(x, w), atol=1e-9
        )

    @pytest.mark.parametrize("r,n", TESTED_PLANS)
    def test_equivalence_100_random_draws(self, r, n, rng):
        plan = wg.build_plan(r, n)
        for _ in range(100):
            c = int(rng.integers(1, 3))
            d = int(rng.integers(1, 3))
            h = int(rng.integers(r, r + 9))
            w_side = int(rng.integers(r, r + 9))
            x = rng.normal(size=(c, h, w_side))
            w = rng.normal(size=(d, c, r, r))
            direct = conv2d_forward(x, w)
            out = wg.winograd_conv2d(x, w, plan)
            tol = 1e-9 * max(1.0, np.abs(direct).max())
            assert np.abs(out - direct).max() <= tol

    def test_padding_path_odd_output(self, rng):
        # 7x7 input with (3,4): output 5x5 is not a multiple of m=2
        plan = wg.build_plan(3, 4)
        x = rng.normal(size=(1, 7, 7))
        w = rng.normal(size=(2, 1, 3, 3))
        np.testing.assert_allclose(
            wg.winograd_conv2d(x, w, plan), conv2d_forward(x, w), atol=1e-9
        )

    def test_batched(self, rng):
        plan = wg.build_plan(3, 4)
        x = rng.normal(size=(3, 2, 6, 6))
        w = rng.normal(size=(2, 2, 3, 3))
        out = wg.winograd_conv2d(x, w, plan)
        for i in range(3):
            np.testing.assert_allclose(out[i], wg.winograd_conv2d(x[i], w, plan), atol=0)


class TestSparseWinogradConv:
    def test_fully_pruned(self, rng):
        plan = wg.build_plan(3, 4)
        w = rng.normal(size=(2, 1, 3, 3))
        bank = wg.WinogradFilterBank.from_spatial(w, plan, mask=np.ones((2, 1, 4, 4), bool))
        out, macs = wg.sparse_winograd_conv2d(rng.normal(size=(1, 6, 6)), bank)
        np.testing.assert_array_equal(out, np.zeros((2, 4, 4)))
        assert macs == 0

    def test_unpruned_matches_dense_and_counts(self, rng):
        plan = wg.build_plan(3, 4)
        x = rng.normal(size=(2, 8, 8))
        w = rng.normal(size=(3, 2, 3, 3))
        bank = wg.WinogradFilterBank.from_spatial(w, plan)
        out, macs = wg.sparse_winograd_conv2d(x, bank)
        np.testing.assert_allclose(out, wg.winograd_conv2d(x, w, plan), atol=0)
        assert macs == 9 * 2 * 3 * 16  # patches * C * D * n^2

    def test_masked_equals_zeroed_dense_exactly(self, rng):
        plan = wg.build_plan(3, 4)
        x = rng.normal(size=(2, 8, 8))
        w = rng.normal(size=(3, 2, 3, 3))
        wd = wg.transform_filters(w, plan)
        mask = rng.random(wd.shape) < 0.8
        bank = wg.WinogradFilterBank(weights=wd.copy(), mask=mask, plan=plan)
        out, macs = wg.sparse_winograd_conv2d(x, bank)

        zeroed = np.where(mask, 0.0, wd)
        X, geom = wg._transform_input(x[None], plan)
        Z = np.einsum("NCtuxy,DCxy->NDtuxy", X, zeroed)
        ref = wg._assemble_output(Z, plan, geom)[0]
        np.testing.assert_array_equal(out, ref)
        assert macs == 9 * int((~mask).sum())

    def test_sparsity_accounting(self, rng):
        plan = wg.build_plan(3, 4)
        w = rng.normal(size=(4, 2, 3, 3))
        wd = wg.transform_filters(w, plan)
        flat = np.abs(wd).ravel()
        theta = np.sort(flat)[int(np.ceil(0.8 * flat.size)) - 1]
        mask = np.abs(wd) <= theta
        bank = wg.WinogradFilterBank(weights=wd.copy(), mask=mask, plan=plan)
        _, macs = wg.sparse_winograd_conv2d(rng.normal(size=(2, 6, 6)), bank)
        dense = 4 * 2 * 16
        assert macs == 4 * (dense - int(mask.sum()))
        assert abs(bank.sparsity - 0.8) < 1.0 / flat.size + 1e-12
