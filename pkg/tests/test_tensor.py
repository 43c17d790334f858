import math

import numpy as np
import pytest

from winosparse import tensor as T

from conftest import assert_gradients_close, central_difference, conv2d_bruteforce


class TestForward:
    def test_identity(self):
        x = T.parameter([1.0, 2.0, 3.0])
        out = T.forward(T.identity(x))
        np.testing.assert_array_equal(out, [1.0, 2.0, 3.0])

    def test_relu(self):
        x = T.parameter([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(T.forward(T.relu(x)), [0.0, 0.0, 2.0])

    def test_uniform_softmax_xent(self):
        logits = T.parameter([0.0, 0.0])
        labels = T.constant(0)
        loss = T.forward(T.softmax_cross_entropy(logits, labels))
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_placeholder_binding_and_rebinding(self):
        x = T.placeholder("x")
        root = T.relu(x)
        out1 = T.forward(root, {"x": np.array([-1.0, 3.0])})
        np.testing.assert_array_equal(out1, [0.0, 3.0])
        out2 = T.forward(root, {"x": np.array([5.0, -2.0])})
        np.testing.assert_array_equal(out2, [5.0, 0.0])

    def test_unbound_placeholder_raises(self):
        x = T.placeholder("imgs")
        with pytest.raises(ValueError, match="imgs"):
            T.forward(T.relu(x))

    def test_shape_mismatch_names_op(self):
        a = T.parameter([1.0, 2.0])
        b = T.parameter([1.0, 2.0, 3.0])
        with pytest.raises(ValueError, match="add"):
            T.forward(T.add(a, b))


class TestBackward:
    def test_sum_of_squares(self):
        x = T.parameter([1.0, 2.0])
        root = T.sum_all(T.square(x))
        T.forward(root)
        T.backward(root)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_relu_subgradient_zero_at_negative(self):
        x = T.parameter([-1.0, 2.0])
        root = T.sum_all(T.relu(x))
        T.forward(root)
        T.backward(root)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_relu_subgradient_zero_at_zero(self):
        x = T.parameter([0.0])
        root = T.sum_all(T.relu(x))
        T.forward(root)
        T.backward(root)
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_non_scalar_root_raises(self):
        x = T.parameter([1.0, 2.0])
        root = T.square(x)
        T.forward(root)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(root)

    def test_backward_requires_forward(self):
        x = T.parameter([1.0])
        root = T.sum_all(x)
        with pytest.raises(RuntimeError):
            T.backward(root)

    def test_fanout_accumulates(self):
        x = T.parameter([3.0])
        root = T.sum_all(T.add(T.square(x), T.scale(x, 2.0)))
        T.forward(root)
        T.backward(root)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_independent_subgraphs_match_separate_backwards(self, rng):
        xv = rng.normal(size=4)
        yv = rng.normal(size=3)

        x1, y1 = T.parameter(xv.copy()), T.parameter(yv.copy())
        joint = T.add(T.sum_all(T.square(x1)), T.sum_all(T.relu(y1)))
        T.forward(joint)
        T.backward(joint)

        x2 = T.parameter(xv.copy())
        rx = T.sum_all(T.square(x2))
        T.forward(rx)
        T.backward(rx)
        y2 = T.parameter(yv.copy())
        ry = T.sum_all(T.relu(y2))
        T.forward(ry)
        T.backward(ry)

        np.testing.assert_array_equal(x1.grad, x2.grad)
        np.testing.assert_array_equal(y1.grad, y2.grad)


class TestConv2d:
    def test_all_ones_3x3(self):
        x = np.ones((1, 4, 4))
        w = np.ones((1, 1, 3, 3))
        out = T.conv2d_forward(x, w)
        np.testing.assert_array_equal(out, np.full((1, 2, 2), 9.0))

    def test_impulse_response_is_cross_correlation(self):
        x = np.zeros((1, 3, 3))
        x[0, 1, 1] = 1.0
        w = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = T.conv2d_forward(x, w)
        np.testing.assert_array_equal(out[0], [[4.0, 3.0], [2.0, 1.0]])

    def test_matches_bruteforce(self, rng):
        x = rng.normal(size=(2, 8, 8))
        w = rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(
            T.conv2d_forward(x, w), conv2d_bruteforce(x, w), atol=1e-12
        )

    def test_batched_matches_per_image(self, rng):
        x = rng.normal(size=(4, 2, 6, 7))
        w = rng.normal(size=(3, 2, 3, 2))
        out = T.conv2d_forward(x, w)
        for i in range(4):
            np.testing.assert_allclose(out[i], T.conv2d_forward(x[i], w), atol=0)

    def test_linear_in_both_arguments(self, rng):
        x = rng.normal(size=(2, 6, 6))
        y = rng.normal(size=(2, 6, 6))
        w = rng.normal(size=(2, 2, 3, 3))
        a, b = 1.7, -0.3
        lhs = T.conv2d_forward(a * x + b * y, w)
        rhs = a * T.conv2d_forward(x, w) + b * T.conv2d_forward(y, w)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
        lhs_w = T.conv2d_forward(x, a * w)
        np.testing.assert_allclose(lhs_w, a * T.conv2d_forward(x, w), atol=1e-12)

    def test_filter_larger_than_input_raises(self):
        with pytest.raises(ValueError, match="conv2d"):
            T.conv2d_forward(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="channels"):
            T.conv2d_forward(np.ones((2, 4, 4)), np.ones((1, 3, 2, 2)))


class TestMaxpool:
    def test_basic(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        out = T.maxpool2d_forward(x, 2)
        np.testing.assert_array_equal(out[0], [[5.0, 7.0], [13.0, 15.0]])

    def test_tie_takes_first(self):
        x = np.zeros((1, 2, 2))
        node = T.parameter(x)
        root = T.sum_all(T.maxpool2d(node, 2))
        T.forward(root)
        T.backward(root)
        expect = np.zeros((1, 2, 2))
        expect[0, 0, 0] = 1.0
        np.testing.assert_array_equal(node.grad, expect)


def _random_cnn_graph(rng, c=2, h=6, wdt=6, d=3, r=3, classes=4):
    x = T.parameter(rng.normal(size=(2, c, h, wdt)))
    w1 = T.parameter(rng.normal(size=(d, c, r, r)) * 0.5)
    feat = d * (h - r + 1) * (wdt - r + 1)
    w2 = T.parameter(rng.normal(size=(feat, classes)) * 0.2)
    labels = T.constant(np.array([1, 3]))
    hidden = T.relu(T.conv2d(x, w1))
    logits = T.matmul(T.reshape(hidden, (2, feat)), w2)
    loss = T.softmax_cross_entropy(logits, labels)
    return loss, [x, w1, w2]


class TestGradientFidelity:
    """Analytic gradients vs central finite differences (step 1e-5)."""

    def test_composite_graphs(self, rng):
        for _ in range(10):
            loss, params = _random_cnn_graph(rng)
            T.forward(loss)
            T.backward(loss)
            for p in params:
                analytic = p.grad

                def f(arr, p=p, loss=loss):
                    old = p.value
                    p.value = arr
                    out = float(T.forward(loss))
                    p.value = old
                    return out

                numeric = central_difference(f, p.value.copy())
                T.forward(loss)  # restore cached values
                assert_gradients_close(analytic, numeric)

    @pytest.mark.parametrize("op_name", ["add", "sub", "mul", "matmul", "relu", "maxpool", "conv"])
    def test_per_op(self, op_name, rng):
        if op_name in ("add", "sub", "mul"):
            a = T.parameter(rng.normal(size=(3, 4)))
            b = T.parameter(rng.normal(size=(3, 4)))
            root = T.sum_all(T.square(getattr(T, op_name)(a, b)))
            params = [a, b]
        elif op_name == "matmul":
            a = T.parameter(rng.normal(size=(3, 4)))
            b = T.parameter(rng.normal(size=(4, 2)))
            root = T.sum_all(T.square(T.matmul(a, b)))
            params = [a, b]
        elif op_name == "relu":
            a = T.parameter(rng.normal(size=7))
            root = T.sum_all(T.square(T.relu(a)))
            params = [a]
        elif op_name == "maxpool":
            a = T.parameter(rng.normal(size=(1, 2, 4, 4)))
            root = T.sum_all(T.square(T.maxpool2d(a, 2)))
            params = [a]
        else:
            a = T.parameter(rng.normal(size=(1, 2, 5, 5)))
            w = T.parameter(rng.normal(size=(2, 2, 3, 3)))
            root = T.sum_all(T.square(T.conv2d(a, w)))
            params = [a, w]
        T.forward(root)
        T.backward(root)
        for p in params:
            analytic = p.grad

            def f(arr, p=p, root=root):
                old = p.value
                p.value = arr
                out = float(T.forward(root))
                p.value = old
                return out

            numeric = central_difference(f, p.value.copy())
            T.forward(root)
            assert_gradients_close(analytic, numeric)


class TestFiniteness:
    def test_values_stay_finite(self, rng):
        loss, params = _random_cnn_graph(rng)
        val = T.forward(loss)
        assert np.isfinite(val)
        T.backward(loss)
        for p in params:
            assert np.isfinite(p.grad).all()

    def test_large_logits_softmax_stable(self):
        logits = T.parameter([1000.0, -1000.0])
        loss = T.softmax_cross_entropy(logits, T.constant(0))
        assert np.isfinite(T.forward(loss))
