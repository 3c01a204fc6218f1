import math

import numpy as np
import pytest

from layerdiff import tensor as T
from layerdiff.rng import DRng


def fd_check(f_tensor, params, tol=1e-6):
    """Analytic vs central-difference gradient of a scalar-valued builder."""
    analytic = T.grad(f_tensor(), params)
    with T.no_grad():
        numeric = T.finite_diff_grad(lambda: f_tensor().item(), params)
    for a, n in zip(analytic, numeric):
        assert T.relative_error(a, n, floor=1e-6) < tol


class TestMatmul:
    A = np.array([[1.0, 2.0], [3.0, 4.0]])

    def test_identity(self):
        assert np.array_equal(T.matmul(self.A, np.eye(2)).data, self.A)

    def test_hand_product(self):
        out = T.matmul(self.A, np.array([[5.0, 6.0], [7.0, 8.0]])).data
        assert np.array_equal(out, [[19.0, 22.0], [43.0, 50.0]])

    def test_annihilator(self):
        assert np.array_equal(T.matmul(self.A, np.zeros((2, 3))).data, np.zeros((2, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(self.A, np.ones((3, 2)))

    def test_batched_gradient(self, rng):
        a = T.parameter(rng.spawn("a").normal((2, 3, 4)))
        b = T.parameter(rng.spawn("b").normal((4, 5)))
        fd_check(lambda: T.sum_squares(T.matmul(a, b)), [a, b])


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal((3, 5, 5))
        k = np.zeros((3, 3, 1, 1))
        for c in range(3):
            k[c, c] = 1.0
        assert np.array_equal(T.conv2d(x, k).data, x)

    def test_ones_kernel_on_constant(self):
        c = 0.37
        out = T.conv2d(np.full((1, 6, 6), c), np.ones((1, 1, 3, 3))).data
        assert out.shape == (1, 4, 4)
        assert np.allclose(out, 9 * c, rtol=0, atol=1e-15)

    def test_zero_kernel(self, rng):
        assert np.array_equal(T.conv2d(rng.normal((2, 4, 4)), np.zeros((3, 2, 3, 3)), pad=1).data,
                              np.zeros((3, 4, 4)))

    def test_output_extent(self, rng):
        out = T.conv2d(rng.normal((2, 9, 9)), rng.normal((4, 2, 3, 3)), stride=2, pad=1)
        assert out.shape == (4, 5, 5)

    def test_direct_summation_oracle(self, rng):
        x, k = rng.spawn("x").normal((2, 5, 6)), rng.spawn("k").normal((3, 2, 3, 3))
        out = T.conv2d(x, k, pad=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 5, 6))
        for f in range(3):
            for i in range(5):
                for j in range(6):
                    ref[f, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * k[f])
        assert np.allclose(out, ref, rtol=0, atol=1e-12)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ValueError):
            T.conv2d(rng.normal((1, 4, 4)), np.ones((1, 1, 2, 2)))

    def test_non_integral_extent_rejected(self, rng):
        with pytest.raises(ValueError):
            T.conv2d(rng.normal((1, 4, 4)), np.ones((1, 1, 3, 3)), stride=2, pad=1)

    def test_gradient(self, rng):
        x = T.parameter(rng.spawn("x").normal((2, 2, 6, 6)))
        k = T.parameter(rng.spawn("k").normal((3, 2, 3, 3)))
        b = T.parameter(rng.spawn("b").normal((3,)))
        fd_check(lambda: T.sum_squares(T.conv2d(x, k, b, stride=2, pad=(1, 0))), [x, k, b])


class TestSoftmax:
    def test_zeros_uniform(self):
        assert np.allclose(T.softmax_rows(np.zeros((4, 4))).data, 0.25, atol=1e-15)

    def test_shift_invariance(self):
        out = T.softmax_rows(np.full((3, 3), 712.5)).data
        assert np.allclose(out, 1.0 / 3.0, atol=1e-15)

    def test_hand_value(self):
        out = T.softmax_rows(np.array([[0.0, math.log(3.0)], [0.0, 0.0]])).data
        assert np.allclose(out[0], [0.25, 0.75], atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        out = T.softmax_rows(rng.normal((6, 6)) * 30).data
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(T.NonFiniteError):
            T.softmax_rows(np.array([[np.nan, 0.0], [0.0, 0.0]]))

    def test_gradient(self, rng):
        x = T.parameter(rng.normal((3, 4, 4)))
        w = rng.spawn("w").normal((3, 4, 4))
        fd_check(lambda: T.tsum(T.softmax(x, axis=-1) * w), [x])


class TestRandn:
    def test_determinism(self):
        assert np.array_equal(T.randn((4, 5), DRng(3)).data, T.randn((4, 5), DRng(3)).data)

    def test_moments(self):
        x = T.randn((100000,), DRng(17)).data
        assert abs(x.mean()) < 0.02
        assert abs(x.var() - 1.0) < 0.03

    def test_sub_seeds_differ(self):
        r = DRng(3)
        assert not np.array_equal(T.randn((8,), r.spawn(1)).data, T.randn((8,), r.spawn(2)).data)


class TestGrad:
    def test_sum_of_squares(self, rng):
        x = T.parameter(rng.normal((5,)))
        [g] = T.grad(T.sum_squares(x), [x])
        assert np.array_equal(g, 2 * x.data)

    def test_constant_loss(self, rng):
        p = T.parameter(rng.normal((3,)))
        [g] = T.grad(T.tsum(p * 0.0) + 4.0, [p])
        assert np.array_equal(g, np.zeros(3))

    def test_non_scalar_rejected(self, rng):
        p = T.parameter(rng.normal((3,)))
        with pytest.raises(ValueError):
            T.grad(p * 2.0, [p])

    def test_param_not_in_graph(self, rng):
        p, q = T.parameter(rng.normal((3,))), T.parameter(rng.normal((3,)))
        with pytest.raises(ValueError):
            T.grad(T.sum_squares(p), [q])
        [g] = T.grad(T.sum_squares(p), [q], allow_unused=True)
        assert np.array_equal(g, np.zeros(3))

    def test_shared_subexpression(self, rng):
        x = T.parameter(rng.normal((4,)))
        y = x * x
        [g] = T.grad(T.tsum(y + y * x), [x])
        assert np.allclose(g, 2 * x.data + 3 * x.data ** 2, rtol=1e-14)

    def test_elementwise_ops(self, rng):
        x = T.parameter(rng.uniform((3, 4), 0.5, 2.0))
        y = T.parameter(rng.spawn("y").normal((4,)))

        def f():
            h = T.exp(x * 0.3) + T.log(x) - T.sqrt(x) + T.tanh(y) * T.sigmoid(x) + T.silu(x / (y * y + 1.0))
            return T.tsum(T.power(h, 2.0)) + T.mean(T.transpose(T.reshape(h, (4, 3))))
        fd_check(f, [x, y])

    def test_structural_ops(self, rng):
        x = T.parameter(rng.normal((2, 3, 4, 4)))
        table = T.parameter(rng.spawn("t").normal((5, 3)))

        def f():
            a = T.concat([x[:, :1], T.pad2d(x, 1)[:, 1:, 1:-1, 1:-1]], axis=1)
            u = T.upsample2x(a)
            rows = T.take_rows(table, np.array([0, 2, 2, 4]))
            return T.sum_squares(u) * 0.01 + T.sum_squares(rows)
        fd_check(f, [x, table])

    def test_nan_raises(self):
        with pytest.raises(T.NonFiniteError), np.errstate(invalid="ignore"):
            T.log(T.Tensor(np.array([-1.0])))

    def test_no_grad_records_nothing(self, rng):
        p = T.parameter(rng.normal((2,)))
        with T.no_grad():
            y = p * 3.0
        assert not y.requires_grad


class TestFiniteDiff:
    def test_square(self):
        x = T.parameter(np.array([3.0]))
        [g] = T.finite_diff_grad(lambda: float(x.data[0] ** 2), [x])
        assert abs(g[0] - 6.0) < 1e-8

    def test_constant(self):
        x = T.parameter(np.array([1.5]))
        [g] = T.finite_diff_grad(lambda: 2.0, [x])
        assert abs(g[0]) < 1e-9

    def test_sine(self):
        x = T.parameter(np.array([0.0]))
        [g] = T.finite_diff_grad(lambda: math.sin(x.data[0]), [x])
        assert abs(g[0] - 1.0) < 1e-9

    def test_restores_values(self, rng):
        x = T.parameter(rng.normal((4,)))
        before = x.data.copy()
        T.finite_diff_grad(lambda: float(np.sum(x.data ** 3)), [x])
        assert np.array_equal(x.data, before)
