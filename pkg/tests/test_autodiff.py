"""Autodiff tape: every primitive against central finite differences, plus
graph mechanics (accumulation, zero grads, double backward)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_ser import autodiff as ad
from fewshot_ser.autodiff import GraphError, NonFiniteError, Tensor


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        hi = f(x)
        flat_x[i] = orig - eps
        lo = f(x)
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2 * eps)
    return g


def check_unary(op, x, numeric_fn=None, atol=1e-7):
    t = Tensor(x.copy(), requires_grad=True)
    loss = ad.tsum(ad.mul(op(t), op(t)))  # nonlinear reduction exercises chain
    (g,) = ad.grad_of(loss, [t])
    fn = numeric_fn or (lambda arr: float(np.sum(op(Tensor(arr)).data ** 2)))
    ng = numeric_grad(fn, x.copy())
    np.testing.assert_allclose(g.data, ng, atol=atol)


class TestElementwise:
    def test_add_sub_mul_broadcast(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        loss = ad.tsum(ad.mul(ad.add(a, b), ad.sub(a, b)))
        ga, gb = ad.grad_of(loss, [a, b])
        # d/da sum(a^2 - b^2) = 2a ; d/db = -2b summed over broadcast axis
        np.testing.assert_allclose(ga.data, 2 * a.data, atol=1e-12)
        np.testing.assert_allclose(gb.data, -2 * 3 * b.data, atol=1e-12)

    def test_div_powi_exp_log_sqrt(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.5, 2.0, size=(2, 5))
        check_unary(lambda t: ad.div(t, 3.0), x)
        check_unary(lambda t: ad.powi(t, 3.0), x)
        check_unary(ad.exp, x)
        check_unary(ad.log, x)
        check_unary(ad.sqrt, x)

    def test_relu_grad_is_mask(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        (g,) = ad.grad_of(ad.tsum(ad.relu(x)), [x])
        np.testing.assert_array_equal(g.data, [0.0, 0.0, 1.0])

    def test_maximum_const(self):
        x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
        out = ad.maximum_const(x, 0.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 3.0])
        (g,) = ad.grad_of(ad.tsum(out), [x])
        np.testing.assert_array_equal(g.data, [0.0, 1.0, 1.0])

    def test_operator_sugar(self):
        a = Tensor(np.array(2.0), requires_grad=True)
        out = (-a + 3.0) * a - a / 2.0 + (1.0 - a)
        assert out.item() == pytest.approx((-2 + 3) * 2 - 1.0 + (1 - 2))


class TestShapeOps:
    def test_reshape_permute_roundtrip_grad(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        out = ad.permute(ad.reshape(x, (3, 2, 4)), (2, 0, 1))
        loss = ad.tsum(ad.mul(out, out))
        (g,) = ad.grad_of(loss, [x])
        np.testing.assert_allclose(g.data, 2 * x.data, atol=1e-12)

    def test_tsum_axis_keepdims(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = ad.tsum(x, axis=1, keepdims=True)
        assert out.shape == (2, 1)
        (g,) = ad.grad_of(ad.tsum(ad.mul(out, out)), [x])
        expected = np.repeat(2 * x.data.sum(axis=1, keepdims=True), 3, axis=1)
        np.testing.assert_allclose(g.data, expected, atol=1e-12)

    def test_mean_matches_numpy(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 5, 6))
        out = ad.mean(Tensor(x), axis=(0, 2), keepdims=True)
        np.testing.assert_allclose(out.data, x.mean(axis=(0, 2), keepdims=True))

    def test_concat_narrow_pad_adjoints(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        cat = ad.concat([a, b], axis=1)
        assert cat.shape == (2, 5)
        loss = ad.tsum(ad.mul(cat, cat))
        ga, gb = ad.grad_of(loss, [a, b])
        np.testing.assert_allclose(ga.data, 2 * a.data, atol=1e-12)
        np.testing.assert_allclose(gb.data, 2 * b.data, atol=1e-12)
        mid = ad.narrow(cat, 1, 1, 3)
        assert mid.shape == (2, 3)
        np.testing.assert_array_equal(mid.data, cat.data[:, 1:4])
        padded = ad.pad_zeros(a, 0, 1, 2)
        assert padded.shape == (5, 3)
        np.testing.assert_array_equal(padded.data[1:3], a.data)

    def test_expand_grad_sums(self):
        x = Tensor(np.array([[1.0], [2.0]]), requires_grad=True)
        out = ad.expand(x, (2, 4))
        (g,) = ad.grad_of(ad.tsum(out), [x])
        np.testing.assert_array_equal(g.data, [[4.0], [4.0]])


class TestMatmul:
    def test_matmul_grad_2d(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        loss = ad.tsum(ad.mul(ad.matmul(a, b), ad.matmul(a, b)))

        def f_a(arr):
            return float(np.sum((arr @ b.data) ** 2))

        def f_b(arr):
            return float(np.sum((a.data @ arr) ** 2))

        ga, gb = ad.grad_of(loss, [a, b])
        np.testing.assert_allclose(ga.data, numeric_grad(f_a, a.data.copy()), atol=1e-6)
        np.testing.assert_allclose(gb.data, numeric_grad(f_b, b.data.copy()), atol=1e-6)

    def test_matmul_batched_broadcast(self):
        rng = np.random.default_rng(6)
        a = Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        loss = ad.tsum(ad.mul(ad.matmul(a, b), 1.0))
        ga, gb = ad.grad_of(loss, [a, b])
        assert ga.shape == a.shape and gb.shape == b.shape

        def f_b(arr):
            return float(np.sum(a.data @ arr))

        np.testing.assert_allclose(gb.data, numeric_grad(f_b, b.data.copy()), atol=1e-6)

    def test_swap_last(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        np.testing.assert_array_equal(
            ad.swap_last(Tensor(x)).data, x.transpose(0, 2, 1)
        )


class TestConvPool:
    def test_im2col_col2im_adjoint(self):
        """<im2col(x), y> == <x, col2im(y)> for random x, y (linear adjoint)."""
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 5, 6))
        cols = ad.im2col(Tensor(x), (3, 3), 1)
        y = rng.normal(size=cols.shape)
        back = ad.col2im(Tensor(y), x.shape, (3, 3), 1)
        lhs = float(np.sum(cols.data * y))
        rhs = float(np.sum(x * back.data))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_im2col_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        cols = ad.im2col(Tensor(x), (3, 3), 1).data
        # patch centered at (0,0) with zero padding
        expected = np.array([0, 0, 0, 0, 0, 1, 0, 4, 5], dtype=float)
        np.testing.assert_array_equal(cols[0, 0], expected)

    def test_max_pool2_values_and_ties(self):
        x = np.array([[[[1.0, 2.0], [2.0, 0.0]], [[5.0, 5.0], [5.0, 5.0]]]])
        t = Tensor(x, requires_grad=True)
        out = ad.max_pool2(t)
        np.testing.assert_array_equal(out.data, [[[[2.0]], [[5.0]]]])
        (g,) = ad.grad_of(ad.tsum(out), [t])
        # tie between (0,1) and (1,0) in channel 0 goes to the lowest
        # row-major index; channel 1 ties all go to (0,0)
        np.testing.assert_array_equal(
            g.data, [[[[0.0, 1.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]]]]
        )

    def test_max_pool2_odd_edges_dropped(self):
        x = np.arange(15.0).reshape(1, 1, 3, 5)
        out = ad.max_pool2(Tensor(x))
        assert out.shape == (1, 1, 1, 2)
        np.testing.assert_array_equal(out.data.reshape(-1), [6.0, 8.0])

    def test_upsample2_sum_pool2_adjoint(self):
        rng = np.random.default_rng(8)
        small = rng.normal(size=(2, 3, 2, 2))
        big = rng.normal(size=(2, 3, 5, 5))
        up = ad.upsample2(Tensor(small), (5, 5))
        down = ad.sum_pool2(Tensor(big))
        lhs = float(np.sum(up.data * big))
        rhs = float(np.sum(small * down.data))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_adaptive_avg_pool_matches_direct(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 7, 10))
        out = ad.adaptive_avg_pool(Tensor(x), (3, 3))
        assert out.shape == (2, 3, 3, 3)
        # block (i, j) averages rows [i*7//3, ceil((i+1)*7/3)) etc.
        for i in range(3):
            for j in range(3):
                r0, r1 = (i * 7) // 3, -(-((i + 1) * 7) // 3)
                c0, c1 = (j * 10) // 3, -(-((j + 1) * 10) // 3)
                np.testing.assert_allclose(
                    out.data[:, :, i, j], x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
                )

    def test_conv_grad_finite_diff(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 4, 4))
        t = Tensor(x.copy(), requires_grad=True)
        loss = ad.tsum(ad.mul(ad.im2col(t, (3, 3), 1), 1.0))

        def f(arr):
            return float(np.sum(ad.im2col(Tensor(arr), (3, 3), 1).data))

        (g,) = ad.grad_of(loss, [t])
        np.testing.assert_allclose(g.data, numeric_grad(f, x.copy()), atol=1e-6)


class TestBackwardMechanics:
    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        loss = ad.add(ad.mul(x, x), ad.mul(x, 2.0))  # x^2 + 2x
        (g,) = ad.grad_of(loss, [x])
        assert g.item() == pytest.approx(2 * 3.0 + 2.0)

    def test_unreached_param_gets_zero_grad(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = Tensor(np.ones(4), requires_grad=True)
        (gx, gy) = ad.grad_of(ad.mul(x, x), [x, y])
        assert gy.shape == (4,)
        np.testing.assert_array_equal(gy.data, np.zeros(4))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            ad.backward(ad.mul(x, x), [x])

    def test_double_backward_simple(self):
        # d/dx (x^3) = 3x^2, d2/dx2 = 6x
        x = Tensor(np.array(2.0), requires_grad=True)
        (g,) = ad.grad_of(ad.powi(x, 3.0), [x], build_graph=True)
        (gg,) = ad.grad_of(g, [x])
        assert g.item() == pytest.approx(12.0)
        assert gg.item() == pytest.approx(12.0)  # 6 * 2

    def test_double_backward_through_matmul_relu(self):
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(3,)).reshape(1, 3))
        loss = ad.tsum(ad.relu(ad.matmul(x, w)))
        (g,) = ad.grad_of(loss, [w], build_graph=True)
        gnorm = ad.tsum(ad.mul(g, g))
        (hg,) = ad.grad_of(gnorm, [w])

        def f(arr):
            gg = numeric_grad(
                lambda a: float(np.sum(np.maximum(x.data @ a, 0.0))), arr.copy()
            )
            return float(np.sum(gg**2))

        np.testing.assert_allclose(hg.data, numeric_grad(f, w.data.copy()), atol=1e-4)

    def test_detach_cuts_graph(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        out = ad.mul(x.detach(), x)
        (g,) = ad.grad_of(out, [x])
        assert g.item() == pytest.approx(2.0)  # only the live branch


class TestFiniteness:
    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan]))

    def test_overflow_in_exp_rejected(self):
        with np.errstate(over="ignore"):
            with pytest.raises(NonFiniteError):
                ad.exp(Tensor(np.array([1000.0])))

    def test_log_of_zero_rejected(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteError):
                ad.log(Tensor(np.array([0.0])))


@settings(max_examples=30, deadline=None)
@given(
    data=st.lists(
        st.floats(min_value=-10, max_value=10, allow_nan=False),
        min_size=2,
        max_size=8,
    )
)
def test_sum_of_squares_grad_property(data):
    """d/dx sum(x^2) = 2x for arbitrary well-scaled inputs."""
    x = Tensor(np.array(data), requires_grad=True)
    (g,) = ad.grad_of(ad.tsum(ad.mul(x, x)), [x])
    np.testing.assert_allclose(g.data, 2 * np.array(data), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(
    rows=st.integers(1, 4),
    inner=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_matmul_value_matches_numpy(rows, inner, cols, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(rows, inner)), rng.normal(size=(inner, cols))
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b)
