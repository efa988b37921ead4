import math

import numpy as np
import pytest

from fbsde_pricer.autodiff import (
    Tape,
    backward,
    concat,
    directional_value_and_grad,
    fd_directional,
    norm_cdf,
)
from fbsde_pricer.errors import ConfigError

from gradcheck import numeric_grad, rel_err


class TestRecord:
    def test_add(self):
        t = Tape()
        a, b = t.var(2.0), t.var(3.0)
        i = t.record("add", (a, b))
        assert t.value(i) == 5.0
        assert t.local_grads(i) == (1.0, 1.0)

    def test_mul(self):
        t = Tape()
        a, b = t.var(2.0), t.var(3.0)
        i = t.record("mul", (a, b))
        assert t.value(i) == 6.0
        assert t.local_grads(i) == (3.0, 2.0)

    def test_softplus_at_zero(self):
        t = Tape()
        i = t.record("softplus", (t.var(0.0),))
        assert t.value(i) == pytest.approx(math.log(2.0), abs=1e-15)
        assert t.local_grads(i)[0] == pytest.approx(0.5, abs=1e-15)

    def test_unknown_op_rejected(self):
        t = Tape()
        a = t.var(1.0)
        with pytest.raises(ConfigError):
            t.record("frobnicate", (a,))

    def test_parents_precede_node(self):
        t = Tape()
        a, b = t.var(1.0), t.var(2.0)
        i = t.record("mul", (a, b))
        assert all(p < i for p in t.nodes[i].parents)


class TestBackward:
    def test_product(self):
        t = Tape()
        x, y = t.variable(2.0), t.variable(3.0)
        f = x * y
        g = backward(t, f.i)
        assert g[x.i] == 3.0
        assert g[y.i] == 2.0

    def test_exp_at_zero(self):
        t = Tape()
        x = t.variable(0.0)
        g = backward(t, x.exp().i)
        assert g[x.i] == 1.0

    def test_tanh_plus_sin_matches_fd(self):
        t = Tape()
        x = t.variable(0.3)
        f = x.tanh() + x.sin()
        g = backward(t, f.i)[x.i]
        fd = numeric_grad(lambda v: math.tanh(v[0]) + math.sin(v[0]), [0.3])[0]
        assert rel_err(g, fd) < 1e-6

    def test_dangling_leaf_gets_zero(self):
        t = Tape()
        x = t.variable(1.0)
        unused = t.variable(5.0)
        g = backward(t, x.exp().i)
        assert g[unused.i] == 0.0

    def test_fan_out_accumulates(self):
        t = Tape()
        x = t.variable(1.5)
        f = x * x + x  # df/dx = 2x + 1
        assert backward(t, f.i)[x.i] == pytest.approx(4.0, abs=1e-15)

    def test_determinism_bitwise(self):
        def run():
            t = Tape()
            x = t.variable(0.7)
            y = t.variable(-0.2)
            f = (x.sin() * y.exp() + (x * y).tanh()).pow2()
            g = backward(t, f.i)
            return g[x.i], g[y.i]

        g1, g2 = run(), run()
        assert g1 == g2  # bitwise


UNARY_OPS = ["exp", "ln", "sin", "cos", "tanh", "gelu", "silu",
             "softplus", "sqrt", "abs", "pow2", "normcdf"]


class TestPrimitiveGradients:
    @pytest.mark.parametrize("op", UNARY_OPS)
    @pytest.mark.parametrize("x0", [0.17, 0.9, 2.3])
    def test_unary_matches_fd(self, op, x0):
        t = Tape()
        x = t.variable(x0)
        f = getattr(x, op)()
        g = backward(t, f.i)[x.i]

        def scalar_f(v):
            tt = Tape()
            return getattr(tt.variable(v[0]), op)().value

        fd = numeric_grad(scalar_f, [x0])[0]
        assert rel_err(g, fd) < 1e-4

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "max"])
    def test_binary_matches_fd(self, op):
        a0, b0 = 1.3, 0.6
        t = Tape()
        a, b = t.var(a0), t.var(b0)
        i = t.record(op, (a, b))
        g = backward(t, i)

        def scalar_f(v):
            tt = Tape()
            return tt.value(tt.record(op, (tt.var(v[0]), tt.var(v[1]))))

        fd = numeric_grad(scalar_f, [a0, b0])
        assert rel_err(np.array([g[a], g[b]]), fd) < 1e-4

    def test_max_tie_routes_to_first_parent(self):
        t = Tape()
        a, b = t.var(1.0), t.var(1.0)
        i = t.record("max", (a, b))
        g = backward(t, i)
        assert (g[a], g[b]) == (1.0, 0.0)


class TestDual:
    def test_mul_chain_rule_exact(self):
        t = Tape()
        a = t.variable(2.0, tangent=0.5)
        b = t.variable(3.0, tangent=-1.0)
        c = a * b
        assert c.tangent == 0.5 * 3.0 + 2.0 * (-1.0)

    def test_square_direction(self):
        t = Tape()

        def u(xs):
            return xs[0].pow2()

        val, dot = directional_value_and_grad(t, u, [3.0], [1.0])
        assert val.value == 9.0
        assert dot.value == 6.0

    def test_constant_has_zero_direction(self):
        t = Tape()

        def u(xs):
            return xs[0] * 0.0 + 4.2

        _, dot = directional_value_and_grad(t, u, [3.0], [1.0])
        assert dot.value == 0.0

    def test_tangent_is_differentiable(self):
        # u = a * X^2: dU/dX = 2aX, and d/da of that is 2X.
        t = Tape()
        a = t.variable(1.5)

        def u(xs):
            return a * xs[0].pow2()

        _, dot = directional_value_and_grad(t, u, [3.0], [1.0])
        g = backward(t, dot.i)
        assert g[a.i] == pytest.approx(6.0, abs=1e-12)

    @pytest.mark.parametrize("op", UNARY_OPS)
    def test_tangent_matches_fd(self, op):
        x0 = 0.63

        def plain(x):
            tt = Tape()
            return getattr(tt.variable(x), op)().value

        t = Tape()
        x = t.variable(x0, tangent=1.0)
        dot = getattr(x, op)().tangent
        fd = fd_directional(plain, [x0], [1.0])
        assert rel_err(dot, fd) < 1e-4

    def test_second_order_two_param_toy_net(self):
        # u(X) = w2 * tanh(w1 * X); check d/dw of (du/dX) against a
        # finite-difference-of-finite-difference oracle.
        w0 = np.array([0.8, 1.3])
        x0 = 0.4

        def inner_fd(w):
            def f(x):
                return w[1] * math.tanh(w[0] * x)
            h = 1e-5
            return (f(x0 + h) - f(x0 - h)) / (2 * h)

        oracle = numeric_grad(inner_fd, w0, h=1e-4)

        t = Tape()
        w1, w2 = t.variable(w0[0]), t.variable(w0[1])

        def u(xs):
            return w2 * (w1 * xs[0]).tanh()

        _, dot = directional_value_and_grad(t, u, [x0], [1.0])
        g = backward(t, dot.i)
        got = np.array([g[w1.i], g[w2.i]])
        assert rel_err(got, oracle) < 1e-3


class TestStructuralOps:
    def test_matmul_matrix_vector(self):
        rng = np.random.default_rng(0)
        A0 = rng.normal(size=(4, 3))
        v0 = rng.normal(size=3)

        t = Tape()
        A, v = t.variable(A0), t.variable(v0)
        out = (A @ v).sum()
        g = backward(t, out.i)

        def f(flat):
            A_, v_ = flat[:12].reshape(4, 3), flat[12:]
            return float((A_ @ v_).sum())

        fd = numeric_grad(f, np.concatenate([A0.ravel(), v0]))
        got = np.concatenate([g[A.i].ravel(), g[v.i]])
        assert rel_err(got, fd) < 1e-6

    def test_matmul_matrix_matrix(self):
        rng = np.random.default_rng(1)
        A0 = rng.normal(size=(3, 2))
        B0 = rng.normal(size=(2, 4))

        t = Tape()
        A, B = t.variable(A0), t.variable(B0)
        out = (A @ B).sum()
        g = backward(t, out.i)

        def f(flat):
            return float((flat[:6].reshape(3, 2) @ flat[6:].reshape(2, 4)).sum())

        fd = numeric_grad(f, np.concatenate([A0.ravel(), B0.ravel()]))
        got = np.concatenate([g[A.i].ravel(), g[B.i].ravel()])
        assert rel_err(got, fd) < 1e-6

    def test_concat_and_take(self):
        t = Tape()
        a = t.variable(np.array([[1.0, 2.0]]))
        b = t.variable(np.array([[3.0]]))
        c = concat([a, b])
        assert c.value.tolist() == [[1.0, 2.0, 3.0]]
        out = c.reshape((3,)).take(2)
        g = backward(t, out.i)
        assert g[b.i].tolist() == [[1.0]]
        assert g[a.i].tolist() == [[0.0, 0.0]]

    def test_repeat_backward_sums_groups(self):
        t = Tape()
        v = t.variable(np.array([1.0, 2.0]))
        out = v.repeat(3).sum()
        g = backward(t, out.i)
        assert g[v.i].tolist() == [3.0, 3.0]

    def test_broadcast_column_times_row(self):
        # (n,1) * (k,) -> (n,k), gradients reduce over broadcast axes
        t = Tape()
        x = t.variable(np.array([[2.0], [3.0]]))
        w = t.variable(np.array([1.0, 4.0]))
        out = (x * w).sum()
        g = backward(t, out.i)
        assert g[x.i].tolist() == [[5.0], [5.0]]
        assert g[w.i].tolist() == [5.0, 5.0]

    def test_array_tangent_through_matmul(self):
        rng = np.random.default_rng(2)
        W0 = rng.normal(size=(3, 2))
        x0 = rng.normal(size=(5, 3))
        d0 = np.zeros_like(x0)
        d0[:, 1] = 1.0  # direction: second input channel

        t = Tape()
        W = t.variable(W0)
        x = t.variable(x0, tangent=d0)
        y = (x @ W).tanh().sum()
        dot = y.tangent

        h = 1e-6
        fd = (np.tanh((x0 + h * d0) @ W0).sum() - np.tanh((x0 - h * d0) @ W0).sum()) / (2 * h)
        assert rel_err(dot, fd) < 1e-6
