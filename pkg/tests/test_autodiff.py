"""Tape engine tests: forward semantics, backward vs. finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcml.autodiff import (
    ExprGraph,
    GraphError,
    NumericOverflowError,
    check_gradient_fd,
)


def fd_gradient(f, x, h=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestForward:
    def test_identity(self):
        g = ExprGraph()
        u = g.leaf("u", (2,))
        g.output(u)
        (y,) = g.forward_eval({"u": [1.0, 2.0]})
        assert np.array_equal(y, [1.0, 2.0])

    def test_identity_affine(self):
        g = ExprGraph()
        u = g.leaf("u", (2,))
        w = g.constant(np.eye(2))
        b = g.constant([0.0, 0.0])
        y = g.matvec(w, u) + b
        g.output(y)
        (out,) = g.forward_eval({"u": [3.0, 4.0]})
        assert np.array_equal(out, [3.0, 4.0])

    def test_tanh_reference_scalar(self):
        g = ExprGraph()
        x = g.leaf("x", ())
        g.output(g.tanh(x))
        (y,) = g.forward_eval({"x": 2.0})
        # independent scalar oracle
        assert abs(float(y) - math.tanh(2.0)) < 1e-12
        assert abs(float(y) - 0.9640275801) < 1e-9

    def test_rerun_bit_identical(self):
        rng = np.random.default_rng(3)
        g = ExprGraph()
        u = g.leaf("u", (4,))
        w = g.constant(rng.standard_normal((3, 4)))
        y = g.matvec(w, u).tanh().square().sum()
        g.output(y)
        vals = {"u": rng.standard_normal(4)}
        (a,) = g.forward_eval(vals)
        (b,) = g.forward_eval(vals)
        assert float(a) == float(b)

    def test_shape_mismatch_names_node(self):
        g = ExprGraph()
        u = g.leaf("u", (2,))
        w = g.constant(np.zeros((3, 5)))
        with pytest.raises(GraphError, match="matvec"):
            g.matvec(w, u)

    def test_unbound_leaf(self):
        g = ExprGraph()
        g.output(g.leaf("u", (2,)))
        with pytest.raises(GraphError, match="unbound"):
            g.forward_eval({})

    def test_overflow_raises(self):
        g = ExprGraph()
        x = g.leaf("x", ())
        y = x.square().square().square().square().square()
        g.output(y)
        with pytest.raises(NumericOverflowError):
            g.forward_eval({"x": 1e30})


class TestBackward:
    def test_power_rule(self):
        g = ExprGraph()
        u = g.leaf("u", ())
        g.output(u.square())
        g.forward_eval({"u": 3.0})
        grads = g.backward(0, seed=1.0)
        assert abs(float(grads["u"]) - 6.0) < 1e-14

    def test_constant_gives_zero_gradient(self):
        g = ExprGraph()
        u = g.leaf("u", (3,))
        c = g.constant([1.0, 2.0, 3.0])
        g.output(c.sum())
        g.forward_eval({"u": np.zeros(3)})
        grads = g.backward()
        assert np.array_equal(grads["u"], np.zeros(3))

    def test_quadratic_form_matches_fd(self):
        g = ExprGraph()
        u = g.leaf("u", (3,))
        g.output(g.dot(u, u))
        u0 = np.array([1.0, 2.0, 3.0])
        g.forward_eval({"u": u0})
        grads = g.backward(0, seed=1.0)
        assert np.allclose(grads["u"], [2.0, 4.0, 6.0], atol=1e-12)

        def f(x):
            return float(g.forward_eval({"u": x})[0])

        assert np.allclose(grads["u"], fd_gradient(f, u0), rtol=1e-6)

    def test_backward_before_forward_is_stale(self):
        g = ExprGraph()
        g.output(g.leaf("u", (2,)).sum())
        with pytest.raises(GraphError, match="stale"):
            g.backward()

    def test_gradient_shapes_match_leaves(self):
        g = ExprGraph()
        w = g.leaf("w", (3, 2))
        x = g.leaf("x", (2,))
        g.output(g.matvec(w, x).sum())
        g.forward_eval({"w": np.ones((3, 2)), "x": np.ones(2)})
        grads = g.backward()
        assert grads["w"].shape == (3, 2)
        assert grads["x"].shape == (2,)

    def test_output_wrt_itself_is_seed(self):
        g = ExprGraph()
        u = g.leaf("u", (3,))
        g.output(u)
        g.forward_eval({"u": np.zeros(3)})
        seed = np.array([0.5, -1.0, 2.0])
        grads = g.backward(0, seed=seed)
        assert np.array_equal(grads["u"], seed)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=-5, max_value=5, allow_nan=False))
    def test_linear_in_seed(self, alpha):
        g = ExprGraph()
        u = g.leaf("u", (3,))
        g.output(g.matvec(g.constant([[1.0, 2, 0], [0, 1, 1]]), u).tanh())
        g.forward_eval({"u": [0.1, 0.2, 0.3]})
        s = np.array([1.0, -2.0])
        g1 = g.backward(0, seed=alpha * s)
        g2 = g.backward(0, seed=s)
        assert np.allclose(g1["u"], alpha * g2["u"], atol=1e-12)

    def test_sum_rule(self):
        # gradient of y1 + y2 equals sum of individual gradients
        def build(combined):
            g = ExprGraph()
            u = g.leaf("u", (2,))
            y1 = u.square().sum()
            y2 = g.dot(u, g.constant([3.0, -1.0]))
            if combined:
                g.output(y1 + y2)
            else:
                g.output(y1)
                g.output(y2)
            return g

        vals = {"u": np.array([0.7, -0.3])}
        g = build(True)
        g.forward_eval(vals)
        total = g.backward(0)["u"]
        g = build(False)
        g.forward_eval(vals)
        parts = g.backward(0)["u"] + g.backward(1)["u"]
        assert np.allclose(total, parts, atol=1e-14)


def _random_graph_for_op(op, rng):
    """One-op scalar-reduced graph with random leaf values."""
    g = ExprGraph()
    if op == "matvec":
        w = g.leaf("a", (3, 4))
        x = g.leaf("b", (4,))
        core = g.matvec(w, x)
        vals = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}
    elif op in ("add", "sub", "mul"):
        a = g.leaf("a", (5,))
        b = g.leaf("b", (5,))
        core = getattr(g, op)(a, b)
        vals = {"a": rng.standard_normal(5), "b": rng.standard_normal(5)}
    elif op == "scale":
        a = g.leaf("a", (5,))
        core = g.scale(float(rng.standard_normal()), a)
        vals = {"a": rng.standard_normal(5)}
    elif op in ("tanh", "softplus", "square"):
        a = g.leaf("a", (5,))
        core = getattr(g, op)(a)
        vals = {"a": rng.standard_normal(5)}
    elif op == "sum":
        a = g.leaf("a", (2, 3))
        core = g.sum(a)
        vals = {"a": rng.standard_normal((2, 3))}
    elif op == "dot":
        a = g.leaf("a", (4,))
        b = g.leaf("b", (4,))
        core = g.dot(a, b)
        vals = {"a": rng.standard_normal(4), "b": rng.standard_normal(4)}
    elif op == "concat":
        a = g.leaf("a", (2,))
        b = g.leaf("b", (3,))
        core = g.concat([a, b])
        vals = {"a": rng.standard_normal(2), "b": rng.standard_normal(3)}
    else:
        raise AssertionError(op)
    # reduce to a scalar through a nontrivial weighting so every entry matters
    if core.shape == ():
        g.output(core)
    else:
        w = rng.standard_normal(core.shape)
        g.output(g.sum(g.mul(core, g.constant(w))))
    return g, vals


ALL_OPS = ["matvec", "add", "sub", "mul", "scale", "tanh", "softplus", "square", "sum", "dot", "concat"]


@pytest.mark.parametrize("op", ALL_OPS)
def test_every_op_matches_fd_on_random_instances(op):
    rng = np.random.default_rng(12345)
    for _ in range(100):
        g, vals = _random_graph_for_op(op, rng)
        report = check_gradient_fd(g, vals, h=1e-6, tol=1e-4)
        assert report.passed, f"{op}: {report}"


class TestGradientCheck:
    def test_polynomial_graph(self):
        g = ExprGraph()
        u = g.leaf("u", (3,))
        y = u.square() + u * 2.0
        g.output(y.sum())
        report = check_gradient_fd(g, {"u": np.array([0.3, -1.2, 2.0])}, h=1e-6)
        assert report.max_rel_error < 1e-5

    def test_constant_graph_uses_absolute_error(self):
        g = ExprGraph()
        u = g.leaf("u", (2,))
        g.output(g.constant(4.0) * g.constant(1.0))
        report = check_gradient_fd(g, {"u": np.zeros(2)}, h=1e-6)
        assert report.passed
        assert report.max_rel_error < 1e-12

    def test_two_layer_tanh_network(self):
        rng = np.random.default_rng(7)
        g = ExprGraph()
        w1 = g.leaf("w1", (6, 3))
        b1 = g.leaf("b1", (6,))
        w2 = g.leaf("w2", (2, 6))
        b2 = g.leaf("b2", (2,))
        x = g.constant(rng.standard_normal(3))
        h = (g.matvec(w1, x) + b1).tanh()
        y = g.matvec(w2, h) + b2
        g.output(y.square().sum())
        vals = {
            "w1": rng.standard_normal((6, 3)),
            "b1": rng.standard_normal(6),
            "w2": rng.standard_normal((2, 6)),
            "b2": rng.standard_normal(2),
        }
        report = check_gradient_fd(g, vals, h=1e-6, tol=1e-4)
        assert report.passed, str(report)

    def test_bad_step_rejected(self):
        g = ExprGraph()
        g.output(g.leaf("u", ()).square())
        with pytest.raises(ValueError):
            check_gradient_fd(g, {"u": 1.0}, h=0.0)
