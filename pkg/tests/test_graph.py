"""Scalar-graph autodiff: values, input derivatives, parameter gradients.

Oracles are finite differences, straight-line reimplementations of the
forward pass, and analytic derivatives of closed-form functions.
"""

import numpy as np
import pytest

import ntkadapt.graph as ag
from ntkadapt.graph import (AutodiffError, DerivativeRequest,
                            DimensionMismatch, GraphBuilder,
                            UnsupportedDerivative)
from ntkadapt.model import MlpConfig, compile as compile_model, init_xavier


def _square_graph():
    g = GraphBuilder(n_inputs=1, n_params=0)
    x = g.input(0)
    return g.build(g.mul(x, x))


def _linear_graph():
    g = GraphBuilder(n_inputs=1, n_params=1)
    return g.build(g.mul(g.param(0), g.input(0)))


def test_evaluate_square():
    gr = _square_graph()
    assert ag.evaluate(gr, [3.0], np.zeros(0)) == 9.0


def test_evaluate_scaled_input():
    gr = _linear_graph()
    assert ag.evaluate(gr, [2.0], np.array([5.0])) == 10.0


def test_evaluate_matches_straight_line_mlp():
    cfg = MlpConfig(input_dim=1, hidden=(7,), output_dim=1)
    theta = init_xavier(cfg, seed=0)
    gr = compile_model(cfg)[0]
    w0 = theta.block("W0")
    b0 = theta.block("b0")
    w1 = theta.block("W1")
    b1 = theta.block("b1")
    x = 0.5
    expected = float((w1 @ np.tanh(w0[:, 0] * x + b0))[0] + b1[0])
    assert ag.evaluate(gr, [x], theta.values) == pytest.approx(
        expected, rel=1e-14)


def test_second_derivative_of_cube():
    g = GraphBuilder(n_inputs=1, n_params=0)
    x = g.input(0)
    gr = g.build(g.ipow(x, 3))
    d2 = ag.input_derivative(gr, [2.0], np.zeros(0),
                             DerivativeRequest((2,)))
    assert d2 == pytest.approx(12.0, rel=1e-12)


def test_mixed_second_derivative_analytic():
    # u(x,t) = sin(pi x) cos(2 pi t); u_tt(0.5, 0) = -4 pi^2.
    g = GraphBuilder(n_inputs=2, n_params=0)
    pi = g.const(np.pi)
    two_pi = g.const(2.0 * np.pi)
    u = g.mul(g.sin(g.mul(pi, g.input(0))),
              g.cos(g.mul(two_pi, g.input(1))))
    gr = g.build(u)
    d2t = ag.input_derivative(gr, [0.5, 0.0], np.zeros(0),
                              DerivativeRequest((0, 2)))
    assert d2t == pytest.approx(-4.0 * np.pi ** 2, rel=1e-12)
    # Cross term u_xt at a generic point, against the closed form.
    x0, t0 = 0.3, 0.7
    dxt = ag.input_derivative(gr, [x0, t0], np.zeros(0),
                              DerivativeRequest((1, 1)))
    expected = (np.pi * np.cos(np.pi * x0)
                * (-2.0 * np.pi) * np.sin(2.0 * np.pi * t0))
    assert dxt == pytest.approx(expected, rel=1e-10)


def _mlp_fixture(seed=0):
    cfg = MlpConfig(input_dim=1, hidden=(9,), output_dim=1)
    theta = init_xavier(cfg, seed=seed)
    return compile_model(cfg)[0], theta.values


def test_mlp_second_input_derivative_matches_fd():
    gr, theta = _mlp_fixture()
    x0 = 0.3
    req1 = DerivativeRequest((1,))
    d2 = ag.input_derivative(gr, [x0], theta, DerivativeRequest((2,)))
    h = 1e-4
    fd = (ag.input_derivative(gr, [x0 + h], theta, req1)
          - ag.input_derivative(gr, [x0 - h], theta, req1)) / (2.0 * h)
    assert d2 == pytest.approx(fd, rel=1e-6)


def test_parameter_gradient_linear_model():
    # u = theta0 x + theta1; gradient at x=2 is (2, 1).
    g = GraphBuilder(n_inputs=1, n_params=2)
    gr = g.build(g.add(g.mul(g.param(0), g.input(0)), g.param(1)))
    grad = ag.parameter_gradient(gr, [2.0], np.array([3.0, 4.0]),
                                 DerivativeRequest(()))
    assert np.allclose(grad, [2.0, 1.0])


def test_parameter_gradient_through_second_derivative():
    # u = theta0 x^2; u_xx = 2 theta0, so the gradient is (2,).
    g = GraphBuilder(n_inputs=1, n_params=1)
    gr = g.build(g.mul(g.param(0), g.ipow(g.input(0), 2)))
    grad = ag.parameter_gradient(gr, [1.7], np.array([5.0]),
                                 DerivativeRequest((2,)))
    assert np.allclose(grad, [2.0])


@pytest.mark.parametrize("orders", [(), (1,), (2,)])
def test_mlp_parameter_gradient_matches_fd(orders):
    gr, theta = _mlp_fixture(seed=3)
    x = [0.4]
    req = DerivativeRequest(orders)
    grad = ag.parameter_gradient(gr, x, theta, req)
    h = 1e-6
    for j in range(0, len(theta), 5):
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        fd = (ag.input_derivative(gr, x, tp, req)
              - ag.input_derivative(gr, x, tm, req)) / (2.0 * h)
        scale = max(abs(fd), 1e-8)
        assert abs(grad[j] - fd) / scale < 1e-5


def test_linearity_of_derivatives():
    # Derivative of a*u + b*v equals the same combination of derivatives.
    rng = np.random.default_rng(5)
    a, b = 2.5, -1.25

    def build(combined):
        g = GraphBuilder(n_inputs=1, n_params=2)
        x = g.input(0)
        u = g.mul(g.param(0), g.sin(x))
        v = g.mul(g.param(1), g.exp(x))
        if combined:
            out = g.add(g.mul(g.const(a), u), g.mul(g.const(b), v))
            return g.build(out)
        return g.build(u), g.build(v)

    gc = build(True)
    gu, gv = build(False)
    theta = rng.standard_normal(2)
    for orders in [(), (1,), (2,)]:
        req = DerivativeRequest(orders)
        got = ag.input_derivative(gc, [0.8], theta, req)
        want = (a * ag.input_derivative(gu, [0.8], theta, req)
                + b * ag.input_derivative(gv, [0.8], theta, req))
        assert got == pytest.approx(want, rel=1e-13, abs=1e-13)


def test_eval_batch_matches_pointwise():
    gr, theta = _mlp_fixture(seed=1)
    xs = np.linspace(-1.0, 1.0, 23).reshape(-1, 1)
    v, d1, d2 = ag.eval_batch(gr, xs, theta, direction=[1.0], order=2)
    for i, x in enumerate(xs):
        assert v[i] == ag.evaluate(gr, x, theta)
        assert d1[i] == pytest.approx(
            ag.input_derivative(gr, x, theta, DerivativeRequest((1,))),
            rel=1e-14)
        assert d2[i] == pytest.approx(
            ag.input_derivative(gr, x, theta, DerivativeRequest((2,))),
            rel=1e-14)


def test_grad_batch_sums_pointwise_gradients():
    gr, theta = _mlp_fixture(seed=2)
    xs = np.linspace(0.1, 0.9, 7).reshape(-1, 1)
    seeds = np.arange(1.0, 8.0)
    summed = ag.grad_batch(gr, xs, theta, direction=[1.0], order=2,
                           seed_d2=seeds, sum_points=True)
    per_point = ag.grad_batch(gr, xs, theta, direction=[1.0], order=2,
                              seed_d2=seeds, sum_points=False)
    assert np.allclose(summed, per_point.sum(axis=1), rtol=1e-13)


def test_repeat_evaluation_is_bit_identical():
    gr, theta = _mlp_fixture(seed=4)
    xs = np.linspace(0.0, 1.0, 11).reshape(-1, 1)
    a = ag.eval_batch(gr, xs, theta, direction=[1.0], order=2)
    b = ag.eval_batch(gr, xs, theta, direction=[1.0], order=2)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_forward_state_reuse_matches_fresh_sweeps():
    gr, theta = _mlp_fixture(seed=6)
    xs = np.linspace(0.0, 1.0, 37).reshape(-1, 1)
    states = ag.forward_states(gr, xs, theta, direction=[1.0], order=2)
    seeds = [(np.ones(37), None, None), (None, None, np.arange(37.0))]
    reused = ag.grad_from_states(gr, states, 2, seeds)
    fresh = ag.grad_batch_multi(gr, xs, theta, [1.0], 2, seeds)
    for x, y in zip(reused, fresh):
        assert np.array_equal(x, y)


def test_order_above_two_rejected():
    with pytest.raises(UnsupportedDerivative):
        DerivativeRequest((3,))
    with pytest.raises(UnsupportedDerivative):
        DerivativeRequest((2, 1))


def test_dimension_mismatch_errors():
    gr = _linear_graph()
    with pytest.raises(DimensionMismatch):
        ag.eval_batch(gr, np.zeros((3, 2)), np.array([1.0]))
    with pytest.raises(DimensionMismatch):
        ag.eval_batch(gr, np.zeros((3, 1)), np.array([1.0, 2.0]))


def test_builder_rejects_forward_references():
    g = GraphBuilder(n_inputs=1, n_params=1)
    x = g.input(0)
    with pytest.raises(AutodiffError):
        g.add(x, 99)
    with pytest.raises(DimensionMismatch):
        g.param(1)
    with pytest.raises(DimensionMismatch):
        g.fmap(x, 5, x)


def test_dot_node_matches_fmap_chain():
    # The fused inner product must agree with the chained multiply-adds.
    rng = np.random.default_rng(9)
    L = 6
    theta = rng.standard_normal(L)
    xs = rng.standard_normal((4, 1))

    def acts(g):
        x = g.input(0)
        nodes = [g.tanh(x)]
        for _ in range(L - 1):
            nodes.append(g.tanh(nodes[-1]))
        return nodes

    g1 = GraphBuilder(n_inputs=1, n_params=L)
    n1 = acts(g1)
    gr_dot = g1.build(g1.dot(n1[0], L, 0))

    g2 = GraphBuilder(n_inputs=1, n_params=L)
    n2 = acts(g2)
    s = g2.const(0.0)
    for j in range(L):
        s = g2.fmap(s, j, n2[j])
    gr_chain = g2.build(s)

    for gr in (gr_dot,):
        v1 = ag.eval_batch(gr_dot, xs, theta, direction=[1.0], order=2)
        v2 = ag.eval_batch(gr_chain, xs, theta, direction=[1.0], order=2)
        for a, b in zip(v1, v2):
            assert np.allclose(a, b, rtol=1e-14)
    seeds = np.arange(1.0, 5.0)
    for kw in (dict(seed_v=seeds), dict(seed_d1=seeds),
               dict(seed_d2=seeds)):
        a = ag.grad_batch(gr_dot, xs, theta, direction=[1.0], order=2,
                          sum_points=True, **kw)
        b = ag.grad_batch(gr_chain, xs, theta, direction=[1.0], order=2,
                          sum_points=True, **kw)
        assert np.allclose(a, b, rtol=1e-13)
