"""Residual assemblies: layouts, collocation, residual values, Jacobians,
Jacobian-vector products, evaluation counters."""

import numpy as np
import pytest

from ntkadapt.model import init_xavier
from ntkadapt.problems import (CollocationSet, GroupLayout, LinearResidualOp,
                               ProblemError, QUADRATIC_THETA_STAR,
                               ResidualOp, SchemaError, assemble_residual,
                               exact_solution_error, n_params, poisson1d,
                               predict, quadratic_regression,
                               residual_jacobian, residual_jvp,
                               residual_jvp_groups, sample_collocation,
                               wave1d)


def _poisson_pts(spec, n_d=4, seed=0):
    layout = GroupLayout((("D", n_d), ("B1", 1), ("B2", 1)))
    return layout, sample_collocation(spec, layout, seed)


def _grid(res=101):
    xs = np.linspace(0.0, 1.0, res)
    return np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)


def test_layout_validation_and_addressing():
    layout = GroupLayout((("D", 3), ("B1", 2)))
    assert layout.n == 5
    assert layout.names == ("D", "B1")
    assert layout.index_range("B1") == (3, 5)
    assert layout.count("D") == 3
    with pytest.raises(SchemaError):
        GroupLayout((("D", 1), ("D", 2)))
    with pytest.raises(SchemaError):
        GroupLayout((("D", -1),))
    with pytest.raises(SchemaError):
        layout.index_range("nope")


def test_collocation_set_validates_counts():
    layout = GroupLayout((("D", 2), ("B1", 1)))
    with pytest.raises(SchemaError):
        CollocationSet(points={"D": np.zeros((2, 1))}, layout=layout)
    with pytest.raises(SchemaError):
        CollocationSet(points={"D": np.zeros((3, 1)),
                               "B1": np.zeros((1, 1))}, layout=layout)


def test_sample_collocation_deterministic_and_on_facets():
    spec = poisson1d()
    layout, pts = _poisson_pts(spec, n_d=10, seed=5)
    again = sample_collocation(spec, layout, 5)
    assert np.array_equal(pts.group("D"), again.group("D"))
    assert np.all((pts.group("D") > 0.0) & (pts.group("D") < 1.0))
    assert np.all(pts.group("B1") == 0.0)
    assert np.all(pts.group("B2") == 1.0)
    with pytest.raises(SchemaError):
        sample_collocation(spec, GroupLayout((("D_i", 1),)), 0)


def test_wave_sampler_facets():
    spec = wave1d()
    layout = GroupLayout((("D", 8), ("D_i", 4), ("B_i", 4),
                          ("B1", 3), ("B2", 3)))
    pts = sample_collocation(spec, layout, 1)
    assert np.all(pts.group("D_i")[:, 1] == 0.0)
    assert np.all(pts.group("B_i")[:, 1] == 0.0)
    assert np.all(pts.group("B1")[:, 0] == 0.0)
    assert np.all(pts.group("B2")[:, 0] == 1.0)


def test_quadratic_residual_closed_form():
    # Predictor (theta (.) theta) . (1, x, x^2) at theta = (2, 4, 8) and a
    # noiseless target replaced by the stored y values.
    spec = quadratic_regression()
    layout = GroupLayout((("D", 3),))
    pts = sample_collocation(spec, layout, 0)
    theta = np.array([2.0, 4.0, 8.0])
    r = assemble_residual(spec, theta, pts)
    x = pts.group("D")[:, 0]
    y = pts.group("D")[:, 1]
    want = 4.0 + 16.0 * x + 64.0 * x * x - y
    assert np.allclose(r.values, want, rtol=1e-14)


def test_quadratic_jacobian_closed_form():
    spec = quadratic_regression()
    layout = GroupLayout((("D", 5),))
    pts = sample_collocation(spec, layout, 0)
    theta = np.array([2.0, 4.0, 8.0])
    jac = residual_jacobian(spec, theta, pts)
    x = pts.group("D")[:, 0]
    want = np.stack([2 * 2.0 * np.ones_like(x), 2 * 4.0 * x,
                     2 * 8.0 * x * x], axis=0)
    assert np.allclose(jac, want, rtol=1e-14)
    assert np.all(residual_jacobian(spec, np.zeros(3), pts) == 0.0)


def test_quadratic_noise_level_at_interpolant():
    # At the interpolating parameters the residual is pure noise with
    # variance 1/2; its mean square over 50 points should sit in [1/4, 1].
    spec = quadratic_regression()
    layout = GroupLayout((("D", 50),))
    pts = sample_collocation(spec, layout, 0)
    r = assemble_residual(spec, QUADRATIC_THETA_STAR, pts)
    ms = float(np.mean(r.values ** 2))
    assert 0.25 <= ms <= 1.0


def test_poisson_residual_matches_fd_second_derivative():
    spec = poisson1d(hidden=(10,))
    theta = init_xavier(spec.model, seed=0)
    layout = GroupLayout((("D", 4), ("B1", 1), ("B2", 1)))
    pts = CollocationSet(points={
        "D": np.array([[0.2], [0.4], [0.6], [0.8]]),
        "B1": np.zeros((1, 1)),
        "B2": np.ones((1, 1)),
    }, layout=layout)
    r = assemble_residual(spec, theta, pts)
    h = 1e-4
    for i, x in enumerate(pts.group("D")[:, 0]):
        up = predict(spec, theta, np.array([[x + h]]))[0]
        u0 = predict(spec, theta, np.array([[x]]))[0]
        um = predict(spec, theta, np.array([[x - h]]))[0]
        uxx = (up - 2.0 * u0 + um) / (h * h)
        want = uxx + 16.0 * np.pi ** 2 * np.sin(4.0 * np.pi * x)
        assert r.values[i] == pytest.approx(want, rel=1e-6, abs=1e-6)
    # Boundary rows are plain values (zero Dirichlet data).
    assert r.values[4] == pytest.approx(
        predict(spec, theta, np.zeros((1, 1)))[0], rel=1e-12)


def test_poisson_jacobian_matches_fd():
    spec = poisson1d(hidden=(8,))
    theta = init_xavier(spec.model, seed=1).values
    layout, pts = _poisson_pts(spec, n_d=3, seed=2)
    jac = residual_jacobian(spec, theta, pts)
    assert jac.shape == (n_params(spec), layout.n)
    h = 1e-6
    for j in range(0, len(theta), 3):
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        fd = (assemble_residual(spec, tp, pts).values
              - assemble_residual(spec, tm, pts).values) / (2.0 * h)
        assert np.allclose(jac[j], fd, rtol=1e-5, atol=1e-5)


def test_wave_residual_vanishes_on_exact_solution_values():
    # The exact solution at (0.25, 0) is sin(pi/4) + sin(pi)/2 = sqrt(2)/2;
    # sanity-check the stored handle and the B_i data.
    spec = wave1d()
    pts = np.array([[0.25, 0.0]])
    assert spec.exact(pts)[0] == pytest.approx(np.sqrt(2.0) / 2.0,
                                               rel=1e-14)
    assert spec.rhs["B_i"](pts)[0] == pytest.approx(spec.exact(pts)[0],
                                                    rel=1e-14)


def test_wave_interior_residual_matches_fd():
    spec = wave1d(hidden=(6, 6))
    theta = init_xavier(spec.model, seed=0)
    layout = GroupLayout((("D", 2), ("D_i", 1), ("B_i", 1),
                          ("B1", 1), ("B2", 1)))
    pts = sample_collocation(spec, layout, 3)
    r = assemble_residual(spec, theta, pts)
    h = 1e-4

    def u(x, t):
        return predict(spec, theta, np.array([[x, t]]))[0]

    for i, (x, t) in enumerate(pts.group("D")):
        utt = (u(x, t + h) - 2 * u(x, t) + u(x, t - h)) / (h * h)
        uxx = (u(x + h, t) - 2 * u(x, t) + u(x - h, t)) / (h * h)
        assert r.group("D")[i] == pytest.approx(utt - 4.0 * uxx,
                                                rel=1e-4, abs=1e-5)
    (xi, _), = pts.group("D_i")
    ut = (u(xi, h) - u(xi, -h)) / (2.0 * h)
    assert r.group("D_i")[0] == pytest.approx(ut, rel=1e-6, abs=1e-8)


def test_jvp_matches_dense_jacobian():
    spec = poisson1d(hidden=(7,))
    theta = init_xavier(spec.model, seed=4).values
    layout, pts = _poisson_pts(spec, n_d=5, seed=1)
    jac = residual_jacobian(spec, theta, pts)
    rng = np.random.default_rng(2)
    w = rng.standard_normal(layout.n)
    assert np.allclose(residual_jvp(spec, theta, pts, w), jac @ w,
                       rtol=1e-12)


def test_jvp_groups_columns_sum_to_full_product():
    spec = wave1d(hidden=(5, 5))
    theta = init_xavier(spec.model, seed=2).values
    layout = GroupLayout((("D", 6), ("D_i", 3), ("B_i", 2),
                          ("B1", 2), ("B2", 2)))
    pts = sample_collocation(spec, layout, 0)
    rng = np.random.default_rng(3)
    w = rng.standard_normal(layout.n)
    cols = residual_jvp_groups(spec, theta, pts, w)
    assert cols.shape == (n_params(spec), len(layout.groups))
    assert np.allclose(cols.sum(axis=1), residual_jvp(spec, theta, pts, w),
                       rtol=1e-12)
    # Each column equals the dense product restricted to its group rows.
    jac = residual_jacobian(spec, theta, pts)
    for gi, (name, _) in enumerate(layout.groups):
        lo, hi = layout.index_range(name)
        assert np.allclose(cols[:, gi], jac[:, lo:hi] @ w[lo:hi],
                           rtol=1e-12)


def test_parameter_length_checked():
    spec = poisson1d(hidden=(5,))
    _, pts = _poisson_pts(spec, n_d=2)
    with pytest.raises(ProblemError):
        assemble_residual(spec, np.zeros(3), pts)


def test_exact_solution_error_zero_for_exact_handle():
    spec = wave1d()
    grid = _grid(21)
    assert exact_solution_error(spec, spec.exact, grid) == 0.0
    with pytest.raises(ProblemError):
        exact_solution_error(spec, spec.exact, np.zeros((0, 2)))


def test_residual_op_counters_and_cache_consistency():
    spec = poisson1d(hidden=(6,))
    theta = init_xavier(spec.model, seed=5).values
    layout, pts = _poisson_pts(spec, n_d=3)
    rop = ResidualOp(spec, pts)
    r = rop.residual(theta)
    w = r.values
    g1 = rop.jvp(theta, w)
    cols = rop.jvp_groups(theta, w)
    jac = rop.jacobian(theta)
    assert rop.n_residual_calls == 1
    assert rop.n_jvp_calls == 2
    assert rop.n_jacobian_calls == 1
    # Cached-sweep answers agree with fresh ones at different parameters.
    theta2 = theta + 0.01
    g2 = rop.jvp(theta2, rop.residual(theta2).values)
    assert np.allclose(g1, jac @ w, rtol=1e-12)
    assert np.allclose(cols.sum(axis=1), g1, rtol=1e-12)
    assert np.allclose(
        g2, residual_jacobian(spec, theta2, pts) @
        assemble_residual(spec, theta2, pts).values, rtol=1e-12)


def test_linear_residual_op_identities():
    rng = np.random.default_rng(7)
    layout = GroupLayout((("D", 4), ("B1", 2)))
    A = rng.standard_normal((5, 6))
    b = rng.standard_normal(6)
    op = LinearResidualOp(A, b, layout)
    theta = rng.standard_normal(5)
    assert np.allclose(op.residual(theta).values, A.T @ theta - b)
    w = rng.standard_normal(6)
    cols = op.jvp_groups(theta, w)
    assert np.allclose(cols.sum(axis=1), op.jvp(theta, w))
    assert np.allclose(cols[:, 1], A[:, 4:] @ w[4:])
