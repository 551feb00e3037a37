"""Residual assemblies for the supported problems.

Each problem defines a vector of pointwise residuals partitioned into named
groups (interior operator, boundary pieces, initial data).  Residuals,
Jacobians, and Jacobian-vector products are exposed through
:class:`ResidualOp`, which also counts evaluations so that cost contracts
can be asserted in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as ag
from .model import MlpConfig, ParamVector, normalization_for_interval


class ProblemError(Exception):
    pass


class SchemaError(ProblemError):
    """Unknown group name or layout incompatible with the problem."""


@dataclass(frozen=True)
class GroupLayout:
    """Ordered (name, count) partition of the residual vector."""

    groups: tuple
    interior: str = "D"

    def __post_init__(self):
        names = [n for n, _ in self.groups]
        if len(set(names)) != len(names):
            raise SchemaError("group names must be unique")
        if any(c < 0 for _, c in self.groups):
            raise SchemaError("group counts must be >= 0")
        if self.n < 1:
            raise SchemaError("layout must contain at least one point")

    @property
    def n(self):
        return sum(c for _, c in self.groups)

    @property
    def names(self):
        return tuple(n for n, _ in self.groups)

    def count(self, name):
        for n, c in self.groups:
            if n == name:
                return c
        raise SchemaError(f"unknown group {name!r}")

    def index_range(self, name):
        offset = 0
        for n, c in self.groups:
            if n == name:
                return offset, offset + c
            offset += c
        raise SchemaError(f"unknown group {name!r}")


@dataclass
class CollocationSet:
    """Per-group arrays of coordinate tuples, shape (count, point_dim)."""

    points: dict
    layout: GroupLayout

    def __post_init__(self):
        for name, count in self.layout.groups:
            if name not in self.points:
                raise SchemaError(f"missing points for group {name!r}")
            if len(self.points[name]) != count:
                raise SchemaError(
                    f"group {name!r} expects {count} points, got "
                    f"{len(self.points[name])}"
                )

    def group(self, name):
        return self.points[name]


@dataclass
class ResidualVector:
    values: np.ndarray
    layout: GroupLayout

    def group(self, name):
        lo, hi = self.layout.index_range(name)
        return self.values[lo:hi]

    @property
    def n(self):
        return len(self.values)


@dataclass(frozen=True)
class _Term:
    """One additive piece of a group residual: coeff * D^orders u."""

    coeff: float
    orders: tuple  # derivative multi-index over point coordinates


@dataclass(frozen=True)
class ProblemSpec:
    """A problem definition: groups, residual terms, data, exact solution.

    ``group_terms`` maps group name -> tuple of _Term applied to the model
    output; ``rhs`` maps group name -> callable(points) giving the data the
    terms are matched against.  ``model`` is None for the quadratic
    regression, whose predictor is closed-form.
    """

    kind: str
    point_dim: int
    domain: tuple  # per-dimension (lo, hi) bounds of the space-time box
    group_schema: tuple  # ordered group names
    group_terms: dict
    rhs: dict
    sampler: dict  # group name -> callable(count, rng) -> points
    exact: object  # callable(points) -> values
    model: MlpConfig = None
    data: tuple = None  # quadratic regression (x, y) arrays
    coefficients: dict = field(default_factory=dict)


# Cache of compiled model graphs keyed by the MlpConfig.
_GRAPH_CACHE = {}


def model_graph(spec):
    if spec.model is None:
        raise ProblemError(f"{spec.kind} has no network model")
    if spec.model not in _GRAPH_CACHE:
        from .model import compile as compile_model
        _GRAPH_CACHE[spec.model] = compile_model(spec.model)[0]
    return _GRAPH_CACHE[spec.model]


def _poisson_forcing(points):
    x = points[:, 0]
    return -16.0 * np.pi ** 2 * np.sin(4.0 * np.pi * x)


def _poisson_exact(points):
    return np.sin(4.0 * np.pi * points[:, 0])


def poisson1d(hidden=(100,), seed_independent_norm=True):
    """u_xx = -16 pi^2 sin(4 pi x) on (0,1), u(0)=u(1)=0."""
    norm = normalization_for_interval([(0.0, 1.0)])
    model = MlpConfig(input_dim=1, hidden=tuple(hidden), output_dim=1,
                      input_norm=norm)
    zero = lambda pts: np.zeros(len(pts))
    return ProblemSpec(
        kind="poisson1d",
        point_dim=1,
        domain=((0.0, 1.0),),
        group_schema=("D", "B1", "B2"),
        group_terms={
            "D": (_Term(1.0, (2,)),),
            "B1": (_Term(1.0, (0,)),),
            "B2": (_Term(1.0, (0,)),),
        },
        rhs={"D": _poisson_forcing, "B1": zero, "B2": zero},
        sampler={
            "D": lambda c, rng: rng.uniform(0.0, 1.0, size=(c, 1)),
            "B1": lambda c, rng: np.zeros((c, 1)),
            "B2": lambda c, rng: np.ones((c, 1)),
        },
        exact=_poisson_exact,
        model=model,
    )


def _wave_exact(points):
    x, t = points[:, 0], points[:, 1]
    return (np.sin(np.pi * x) * np.cos(2.0 * np.pi * t)
            + 0.5 * np.sin(4.0 * np.pi * x) * np.cos(8.0 * np.pi * t))


def _wave_initial(points):
    x = points[:, 0]
    return np.sin(np.pi * x) + 0.5 * np.sin(4.0 * np.pi * x)


def wave1d(hidden=(64, 64)):
    """u_tt - 4 u_xx = 0 on (0,1)x(0,1) with fixed ends and struck start."""
    norm = normalization_for_interval([(0.0, 1.0), (0.0, 1.0)])
    model = MlpConfig(input_dim=2, hidden=tuple(hidden), output_dim=1,
                      input_norm=norm)
    zero = lambda pts: np.zeros(len(pts))

    def interior(c, rng):
        return rng.uniform(0.0, 1.0, size=(c, 2))

    def at_t0(c, rng):
        pts = np.zeros((c, 2))
        pts[:, 0] = rng.uniform(0.0, 1.0, size=c)
        return pts

    def at_x(x0):
        def sample(c, rng):
            pts = np.empty((c, 2))
            pts[:, 0] = x0
            pts[:, 1] = rng.uniform(0.0, 1.0, size=c)
            return pts
        return sample

    return ProblemSpec(
        kind="wave1d",
        point_dim=2,
        domain=((0.0, 1.0), (0.0, 1.0)),
        group_schema=("D", "D_i", "B_i", "B1", "B2"),
        group_terms={
            "D": (_Term(1.0, (0, 2)), _Term(-4.0, (2, 0))),
            "D_i": (_Term(1.0, (0, 1)),),
            "B_i": (_Term(1.0, (0, 0)),),
            "B1": (_Term(1.0, (0, 0)),),
            "B2": (_Term(1.0, (0, 0)),),
        },
        rhs={"D": zero, "D_i": zero, "B_i": _wave_initial,
             "B1": zero, "B2": zero},
        sampler={"D": interior, "D_i": at_t0, "B_i": at_t0,
                 "B1": at_x(0.0), "B2": at_x(1.0)},
        exact=_wave_exact,
        model=model,
        coefficients={"wave_speed_sq": 4.0},
    )


def _quadratic_truth(x):
    return np.pi * x ** 2 + np.e * x + np.sqrt(2.0)


# Feature map (1, x, x^2); the interpolating parameters are the square roots
# of (sqrt(2), e, pi) in that order.
QUADRATIC_THETA_STAR = np.array([2.0 ** 0.25, np.e ** 0.5, np.pi ** 0.5])


def quadratic_features(x):
    x = np.asarray(x, dtype=np.float64)
    return np.stack([np.ones_like(x), x, x ** 2], axis=0)  # (3, n)


def quadratic_regression(noise_seed=0, n_points=50, noise_std=2.0 ** -0.5):
    """Least-squares fit of y = pi x^2 + e x + sqrt(2) + noise with a
    predictor quadratic in its parameters: (theta . theta-elementwise) dot
    (1, x, x^2)."""
    x = np.linspace(-1.0, 1.0, n_points)
    rng = np.random.Generator(np.random.Philox(key=noise_seed))
    y = _quadratic_truth(x) + noise_std * rng.standard_normal(n_points)
    data = np.stack([x, y], axis=1)  # points carry (x, y) pairs

    def dataset_sampler(c, rng_):
        if c > len(data):
            raise SchemaError(
                f"quadratic dataset holds {len(data)} points, asked for {c}"
            )
        return data[:c].copy()

    return ProblemSpec(
        kind="quadratic-regression",
        point_dim=2,
        domain=((-1.0, 1.0), (-np.inf, np.inf)),
        group_schema=("D",),
        group_terms={"D": ()},
        rhs={"D": lambda pts: pts[:, 1]},
        sampler={"D": dataset_sampler},
        exact=lambda pts: _quadratic_truth(pts[:, 0]),
        model=None,
        data=(x, y),
    )


def n_params(spec):
    if spec.model is None:
        return 3
    _, total = spec.model.layout()
    return total


def sample_collocation(spec, layout, seed):
    """Fresh collocation points for every group; ``seed`` is an integer or
    an already positioned generator (deterministic either way)."""
    for name in layout.names:
        if name not in spec.sampler:
            raise SchemaError(
                f"group {name!r} not part of problem {spec.kind!r}"
            )
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.Generator(np.random.Philox(key=seed))
    points = {}
    for name, count in layout.groups:
        points[name] = np.asarray(spec.sampler[name](count, rng),
                                  dtype=np.float64)
        if points[name].size == 0:
            points[name] = points[name].reshape(0, spec.point_dim)
    return CollocationSet(points=points, layout=layout)


def _theta_values(spec, theta):
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(
        theta, dtype=np.float64)
    expect = n_params(spec)
    if values.shape != (expect,):
        raise ProblemError(
            f"{spec.kind} expects {expect} parameters, got {values.shape}"
        )
    return values


def _direction(spec, orders):
    d = np.zeros(spec.point_dim)
    order = sum(orders)
    if order == 0:
        return None, 0
    (axis,) = [k for k, o in enumerate(orders) if o > 0]
    d[axis] = 1.0
    return d, order


def assemble_residual(spec, theta, pts: CollocationSet,
                      cache=None) -> ResidualVector:
    """Residual vector; ``cache`` (a dict) optionally retains the forward
    sweeps so later gradient calls at the same parameters skip them."""
    theta = _theta_values(spec, theta)
    out = np.empty(pts.layout.n)
    if spec.kind == "quadratic-regression":
        p = pts.group("D")
        preds = (theta * theta) @ quadratic_features(p[:, 0])
        out[:] = preds - spec.rhs["D"](p)
        return ResidualVector(out, pts.layout)

    gr = model_graph(spec)
    for name, count in pts.layout.groups:
        lo, hi = pts.layout.index_range(name)
        if count == 0:
            continue
        p = pts.group(name)
        x = p[:, :spec.point_dim]
        acc = np.zeros(count)
        for ti, term in enumerate(spec.group_terms[name]):
            direction, order = _direction(spec, term.orders)
            states = ag.forward_states(gr, x, theta, direction=direction,
                                       order=order)
            if cache is not None:
                cache[(name, ti)] = states
            vals = ag.outputs_from_states(gr, states, order)
            acc += term.coeff * vals[order]
        out[lo:hi] = acc - spec.rhs[name](p)
    return ResidualVector(out, pts.layout)


def _term_states(gr, x, theta, direction, order, cache, name, ti):
    if cache is not None:
        states = cache.get((name, ti))
        if states is not None:
            return states
    return ag.forward_states(gr, x, theta, direction=direction, order=order)


def residual_jacobian(spec, theta, pts: CollocationSet,
                      cache=None) -> np.ndarray:
    """Matrix of shape (p, n); column i is the parameter gradient of the
    i-th residual entry."""
    theta = _theta_values(spec, theta)
    n = pts.layout.n
    if spec.kind == "quadratic-regression":
        p = pts.group("D")
        feats = quadratic_features(p[:, 0])  # (3, n)
        return 2.0 * theta[:, None] * feats

    gr = model_graph(spec)
    jac = np.zeros((len(theta), n))
    for name, count in pts.layout.groups:
        lo, hi = pts.layout.index_range(name)
        if count == 0:
            continue
        x = pts.group(name)[:, :spec.point_dim]
        ones = np.ones(count)
        for ti, term in enumerate(spec.group_terms[name]):
            direction, order = _direction(spec, term.orders)
            states = _term_states(gr, x, theta, direction, order, cache,
                                  name, ti)
            seed = {0: (ones, None, None), 1: (None, ones, None),
                    2: (None, None, ones)}[order]
            jac[:, lo:hi] += term.coeff * ag.grad_from_states(
                gr, states, order, [seed], sum_points=False)[0]
    return jac


def residual_jvp_groups(spec, theta, pts: CollocationSet, w,
                        cache=None) -> np.ndarray:
    """Per-group products J_g^T w_g, shape (p, n_groups) in layout order.

    Each group's seed touches only that group's residual rows, so the
    columns cost no more combined than a single full product; weighted
    and unweighted gradients are both linear combinations of them.
    """
    theta = _theta_values(spec, theta)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (pts.layout.n,):
        raise ProblemError("weight vector must match the residual length")
    if spec.kind == "quadratic-regression":
        p = pts.group("D")
        feats = quadratic_features(p[:, 0])
        return (2.0 * theta * (feats @ w))[:, None]

    gr = model_graph(spec)
    out = np.zeros((len(theta), len(pts.layout.groups)))
    for gi, (name, count) in enumerate(pts.layout.groups):
        lo, hi = pts.layout.index_range(name)
        if count == 0:
            continue
        x = pts.group(name)[:, :spec.point_dim]
        wg = w[lo:hi]
        for ti, term in enumerate(spec.group_terms[name]):
            direction, order = _direction(spec, term.orders)
            states = _term_states(gr, x, theta, direction, order, cache,
                                  name, ti)
            sw = term.coeff * wg
            seed = {0: (sw, None, None), 1: (None, sw, None),
                    2: (None, None, sw)}[order]
            out[:, gi] += ag.grad_from_states(gr, states, order, [seed],
                                              sum_points=True)[0]
    return out


def residual_jvp(spec, theta, pts: CollocationSet, w,
                 cache=None) -> np.ndarray:
    """J w for residual weights w (length n) without materializing J."""
    return residual_jvp_multi(spec, theta, pts, [w], cache=cache)[0]


def residual_jvp_multi(spec, theta, pts: CollocationSet, ws,
                       cache=None) -> list:
    """J w for several weight vectors at once, sharing forward passes."""
    theta = _theta_values(spec, theta)
    ws = [np.asarray(w, dtype=np.float64) for w in ws]
    for w in ws:
        if w.shape != (pts.layout.n,):
            raise ProblemError("weight vector must match the residual length")
    if spec.kind == "quadratic-regression":
        p = pts.group("D")
        feats = quadratic_features(p[:, 0])
        return [2.0 * theta * (feats @ w) for w in ws]

    gr = model_graph(spec)
    out = [np.zeros(len(theta)) for _ in ws]
    for name, count in pts.layout.groups:
        lo, hi = pts.layout.index_range(name)
        if count == 0:
            continue
        x = pts.group(name)[:, :spec.point_dim]
        for ti, term in enumerate(spec.group_terms[name]):
            direction, order = _direction(spec, term.orders)
            states = _term_states(gr, x, theta, direction, order, cache,
                                  name, ti)
            seeds = []
            for w in ws:
                sw = term.coeff * w[lo:hi]
                seeds.append({0: (sw, None, None), 1: (None, sw, None),
                              2: (None, None, sw)}[order])
            grads = ag.grad_from_states(gr, states, order, seeds,
                                        sum_points=True)
            for i, g in enumerate(grads):
                out[i] += g
    return out


def predict(spec, theta, points):
    """Model output at the given points (exact-solution comparison grid)."""
    if callable(theta):
        return np.asarray(theta(points), dtype=np.float64)
    values = _theta_values(spec, theta)
    points = np.asarray(points, dtype=np.float64)
    if spec.kind == "quadratic-regression":
        return (values * values) @ quadratic_features(points[:, 0])
    gr = model_graph(spec)
    (v,) = ag.eval_batch(gr, points[:, :spec.point_dim], values, order=0)
    return v


def exact_solution_error(spec, theta, grid) -> float:
    """Relative L2 error of the model against the exact solution."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ProblemError("evaluation grid is empty")
    u_model = predict(spec, theta, grid)
    u_exact = spec.exact(grid)
    denom = np.sqrt(np.sum(np.abs(u_exact) ** 2))
    if denom == 0.0:
        raise ProblemError("exact solution vanishes on the grid")
    return float(np.sqrt(np.sum(np.abs(u_model - u_exact) ** 2)) / denom)


class ResidualOp:
    """Residual oracle bound to (spec, points) with evaluation counters."""

    def __init__(self, spec, pts: CollocationSet):
        self.spec = spec
        self.pts = pts
        self.layout = pts.layout
        self.n_residual_calls = 0
        self.n_jvp_calls = 0
        self.n_jacobian_calls = 0
        # Forward sweeps retained for the two most recent parameter
        # vectors, so gradient calls at the same point skip recomputing
        # them.
        self._fwd_slots = []

    @property
    def n(self):
        return self.layout.n

    @property
    def p(self):
        return n_params(self.spec)

    def _slot(self, theta, create):
        values = _theta_values(self.spec, theta)
        for held, cache in self._fwd_slots:
            if np.array_equal(held, values):
                return cache
        if not create:
            return None
        cache = {}
        self._fwd_slots.insert(0, (values.copy(), cache))
        del self._fwd_slots[2:]
        return cache

    def residual(self, theta):
        self.n_residual_calls += 1
        cache = None
        if self.spec.model is not None:
            cache = self._slot(theta, create=True)
            cache.clear()
        return assemble_residual(self.spec, theta, self.pts, cache=cache)

    def jvp(self, theta, w):
        self.n_jvp_calls += 1
        return residual_jvp(self.spec, theta, self.pts, w,
                            cache=self._slot(theta, create=False))

    def jvp_groups(self, theta, w):
        self.n_jvp_calls += 1
        return residual_jvp_groups(self.spec, theta, self.pts, w,
                                   cache=self._slot(theta, create=False))

    def jvp_multi(self, theta, ws):
        self.n_jvp_calls += len(ws)
        return residual_jvp_multi(self.spec, theta, self.pts, ws,
                                  cache=self._slot(theta, create=False))

    def jacobian(self, theta):
        self.n_jacobian_calls += 1
        return residual_jacobian(self.spec, theta, self.pts,
                                 cache=self._slot(theta, create=False))


class LinearResidualOp:
    """Residual R(theta) = A^T theta - b with constant Jacobian A.

    The sketch's difference quotient is exact here for any step size, which
    makes this the reference model for estimator identities in tests.
    """

    def __init__(self, A, b, layout=None):
        self.A = np.asarray(A, dtype=np.float64)  # (p, n)
        self.b = np.asarray(b, dtype=np.float64)
        self.layout = layout or GroupLayout((("D", self.A.shape[1]),))
        self.n_residual_calls = 0
        self.n_jvp_calls = 0

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def p(self):
        return self.A.shape[0]

    def residual(self, theta):
        self.n_residual_calls += 1
        return ResidualVector(self.A.T @ np.asarray(theta) - self.b,
                              self.layout)

    def jvp(self, theta, w):
        self.n_jvp_calls += 1
        return self.A @ np.asarray(w)

    def jvp_groups(self, theta, w):
        self.n_jvp_calls += 1
        w = np.asarray(w, dtype=np.float64)
        out = np.zeros((self.p, len(self.layout.groups)))
        for gi, (name, _) in enumerate(self.layout.groups):
            lo, hi = self.layout.index_range(name)
            out[:, gi] = self.A[:, lo:hi] @ w[lo:hi]
        return out

    def jvp_multi(self, theta, ws):
        return [self.jvp(theta, w) for w in ws]

    def jacobian(self, theta):
        return self.A.copy()
