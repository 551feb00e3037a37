"""Gradient descent with fixed, exact-kernel-adaptive, or sketch-adaptive
loss weights, plus the spaced-update rule and convergence diagnostics.

The loop is plain gradient descent on the weighted objective
L(theta) = 1/2 sum_g lambda_g ||R_g||^2; weights come from trace ratios of
the exact tangent kernel, from the randomized sketch's moving average, or
stay fixed.  Each step records the unweighted objective F = 1/2 ||R||^2,
its gradient norm, the weighted-gradient norm, the weights, and optionally
the kernel eigenvalues, so the decay-rate and step-size claims can be
checked after the fact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ntk_sketch as sk
from .model import ParamVector
from .ntk_exact import (DegenerateKernel, LossWeights, NtkMatrix,
                        eigenvalues_symmetric, ntk, ntk_weights)
from .problems import (CollocationSet, GroupLayout, ProblemSpec,
                       ResidualOp, ResidualVector, sample_collocation)


class TrainerError(Exception):
    pass


class DivergenceError(TrainerError):
    """Loss became non-finite; carries the offending step index."""

    def __init__(self, step, value):
        super().__init__(
            f"non-finite loss {value} at step {step}; aborting"
        )
        self.step = step
        self.value = value


# Sub-stream identifiers for the run's counter-based generators.
STREAM_SKETCH = 1
STREAM_POINTS = 2


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the descent loop.

    ``spaced`` is None or (c, q) for the update budget h(t) = c (1+t)^q;
    c may be None, in which case it is set to ten times the first observed
    weight-change increment.
    """

    eta: float
    steps: int
    weight_mode: str = "fixed"
    layout: GroupLayout = None
    fixed_weights: LossWeights = None
    update_every: int = 1
    spaced: tuple = None
    resample: bool = False
    seed: int = 0
    sketch: sk.SketchConfig = field(default_factory=sk.SketchConfig)
    sketch_alpha: float = 0.1
    sketch_init_samples: int = 1
    collocation: CollocationSet = None
    record_eigenvalues: bool = False
    eig_every: int = None
    store_params: bool = False
    store_grads: bool = False
    exact_trace_every: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta > 0.0):
            raise TrainerError(f"learning rate must be positive, got {self.eta}")
        if self.steps < 0:
            raise TrainerError("step count must be >= 0")
        if self.weight_mode not in ("fixed", "exact-ntk", "sketch"):
            raise TrainerError(f"unknown weight mode {self.weight_mode!r}")
        if self.update_every < 1:
            raise TrainerError("update frequency must be >= 1")
        if self.spaced is not None:
            c, q = self.spaced
            if q >= 1.0:
                raise TrainerError(
                    "spaced-update exponent must satisfy q < 1 so the "
                    "budget grows sublinearly"
                )
            if c is not None and c < 0.0:
                raise TrainerError("spaced-update coefficient must be >= 0")
        if not 0.0 < self.sketch_alpha <= 1.0:
            raise TrainerError("sketch decay must lie in (0, 1]")
        if self.sketch_init_samples < 1:
            raise TrainerError("sketch needs at least one seeding sample")


@dataclass(frozen=True)
class SpacedUpdateState:
    """Accepted-weight state with the running increment sum S."""

    weights: LossWeights
    s: float = 0.0

    def __post_init__(self):
        if self.s < 0.0:
            raise TrainerError("running increment sum must be >= 0")


def spaced_update(state: SpacedUpdateState, candidate: LossWeights,
                  r_next, h_value) -> SpacedUpdateState:
    """Accept the candidate weights iff the budget allows it.

    ``r_next`` is the residual vector (or its squared norm) at the iterate
    the candidate would apply to.  The increment charged to the budget is
    the largest per-group weight change times that squared norm; rejection
    leaves both the weights and S untouched.
    """
    if h_value < 0.0:
        raise TrainerError("budget value must be >= 0")
    if isinstance(r_next, ResidualVector):
        rsq = float(r_next.values @ r_next.values)
    else:
        rsq = float(np.asarray(r_next, dtype=np.float64))
    increment = candidate.max_difference(state.weights) * rsq
    if state.s + increment <= h_value:
        return SpacedUpdateState(weights=candidate,
                                 s=max(state.s + increment, state.s))
    return state


@dataclass
class TrainingTrace:
    """Per-step records of one descent run (arrays of length steps+1)."""

    layout: GroupLayout
    eta: float
    loss: np.ndarray
    res_norm_sq: np.ndarray
    grad_g_norm_sq: np.ndarray
    grad_f_norm_sq: np.ndarray
    wall_ms: np.ndarray
    weights: list  # LossWeights per step
    eig_steps: list = field(default_factory=list)
    eigenvalues: list = field(default_factory=list)
    params: list = None  # ParamVector-free theta snapshots
    grad_f: list = None  # full gradient vectors of F
    exact_trace_steps: list = field(default_factory=list)
    exact_group_traces: list = field(default_factory=list)
    theta_final: np.ndarray = None
    spaced_s: np.ndarray = None

    @property
    def n_records(self):
        return len(self.loss)

    def weight_series(self, name):
        return np.array([w[name] for w in self.weights])

    def to_csv(self, fh, include_wall=True):
        """step, loss, res_norm_sq, gradG_norm_sq, gradF_norm_sq, one
        column per group weight, optional eig columns, wall_ms.

        ``include_wall=False`` drops the timing column so that reruns with
        the same seed produce byte-identical files."""
        cols = ["step", "loss", "res_norm_sq", "gradG_norm_sq",
                "gradF_norm_sq"]
        cols += [f"w_{name}" for name in self.layout.names]
        have_eig = bool(self.eig_steps)
        if have_eig:
            cols += [f"eig_{i}" for i in range(self.layout.n)]
        if include_wall:
            cols.append("wall_ms")
        fh.write(",".join(cols) + "\n")
        eig_at = dict(zip(self.eig_steps, self.eigenvalues))
        fmt = lambda v: repr(float(v))
        for t in range(self.n_records):
            row = [str(t), fmt(self.loss[t]), fmt(self.res_norm_sq[t]),
                   fmt(self.grad_g_norm_sq[t]),
                   fmt(self.grad_f_norm_sq[t])]
            row += [fmt(self.weights[t][name])
                    for name in self.layout.names]
            if have_eig:
                if t in eig_at:
                    row += [fmt(v) for v in eig_at[t]]
                else:
                    row += [""] * self.layout.n
            if include_wall:
                row.append(fmt(self.wall_ms[t]))
            fh.write(",".join(row) + "\n")


@dataclass
class DiagnosticsRecord:
    """Empirical constants behind the step-size condition."""

    k_min: float
    k_max: float
    l_min: float
    l_max: float
    lipschitz: float
    admissible_eta: float

    def __post_init__(self):
        if self.k_min > self.k_max or self.l_min > self.l_max:
            raise TrainerError("extreme values are out of order")


def weighted_loss(R: ResidualVector, weights: LossWeights) -> float:
    """1/2 sum_g lambda_g ||R_g||^2."""
    if set(weights.weights) != set(R.layout.names):
        raise TrainerError(
            f"weight groups {sorted(weights.weights)} do not match residual "
            f"groups {sorted(R.layout.names)}"
        )
    lam = weights.expand(R.layout)
    return 0.5 * float(R.values @ (lam * R.values))


def gd_step(theta, jacobian, R: ResidualVector, weights: LossWeights,
            eta) -> np.ndarray:
    """theta - eta * J (lambda (.) R) from a materialized Jacobian."""
    theta = np.asarray(theta.values if isinstance(theta, ParamVector)
                       else theta, dtype=np.float64)
    lam = weights.expand(R.layout)
    return theta - eta * (np.asarray(jacobian) @ (lam * R.values))


def _as_theta(theta):
    if isinstance(theta, ParamVector):
        return np.array(theta.values, dtype=np.float64)
    return np.array(theta, dtype=np.float64)


def _make_rop(spec, cfg, rng_pts):
    if cfg.collocation is not None:
        pts = cfg.collocation
    else:
        pts = sample_collocation(spec, cfg.layout, rng_pts)
    return ResidualOp(spec, pts)


def _group_traces_from_jacobian(jac, layout):
    col_sq = np.einsum("ij,ij->j", jac, jac)
    return {name: float(np.sum(col_sq[slice(*layout.index_range(name))]))
            for name in layout.names}


def train(spec, theta0, cfg: TrainConfig) -> TrainingTrace:
    """Run the descent loop and return the populated trace.

    ``spec`` is a problem definition, or any residual oracle exposing
    residual/jvp/jacobian and a layout (resampling then must be off).
    """
    is_spec = isinstance(spec, ProblemSpec)
    if not is_spec and cfg.resample:
        raise TrainerError("resampling needs a problem definition")
    if is_spec and cfg.layout is None and cfg.collocation is None:
        raise TrainerError("a group layout or explicit points are required")

    rng_pts = sk.stream(cfg.seed, STREAM_POINTS)
    rng_sketch = sk.stream(cfg.seed, STREAM_SKETCH)

    if is_spec:
        cfg2 = cfg if cfg.layout is not None else replace(
            cfg, layout=cfg.collocation.layout)
        rop = _make_rop(spec, cfg2, rng_pts)
    else:
        rop = spec
    layout = rop.layout
    theta = _as_theta(theta0)

    T = cfg.steps
    n_rec = T + 1
    loss = np.empty(n_rec)
    res_sq = np.empty(n_rec)
    gg_sq = np.empty(n_rec)
    gf_sq = np.empty(n_rec)
    wall = np.zeros(n_rec)
    weights_log = []
    trace = TrainingTrace(
        layout=layout, eta=cfg.eta, loss=loss, res_norm_sq=res_sq,
        grad_g_norm_sq=gg_sq, grad_f_norm_sq=gf_sq, wall_ms=wall,
        weights=weights_log,
        params=[] if cfg.store_params else None,
        grad_f=[] if cfg.store_grads else None,
        spaced_s=np.zeros(n_rec) if cfg.spaced is not None else None,
    )

    eig_every = cfg.eig_every
    if eig_every is None:
        eig_every = 1 if layout.n <= 16 else 10

    ones = LossWeights({name: 1.0 for name in layout.names})
    current = cfg.fixed_weights if cfg.fixed_weights is not None else ones
    spaced_state = None
    spaced_c = None if cfg.spaced is None else cfg.spaced[0]
    acc = None

    r_vec = rop.residual(theta)
    for t in range(n_rec):
        t0 = time.perf_counter()
        jac = None

        # Decide this step's weights from information available at theta_t.
        candidate = None
        if cfg.weight_mode == "exact-ntk" and t % cfg.update_every == 0:
            jac = rop.jacobian(theta)
            try:
                candidate = ntk_weights(ntk(jac, layout))
            except DegenerateKernel:
                candidate = None
        elif cfg.weight_mode == "sketch":
            if acc is None:
                acc = sk.moving_average_init(
                    rop, theta, cfg.sketch, cfg.sketch_init_samples,
                    cfg.sketch_alpha, rng_sketch, mode="traces",
                    r0=r_vec.values)
            else:
                sample = sk.single_sample_sketch(
                    rop, theta, cfg.sketch, rng_sketch, r0=r_vec.values,
                    full_matrix=False)
                acc = sk.moving_average_update(acc, sample)
            candidate = sk.sketch_weights(acc, fallback=current)

        if candidate is not None:
            if cfg.spaced is not None and t > 0:
                rsq_now = float(r_vec.values @ r_vec.values)
                if spaced_c is None:
                    first = (candidate.max_difference(spaced_state.weights)
                             * rsq_now)
                    spaced_c = 10.0 * max(first, np.finfo(float).tiny)
                h_value = spaced_c * (1.0 + t) ** cfg.spaced[1]
                spaced_state = spaced_update(spaced_state, candidate,
                                             rsq_now, h_value)
                current = spaced_state.weights
            else:
                current = candidate
                if cfg.spaced is not None:
                    spaced_state = SpacedUpdateState(weights=current)
        if cfg.spaced is not None and spaced_state is None:
            spaced_state = SpacedUpdateState(weights=current)

        loss[t] = weighted_loss(r_vec, current)
        res_sq[t] = float(r_vec.values @ r_vec.values)
        weights_log.append(current)
        if trace.spaced_s is not None:
            trace.spaced_s[t] = spaced_state.s

        if not np.isfinite(loss[t]):
            raise DivergenceError(t, loss[t])

        group_grads = rop.jvp_groups(theta, r_vec.values)
        grad_f = group_grads.sum(axis=1)
        lam_groups = np.array([current[n] for n, _ in layout.groups])
        grad_g = group_grads @ lam_groups
        gg_sq[t] = float(grad_g @ grad_g)
        gf_sq[t] = float(grad_f @ grad_f)

        if cfg.record_eigenvalues and t % eig_every == 0:
            if jac is None:
                jac = rop.jacobian(theta)
            trace.eig_steps.append(t)
            trace.eigenvalues.append(
                eigenvalues_symmetric(ntk(jac, layout)))
        if cfg.exact_trace_every and t % cfg.exact_trace_every == 0:
            if jac is None:
                jac = rop.jacobian(theta)
            trace.exact_trace_steps.append(t)
            trace.exact_group_traces.append(
                _group_traces_from_jacobian(jac, layout))
        if trace.params is not None:
            trace.params.append(theta.copy())
        if trace.grad_f is not None:
            trace.grad_f.append(grad_f)

        if t < T:
            theta = theta - cfg.eta * grad_g
            if is_spec and cfg.resample:
                rop = ResidualOp(spec, sample_collocation(
                    spec, layout, rng_pts))
            r_vec = rop.residual(theta)
        wall[t] = (time.perf_counter() - t0) * 1e3

    trace.theta_final = theta
    return trace


def time_averaged_residuals(trace: TrainingTrace, horizon) -> float:
    """(1/T') sum_{t < T'} ||R(theta_t)||^2."""
    if not 1 <= horizon <= trace.n_records:
        raise TrainerError(
            f"horizon must lie in [1, {trace.n_records}], got {horizon}"
        )
    return float(np.mean(trace.res_norm_sq[:horizon]))


def time_averaged_gradients(trace: TrainingTrace, horizon) -> float:
    """(1/T') sum_{t < T'} ||grad G(theta_t; theta_t)||^2."""
    if not 1 <= horizon <= trace.n_records:
        raise TrainerError(
            f"horizon must lie in [1, {trace.n_records}], got {horizon}"
        )
    return float(np.mean(trace.grad_g_norm_sq[:horizon]))


@dataclass
class CertificateReport:
    """Per-horizon comparison of the averaged residual against the
    telescoped loss-decrease bound."""

    horizons: np.ndarray
    lhs: np.ndarray  # (1/T) sum_{t<T} ||R(theta_t)||^2
    rhs: np.ndarray  # (||R(theta_0)||^2 - ||R(theta_T)||^2) / (T eta)
    holds: np.ndarray

    @property
    def all_hold(self):
        return bool(np.all(self.holds))


def theorem32_certificate(trace: TrainingTrace, eta=None,
                          horizons=None) -> CertificateReport:
    """Check the averaged-residual bound at every horizon T.

    The bound compares the running average of ||R||^2 against the total
    decrease of ||R||^2 divided by T eta.
    """
    eta = trace.eta if eta is None else eta
    if horizons is None:
        horizons = np.arange(1, trace.n_records)
    horizons = np.asarray(horizons, dtype=np.int64)
    if horizons.size == 0 or horizons.min() < 1 \
            or horizons.max() >= trace.n_records:
        raise TrainerError("horizons must lie in [1, steps]")
    r0 = trace.res_norm_sq[0]
    lhs = np.array([np.mean(trace.res_norm_sq[:T]) for T in horizons])
    rhs = (r0 - trace.res_norm_sq[horizons]) / (horizons * eta)
    return CertificateReport(horizons=horizons, lhs=lhs, rhs=rhs,
                             holds=lhs <= rhs)


@dataclass
class DescentLemmaReport:
    max_violation: float
    n_pairs: int

    @property
    def holds(self):
        return self.max_violation <= 0.0


def descent_lemma_check(rop, theta_pairs, lipschitz) -> DescentLemmaReport:
    """Check F(x) <= F(y) + <grad F(y), x - y> + (L/2)||x - y||^2 on the
    given parameter pairs, both orderings; reports the worst violation."""

    def f_and_grad(theta):
        r = rop.residual(theta)
        g = rop.jvp(theta, r.values)
        return 0.5 * float(r.values @ r.values), g

    worst = -np.inf
    count = 0
    for a, b in theta_pairs:
        a = _as_theta(a)
        b = _as_theta(b)
        fa, ga = f_and_grad(a)
        fb, gb = f_and_grad(b)
        for (x, fx), (y, fy, gy) in (((a, fa), (b, fb, gb)),
                                     ((b, fb), (a, fa, ga))):
            d = x - y
            gap = fx - fy - float(gy @ d) \
                - 0.5 * lipschitz * float(d @ d)
            worst = max(worst, gap)
            count += 1
    return DescentLemmaReport(max_violation=worst, n_pairs=count)


def empirical_lipschitz(trace: TrainingTrace) -> float:
    """Largest observed ||grad F(theta_{t+1}) - grad F(theta_t)|| over
    ||theta_{t+1} - theta_t|| along the stored path."""
    if trace.params is None or trace.grad_f is None \
            or len(trace.params) < 2:
        raise TrainerError(
            "parameter and gradient snapshots were not stored; rerun with "
            "store_params and store_grads enabled"
        )
    best = 0.0
    for t in range(len(trace.params) - 1):
        dth = trace.params[t + 1] - trace.params[t]
        denom = float(np.linalg.norm(dth))
        if denom == 0.0:
            continue
        dg = trace.grad_f[t + 1] - trace.grad_f[t]
        best = max(best, float(np.linalg.norm(dg)) / denom)
    return best


def assumption_diagnostics(trace: TrainingTrace) -> DiagnosticsRecord:
    """Extreme kernel eigenvalues and weights over the run, the empirical
    Lipschitz estimate, and the resulting admissible learning rate."""
    if not trace.eig_steps:
        raise TrainerError("no eigenvalue records in this trace")
    k_min = min(float(e[0]) for e in trace.eigenvalues)
    k_max = max(float(e[-1]) for e in trace.eigenvalues)
    l_min = min(min(w.weights.values()) for w in trace.weights)
    l_max = max(max(w.weights.values()) for w in trace.weights)
    lhat = empirical_lipschitz(trace)
    if lhat <= 0.0 or k_max <= 0.0:
        raise TrainerError("degenerate run; cannot diagnose a step size")
    admissible = 2.0 * k_min * l_min / (lhat * k_max * l_max ** 2)
    return DiagnosticsRecord(k_min=k_min, k_max=k_max, l_min=l_min,
                             l_max=l_max, lipschitz=lhat,
                             admissible_eta=admissible)
