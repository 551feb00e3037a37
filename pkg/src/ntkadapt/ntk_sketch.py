"""Randomized tangent-kernel estimation.

A single probe step perturbs the parameters along J(g (.) mask) and reads
off K g from the residual difference quotient; outer products with the
probe give a one-sample kernel estimate, Monte Carlo averaging improves it
at rate 1/N, and an exponential moving average tracks a slowly drifting
kernel during training at the cost of one extra residual evaluation and one
Jacobian-vector product per step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ntk_exact import LossWeights, NtkMatrix
from .problems import GroupLayout


class SketchError(Exception):
    pass


def stream(seed, stream_id=0):
    """Named counter-based generator; (seed, stream_id) identifies it."""
    return np.random.Generator(np.random.Philox(key=(int(seed) << 16)
                                                + int(stream_id)))


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(int(rng))


@dataclass(frozen=True)
class SketchConfig:
    """Probe-step size and the near-zero-residual mask threshold."""

    dt: float = 1e-4
    eps0: float = 1e-12

    def __post_init__(self):
        if self.dt <= 0.0:
            raise SketchError("predictor step size must be positive")
        if self.eps0 < 0.0:
            raise SketchError("mask threshold must be non-negative")


@dataclass(frozen=True)
class AltTraceConfig:
    """Scale of the parameter-space perturbation for the trace-only
    estimator."""

    eps: float = 1e-4

    def __post_init__(self):
        if self.eps <= 0.0:
            raise SketchError("perturbation scale must be positive")


@dataclass
class SketchSample:
    """One randomized kernel estimate: probe, matvec, symmetrized matrix
    (when materialized), trace, and per-group diagonal traces."""

    g: np.ndarray
    matvec: np.ndarray
    trace: float
    group_traces: dict
    matrix: NtkMatrix = None
    layout: GroupLayout = None


@dataclass
class SketchAccumulator:
    """Moving-average state: a full matrix or per-group trace scalars."""

    mode: str  # "full" or "traces"
    alpha: float
    layout: GroupLayout
    matrix: np.ndarray = None
    traces: dict = None
    count: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "traces"):
            raise SketchError(f"unknown accumulator mode {self.mode!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise SketchError("decay must lie in (0, 1]")

    def group_trace_estimates(self):
        if self.mode == "traces":
            return dict(self.traces)
        out = {}
        for name in self.layout.names:
            lo, hi = self.layout.index_range(name)
            out[name] = float(np.trace(self.matrix[lo:hi, lo:hi]))
        return out

    def kernel(self):
        if self.mode != "full":
            raise SketchError("traces-only accumulator holds no matrix")
        return NtkMatrix(self.matrix.copy(), self.layout)


def sketch_matvec(rop, theta, g, cfg: SketchConfig, r0=None):
    """Approximate K g from one probe step of size dt.

    Residual entries with magnitude at most eps0 are masked out of the
    probe, realizing the pseudoinverse of the residual diagonal in floating
    point.  The result is first-order accurate in dt and exact whenever the
    residual is linear in the parameters.
    """
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    r0 = rop.residual(theta).values if r0 is None else np.asarray(r0)
    mask = np.abs(r0) > cfg.eps0
    step = rop.jvp(theta, g * mask)
    r1 = rop.residual(theta + cfg.dt * step).values
    return (r1 - r0) / cfg.dt


def _group_traces(layout, g, matvec):
    diag = matvec * g
    out = {}
    for name in layout.names:
        lo, hi = layout.index_range(name)
        out[name] = float(np.sum(diag[lo:hi]))
    return out


def single_sample_sketch(rop, theta, cfg: SketchConfig, rng, r0=None,
                         full_matrix=True) -> SketchSample:
    """One-probe kernel estimate: g ~ N(0, I_n), columns matvec * g_i,
    symmetrized; the trace estimate is g . matvec."""
    rng = _as_rng(rng)
    layout = rop.layout
    g = rng.standard_normal(layout.n)
    mv = sketch_matvec(rop, theta, g, cfg, r0=r0)
    matrix = None
    if full_matrix:
        kt = np.outer(mv, g)
        matrix = NtkMatrix((kt + kt.T) / 2.0, layout)
    return SketchSample(
        g=g,
        matvec=mv,
        trace=float(g @ mv),
        group_traces=_group_traces(layout, g, mv),
        matrix=matrix,
        layout=layout,
    )


def clip_nonnegative(kernel: NtkMatrix) -> NtkMatrix:
    """Entrywise maximum with zero (kernels have non-negative entries in
    expectation for the problems at hand, so clipping reduces error)."""
    return NtkMatrix(np.maximum(kernel.values, 0.0), kernel.layout)


def monte_carlo_average(rop, theta, cfg: SketchConfig, n_samples, rng,
                        r0=None):
    """Mean of n_samples i.i.d. one-probe estimates: (NtkMatrix, trace)."""
    if n_samples < 1:
        raise SketchError("need at least one sample")
    rng = _as_rng(rng)
    theta = np.asarray(theta, dtype=np.float64)
    r0 = rop.residual(theta).values if r0 is None else np.asarray(r0)
    layout = rop.layout
    acc = np.zeros((layout.n, layout.n))
    tr_acc = 0.0
    for _ in range(n_samples):
        s = single_sample_sketch(rop, theta, cfg, rng, r0=r0)
        acc += s.matrix.values
        tr_acc += s.trace
    return NtkMatrix(acc / n_samples, layout), tr_acc / n_samples


def moving_average_init(rop, theta, cfg: SketchConfig, n_samples, alpha,
                        rng, mode="full", r0=None) -> SketchAccumulator:
    """Accumulator seeded with an n_samples Monte Carlo mean."""
    rng = _as_rng(rng)
    theta = np.asarray(theta, dtype=np.float64)
    r0 = rop.residual(theta).values if r0 is None else np.asarray(r0)
    layout = rop.layout
    if mode == "full":
        kernel, _ = monte_carlo_average(rop, theta, cfg, n_samples, rng,
                                        r0=r0)
        return SketchAccumulator(mode="full", alpha=alpha, layout=layout,
                                 matrix=kernel.values, count=n_samples)
    traces = {name: 0.0 for name in layout.names}
    for _ in range(n_samples):
        s = single_sample_sketch(rop, theta, cfg, rng, r0=r0,
                                 full_matrix=False)
        for name in traces:
            traces[name] += s.group_traces[name]
    traces = {name: v / n_samples for name, v in traces.items()}
    return SketchAccumulator(mode="traces", alpha=alpha, layout=layout,
                             traces=traces, count=n_samples)


def moving_average_update(acc: SketchAccumulator,
                          sample: SketchSample) -> SketchAccumulator:
    """Convex combination with weight alpha on the newest sample."""
    a = acc.alpha
    if acc.mode == "full":
        if sample.matrix is None:
            raise SketchError("full-matrix accumulator needs a matrix sample")
        if sample.layout.groups != acc.layout.groups:
            raise SketchError("sample layout does not match accumulator")
        new = (1.0 - a) * acc.matrix + a * sample.matrix.values
        return replace(acc, matrix=new, count=acc.count + 1)
    if set(sample.group_traces) != set(acc.traces):
        raise SketchError("sample groups do not match accumulator")
    new = {name: (1.0 - a) * acc.traces[name] + a * sample.group_traces[name]
           for name in acc.traces}
    return replace(acc, traces=new, count=acc.count + 1)


def sketch_weights(acc: SketchAccumulator,
                   fallback: LossWeights) -> LossWeights:
    """Trace-ratio weights from estimated block traces; fall back to the
    given weights whenever an estimated trace is non-positive."""
    traces = acc.group_trace_estimates()
    total = sum(traces.values())
    if any(tr <= 0.0 for tr in traces.values()):
        return fallback
    return LossWeights({name: total / tr for name, tr in traces.items()})


def alt_trace_estimate(rop, theta, cfg: AltTraceConfig, rng) -> float:
    """Trace estimate from a parameter-space Gaussian perturbation:
    squared norm of the scaled residual difference.  Biased at O(eps), and
    unable to produce off-diagonal kernel information."""
    rng = _as_rng(rng)
    theta = np.asarray(theta, dtype=np.float64)
    h = cfg.eps * rng.standard_normal(len(theta))
    r0 = rop.residual(theta).values
    r1 = rop.residual(theta + h).values
    d = (r1 - r0) / cfg.eps
    return float(d @ d)
