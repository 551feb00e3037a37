"""Scalar computation graphs with nested input/parameter differentiation.

A ScalarGraph is a topologically ordered straight-line program over a small
closed set of primitives (+, -, *, /, tanh, sin, cos, exp, integer powers,
constants).  Evaluation is batched over collocation points: every node holds
one value per point.  Spatial derivatives up to order two are obtained by
forward propagation of truncated Taylor coefficients along a direction in
input space; parameter gradients of any propagated quantity come from a
single reverse sweep over the same tape (forward-over-reverse).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import forward as _kforward
from .kernels import reverse as _kreverse

# Opcode table shared with the compiled kernels.
OP_CONST = 0
OP_INPUT = 1
OP_PARAM = 2
OP_ADD = 3
OP_SUB = 4
OP_MUL = 5
OP_DIV = 6
OP_TANH = 7
OP_SIN = 8
OP_COS = 9
OP_EXP = 10
OP_IPOW = 11
OP_FMA = 12
OP_FMAP = 13
OP_DOT = 14

_BINARY = (OP_ADD, OP_SUB, OP_MUL, OP_DIV)
_UNARY = (OP_TANH, OP_SIN, OP_COS, OP_EXP, OP_IPOW)

DEFAULT_CHUNK = 32


class AutodiffError(Exception):
    """Base class for graph construction and evaluation failures."""


class DimensionMismatch(AutodiffError):
    """Raised when x or theta does not match the graph bindings."""


class UnsupportedDerivative(AutodiffError):
    """Raised for derivative requests of total order above two."""


@dataclass(frozen=True)
class DerivativeRequest:
    """Which input-derivative of the graph output to produce.

    ``orders`` has one entry per input coordinate; the total order must be
    at most two.  ``()`` or all zeros means the plain output value.
    """

    orders: tuple = ()

    def __post_init__(self):
        if any(o < 0 for o in self.orders):
            raise UnsupportedDerivative("negative derivative order")
        if sum(self.orders) > 2:
            raise UnsupportedDerivative(
                f"total derivative order {sum(self.orders)} > 2"
            )

    @property
    def total_order(self):
        return sum(self.orders)


class ScalarGraph:
    """Immutable tape produced by GraphBuilder.build()."""

    __slots__ = ("op", "ia", "ib", "ic", "cval", "n_inputs", "n_params",
                 "param_nodes", "input_nodes", "output")

    def __init__(self, op, ia, ib, ic, cval, n_inputs, n_params,
                 param_nodes, input_nodes, output):
        self.op = op
        self.ia = ia
        self.ib = ib
        self.ic = ic
        self.cval = cval
        self.n_inputs = n_inputs
        self.n_params = n_params
        self.param_nodes = param_nodes
        self.input_nodes = input_nodes
        self.output = output

    def __len__(self):
        return len(self.op)

    def _check(self, x, theta):
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise DimensionMismatch(
                f"input binding expects {self.n_inputs} coordinates, "
                f"got array of shape {x.shape}"
            )
        if theta.shape != (self.n_params,):
            raise DimensionMismatch(
                f"parameter binding expects length {self.n_params}, "
                f"got shape {theta.shape}"
            )


class GraphBuilder:
    """Builds a ScalarGraph node by node; indices are topologically ordered."""

    def __init__(self, n_inputs, n_params):
        self.n_inputs = n_inputs
        self.n_params = n_params
        self._op = []
        self._ia = []
        self._ib = []
        self._ic = []
        self._cval = []
        self._input_cache = {}
        self._param_cache = {}
        self._const_cache = {}

    def _node(self, op, ia=-1, ib=-1, ic=-1, cval=0.0):
        self._op.append(op)
        self._ia.append(ia)
        self._ib.append(ib)
        self._ic.append(ic)
        self._cval.append(cval)
        return len(self._op) - 1

    def input(self, k):
        if not 0 <= k < self.n_inputs:
            raise DimensionMismatch(f"input index {k} out of range")
        if k not in self._input_cache:
            self._input_cache[k] = self._node(OP_INPUT, ia=k)
        return self._input_cache[k]

    def param(self, j):
        if not 0 <= j < self.n_params:
            raise DimensionMismatch(f"parameter index {j} out of range")
        if j not in self._param_cache:
            self._param_cache[j] = self._node(OP_PARAM, ia=j)
        return self._param_cache[j]

    def const(self, c):
        c = float(c)
        if c not in self._const_cache:
            self._const_cache[c] = self._node(OP_CONST, cval=c)
        return self._const_cache[c]

    def _bin(self, op, a, b):
        n = len(self._op)
        if not (0 <= a < n and 0 <= b < n):
            raise AutodiffError("operand index out of order")
        return self._node(op, ia=a, ib=b)

    def add(self, a, b):
        return self._bin(OP_ADD, a, b)

    def sub(self, a, b):
        return self._bin(OP_SUB, a, b)

    def mul(self, a, b):
        return self._bin(OP_MUL, a, b)

    def div(self, a, b):
        return self._bin(OP_DIV, a, b)

    def tanh(self, a):
        return self._node(OP_TANH, ia=a)

    def sin(self, a):
        return self._node(OP_SIN, ia=a)

    def cos(self, a):
        return self._node(OP_COS, ia=a)

    def exp(self, a):
        return self._node(OP_EXP, ia=a)

    def ipow(self, a, exponent):
        return self._node(OP_IPOW, ia=a, ib=int(exponent))

    def fma(self, a, b, c):
        """Fused a + b * c in one node."""
        n = len(self._op)
        if not (0 <= a < n and 0 <= b < n and 0 <= c < n):
            raise AutodiffError("operand index out of order")
        return self._node(OP_FMA, ia=a, ib=b, ic=c)

    def fmap(self, a, j, c):
        """Fused a + theta[j] * c without materializing a parameter node;
        the parameter's adjoint is accumulated straight into the gradient."""
        n = len(self._op)
        if not (0 <= a < n and 0 <= c < n):
            raise AutodiffError("operand index out of order")
        if not 0 <= j < self.n_params:
            raise DimensionMismatch(f"parameter index {j} out of range")
        return self._node(OP_FMAP, ia=a, ib=j, ic=c)

    def dot(self, a0, length, p0):
        """Fused inner product theta[p0:p0+length] . nodes[a0:a0+length]
        over a contiguous run of nodes and parameters; the parameters'
        adjoints are accumulated straight into the gradient."""
        n = len(self._op)
        if length < 1 or a0 < 0 or a0 + length > n:
            raise AutodiffError("operand index out of order")
        if p0 < 0 or p0 + length > self.n_params:
            raise DimensionMismatch("parameter range out of bounds")
        return self._node(OP_DOT, ia=a0, ib=p0, ic=length)

    def build(self, output):
        param_nodes = np.full(self.n_params, -1, dtype=np.int32)
        for j, idx in self._param_cache.items():
            param_nodes[j] = idx
        input_nodes = np.full(self.n_inputs, -1, dtype=np.int32)
        for k, idx in self._input_cache.items():
            input_nodes[k] = idx
        return ScalarGraph(
            op=np.asarray(self._op, dtype=np.int32),
            ia=np.asarray(self._ia, dtype=np.int32),
            ib=np.asarray(self._ib, dtype=np.int32),
            ic=np.asarray(self._ic, dtype=np.int32),
            cval=np.asarray(self._cval, dtype=np.float64),
            n_inputs=self.n_inputs,
            n_params=self.n_params,
            param_nodes=param_nodes,
            input_nodes=input_nodes,
            output=int(output),
        )


@dataclass
class _ForwardState:
    """Per-chunk scratch from a forward pass, consumed by the reverse sweep."""

    V: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    order: int
    theta: np.ndarray


def _forward_chunk(graph, x, theta, direction, order):
    m = len(graph)
    npts = x.shape[0]
    V = np.empty((m, npts))
    D1 = np.empty((m, npts)) if order >= 1 else np.empty((0, 0))
    D2 = np.empty((m, npts)) if order >= 2 else np.empty((0, 0))
    dirvec = (np.zeros(graph.n_inputs) if direction is None
              else np.asarray(direction, dtype=np.float64))
    theta_c = np.ascontiguousarray(theta, dtype=np.float64)
    _kforward(graph.op, graph.ia, graph.ib, graph.ic, graph.cval,
              np.ascontiguousarray(x, dtype=np.float64),
              theta_c, dirvec, order, V, D1, D2)
    return _ForwardState(V, D1, D2, order, theta_c)


def _reverse_chunk(graph, state, seed_v, seed_d1, seed_d2):
    npts = state.V.shape[1]
    pg = np.empty((graph.n_params, npts))
    z = np.zeros(0)
    _kreverse(graph.op, graph.ia, graph.ib, graph.ic, graph.cval,
              state.theta, state.V, state.D1, state.D2, state.order,
              np.ascontiguousarray(seed_v, dtype=np.float64),
              np.ascontiguousarray(seed_d1, dtype=np.float64) if seed_d1 is not None else z,
              np.ascontiguousarray(seed_d2, dtype=np.float64) if seed_d2 is not None else z,
              graph.output, graph.param_nodes, pg)
    return pg


def forward_states(graph, x, theta, direction=None, order=0):
    """Per-chunk forward sweeps over x, kept for later reverse passes."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64)
    graph._check(x, theta)
    states = []
    for lo in range(0, x.shape[0], DEFAULT_CHUNK):
        hi = min(lo + DEFAULT_CHUNK, x.shape[0])
        states.append((lo, hi,
                       _forward_chunk(graph, x[lo:hi], theta, direction,
                                      order)))
    return states


def outputs_from_states(graph, states, order):
    out = graph.output
    vals = []
    for _, _, st in states:
        if order == 0:
            vals.append((st.V[out].copy(),))
        elif order == 1:
            vals.append((st.V[out].copy(), st.D1[out].copy()))
        else:
            vals.append((st.V[out].copy(), st.D1[out].copy(),
                         st.D2[out].copy()))
    return tuple(np.concatenate(parts) for parts in zip(*vals))


def grad_from_states(graph, states, order, seeds, sum_points=True):
    """Seeded reverse sweeps over retained forward states.

    ``seeds`` is a list of (seed_v, seed_d1, seed_d2) triples; returns one
    gradient per triple (summed over points, or per-point matrices).
    """
    npts = states[-1][1]
    zeros = np.zeros(npts)

    def pick(seed, lo, hi):
        if seed is None:
            return zeros[lo:hi]
        return np.asarray(seed, dtype=np.float64)[lo:hi]

    if sum_points:
        out = [np.zeros(graph.n_params) for _ in seeds]
    else:
        out = [np.empty((graph.n_params, npts)) for _ in seeds]
    for lo, hi, st in states:
        for si, (sv, s1, s2) in enumerate(seeds):
            pg = _reverse_chunk(graph, st, pick(sv, lo, hi),
                                pick(s1, lo, hi) if order >= 1 else None,
                                pick(s2, lo, hi) if order >= 2 else None)
            if sum_points:
                out[si] += pg.sum(axis=1)
            else:
                out[si][:, lo:hi] = pg
    return out


def eval_batch(graph, x, theta, direction=None, order=0):
    """Values (and directional derivatives) of the output at many points.

    Returns the tuple of arrays (value, d1, d2) truncated at ``order``.
    Direction is a vector in input space; pure coordinate derivatives use a
    basis vector.
    """
    states = forward_states(graph, x, theta, direction, order)
    return outputs_from_states(graph, states, order)


def grad_batch(graph, x, theta, direction=None, order=0,
               seed_v=None, seed_d1=None, seed_d2=None, sum_points=False):
    """Parameter gradients of a seeded combination of output components.

    Seeds are per-point weights on (value, first, second directional
    derivative) of the output.  With ``sum_points`` the weighted gradients
    are accumulated into a single vector (a Jacobian-vector product);
    otherwise the full per-point gradient matrix of shape (p, n_points) is
    returned.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64)
    graph._check(x, theta)
    npts = x.shape[0]
    if seed_v is None and seed_d1 is None and seed_d2 is None:
        seed_v = np.ones(npts)
    zeros = np.zeros(npts)
    sv = zeros if seed_v is None else np.asarray(seed_v, dtype=np.float64)
    s1 = zeros if seed_d1 is None else np.asarray(seed_d1, dtype=np.float64)
    s2 = zeros if seed_d2 is None else np.asarray(seed_d2, dtype=np.float64)

    states = forward_states(graph, x, theta, direction, order)
    return grad_from_states(graph, states, order, [(sv, s1, s2)],
                            sum_points=sum_points)[0]


def grad_batch_multi(graph, x, theta, direction, order, seeds):
    """Several seeded reverse sweeps sharing one forward pass per chunk.

    ``seeds`` is a list of (seed_v, seed_d1, seed_d2) triples (entries may
    be None); returns one summed gradient vector per triple.
    """
    states = forward_states(graph, x, theta, direction, order)
    return grad_from_states(graph, states, order, seeds, sum_points=True)


def _as_direction(graph, req):
    """Map a pure derivative multi-index to (direction, order)."""
    orders = req.orders if req.orders else (0,) * graph.n_inputs
    if len(orders) != graph.n_inputs:
        raise DimensionMismatch(
            f"derivative multi-index has {len(orders)} entries for a graph "
            f"with {graph.n_inputs} inputs"
        )
    total = sum(orders)
    if total == 0:
        return None, 0, None
    active = [k for k, o in enumerate(orders) if o > 0]
    if len(active) == 1:
        d = np.zeros(graph.n_inputs)
        d[active[0]] = 1.0
        return d, total, None
    # Mixed second derivative d2/dx_k dx_l via polarization of the
    # directional second derivative.
    k, l = active
    return None, 2, (k, l)


def evaluate(graph, x, theta):
    """u_theta(x) for a single point x."""
    (v,) = eval_batch(graph, np.atleast_2d(x), theta, order=0)
    return float(v[0])


def input_derivative(graph, x, theta, req):
    """Exact derivative of the output in the requested input coordinates."""
    direction, order, mixed = _as_direction(graph, req)
    x = np.atleast_2d(x)
    if mixed is None:
        out = eval_batch(graph, x, theta, direction=direction, order=order)
        return float(out[order][0])
    k, l = mixed
    ek = np.zeros(graph.n_inputs)
    ek[k] = 1.0
    el = np.zeros(graph.n_inputs)
    el[l] = 1.0
    dkl = eval_batch(graph, x, theta, direction=ek + el, order=2)[2][0]
    dkk = eval_batch(graph, x, theta, direction=ek, order=2)[2][0]
    dll = eval_batch(graph, x, theta, direction=el, order=2)[2][0]
    return float((dkl - dkk - dll) / 2.0)


def parameter_gradient(graph, x, theta, req):
    """Gradient w.r.t. theta of input_derivative(graph, x, theta, req)."""
    direction, order, mixed = _as_direction(graph, req)
    x = np.atleast_2d(x)
    ones = np.ones(x.shape[0])
    if mixed is None:
        seeds = {0: dict(seed_v=ones), 1: dict(seed_d1=ones),
                 2: dict(seed_d2=ones)}[order]
        g = grad_batch(graph, x, theta, direction=direction, order=order,
                       sum_points=True, **seeds)
        return g
    k, l = mixed
    ek = np.zeros(graph.n_inputs)
    ek[k] = 1.0
    el = np.zeros(graph.n_inputs)
    el[l] = 1.0
    gkl = grad_batch(graph, x, theta, direction=ek + el, order=2,
                     seed_d2=ones, sum_points=True)
    gkk = grad_batch(graph, x, theta, direction=ek, order=2,
                     seed_d2=ones, sum_points=True)
    gll = grad_batch(graph, x, theta, direction=el, order=2,
                     seed_d2=ones, sum_points=True)
    return (gkl - gkk - gll) / 2.0
