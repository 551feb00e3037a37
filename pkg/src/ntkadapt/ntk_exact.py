"""Exact tangent-kernel computation, block traces, trace-ratio weights,
and a cyclic Jacobi eigensolver for diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import GroupLayout


class KernelError(Exception):
    pass


class DegenerateKernel(KernelError):
    """A block trace was non-positive; trace-ratio weights are undefined."""


@dataclass
class NtkMatrix:
    """Dense symmetric Gram matrix of residual gradients, with group-block
    addressing through its layout."""

    values: np.ndarray
    layout: GroupLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = self.layout.n
        if self.values.shape != (n, n):
            raise KernelError(
                f"kernel must be {n}x{n} for this layout, got "
                f"{self.values.shape}"
            )

    @property
    def n(self):
        return self.values.shape[0]

    def block(self, row_group, col_group):
        rlo, rhi = self.layout.index_range(row_group)
        clo, chi = self.layout.index_range(col_group)
        return self.values[rlo:rhi, clo:chi]


@dataclass
class LossWeights:
    """One strictly positive scalar per residual group (block-diagonal)."""

    weights: dict  # group name -> scalar

    def __post_init__(self):
        for name, w in self.weights.items():
            if not np.isfinite(w) or w <= 0.0:
                raise KernelError(
                    f"loss weight for group {name!r} must be positive and "
                    f"finite, got {w}"
                )

    def __getitem__(self, name):
        return self.weights[name]

    def expand(self, layout: GroupLayout):
        """Per-entry weight vector of length n in layout order."""
        out = np.empty(layout.n)
        for name, _ in layout.groups:
            lo, hi = layout.index_range(name)
            out[lo:hi] = self.weights[name]
        return out

    def max_difference(self, other):
        """Largest eigenvalue of the diagonal difference self - other,
        i.e. the signed maximum over per-group weight differences."""
        return max(self.weights[g] - other.weights[g] for g in self.weights)


def ntk(jacobian, layout: GroupLayout) -> NtkMatrix:
    """K = J^T J, symmetrized to remove floating-point asymmetry."""
    j = np.asarray(jacobian, dtype=np.float64)
    if j.ndim != 2 or j.shape[1] != layout.n:
        raise KernelError(
            f"Jacobian must be p x {layout.n}, got {j.shape}"
        )
    k = j.T @ j
    k = (k + k.T) / 2.0
    return NtkMatrix(k, layout)


def block_trace(kernel: NtkMatrix, group) -> float:
    lo, hi = kernel.layout.index_range(group)
    return float(np.trace(kernel.values[lo:hi, lo:hi]))


def ntk_weights(kernel: NtkMatrix) -> LossWeights:
    """Trace-ratio weights: total trace over per-group block trace."""
    traces = {name: block_trace(kernel, name)
              for name in kernel.layout.names}
    total = sum(traces.values())
    for name, tr in traces.items():
        if tr <= 0.0:
            raise DegenerateKernel(
                f"block trace for group {name!r} is {tr}; cannot form "
                f"trace-ratio weights"
            )
    return LossWeights({name: total / tr for name, tr in traces.items()})


def trace_ratio_weights(traces: dict) -> LossWeights:
    """Trace-ratio weights from per-group trace scalars (estimated or
    exact); raises DegenerateKernel on non-positive entries."""
    total = sum(traces.values())
    for name, tr in traces.items():
        if tr <= 0.0:
            raise DegenerateKernel(
                f"trace for group {name!r} is {tr}"
            )
    return LossWeights({name: total / tr for name, tr in traces.items()})


def eigenvalues_symmetric(kernel, max_sweeps=100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.

    Sweeps zero every off-diagonal entry in turn until the off-diagonal
    Frobenius norm falls below 1e-12 times the matrix norm.
    """
    a = np.array(kernel.values if isinstance(kernel, NtkMatrix) else kernel,
                 dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise KernelError("matrix must be symmetric")
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n)
    tol = 1e-12 * norm

    def off_norm(m):
        d = m - np.diag(np.diag(m))
        return np.linalg.norm(d)

    for _ in range(max_sweeps):
        off = off_norm(a)
        if off <= tol:
            return np.sort(np.diag(a))
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol / (n * n):
                    continue
                # Classic 2x2 symmetric Schur decomposition.
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    off = off_norm(a)
    if off > tol:
        raise KernelError(
            f"Jacobi eigensolver failed to converge after {max_sweeps} "
            f"sweeps (off-diagonal norm {off:.3e}, tolerance {tol:.3e})"
        )
    return np.sort(np.diag(a))


def dump_csv(kernel: NtkMatrix, fh):
    """Row-major CSV with a header row of group-qualified indices."""
    labels = []
    for name, count in kernel.layout.groups:
        labels.extend(f"{name}[{i}]" for i in range(count))
    fh.write(",".join(labels) + "\n")
    for row in kernel.values:
        fh.write(",".join(repr(float(v)) for v in row) + "\n")
