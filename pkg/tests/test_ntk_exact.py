"""Exact tangent kernel, block traces, trace-ratio weights, Jacobi
eigensolver.  The matmul oracle is a plain triple loop."""

import io

import numpy as np
import pytest

from ntkadapt.ntk_exact import (DegenerateKernel, KernelError, LossWeights,
                                NtkMatrix, block_trace, dump_csv,
                                eigenvalues_symmetric, ntk, ntk_weights,
                                trace_ratio_weights)
from ntkadapt.problems import GroupLayout


def _layout(*counts):
    names = ["D", "B1", "B2", "B3"]
    return GroupLayout(tuple(zip(names[:len(counts)], counts)))


def test_ntk_matches_triple_loop():
    rng = np.random.default_rng(0)
    p, n = 7, 5
    jac = rng.standard_normal((p, n))
    k = ntk(jac, _layout(3, 2)).values
    want = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            for m in range(p):
                want[i, j] += jac[m, i] * jac[m, j]
    assert np.max(np.abs(k - want)) < 1e-13
    assert np.array_equal(k, k.T)


def test_ntk_is_positive_semidefinite():
    rng = np.random.default_rng(1)
    jac = rng.standard_normal((4, 9))  # rank-deficient: p < n
    k = ntk(jac, _layout(5, 4))
    ev = eigenvalues_symmetric(k)
    assert ev[0] >= -1e-8 * np.linalg.norm(k.values)
    # Rank is at most min(p, n).
    assert np.sum(ev > 1e-10 * ev[-1]) <= 4


def test_block_addressing_and_cross_block_symmetry():
    rng = np.random.default_rng(2)
    jac = rng.standard_normal((6, 7))
    layout = _layout(4, 3)
    k = ntk(jac, layout)
    assert np.allclose(k.block("D", "B1"), k.block("B1", "D").T)
    assert block_trace(k, "D") == pytest.approx(
        float(np.trace(k.values[:4, :4])), rel=1e-14)
    assert (block_trace(k, "D") + block_trace(k, "B1")
            == pytest.approx(float(np.trace(k.values)), rel=1e-13))


def test_ntk_weights_diagonal_example():
    # K = diag(3, 3, 1, 1): traces are (6, 2), total 8, weights (8/6, 4).
    layout = _layout(2, 2)
    k = NtkMatrix(np.diag([3.0, 3.0, 1.0, 1.0]), layout)
    w = ntk_weights(k)
    assert w["D"] == pytest.approx(8.0 / 6.0, rel=1e-14)
    assert w["B1"] == pytest.approx(4.0, rel=1e-14)


def test_ntk_weights_scale_equivariance():
    # Scaling K leaves trace-ratio weights unchanged.
    rng = np.random.default_rng(3)
    jac = rng.standard_normal((8, 6))
    layout = _layout(3, 3)
    w1 = ntk_weights(ntk(jac, layout))
    w2 = ntk_weights(ntk(7.5 * jac, layout))
    for name in layout.names:
        assert w1[name] == pytest.approx(w2[name], rel=1e-12)


def test_weighted_harmonic_identity():
    # Sum over groups of 1/weight equals the number of groups' share:
    # sum_g tr_g / total = 1.
    rng = np.random.default_rng(4)
    jac = rng.standard_normal((10, 9))
    layout = _layout(4, 3, 2)
    w = ntk_weights(ntk(jac, layout))
    assert sum(1.0 / w[name] for name in layout.names) == pytest.approx(
        1.0, rel=1e-12)


def test_degenerate_kernel_raises():
    layout = _layout(1, 1)
    k = NtkMatrix(np.diag([1.0, 0.0]), layout)
    with pytest.raises(DegenerateKernel):
        ntk_weights(k)
    with pytest.raises(DegenerateKernel):
        trace_ratio_weights({"D": 1.0, "B1": -0.5})


def test_trace_ratio_weights_from_scalars():
    w = trace_ratio_weights({"D": 6.0, "B1": 2.0})
    assert w["D"] == pytest.approx(8.0 / 6.0)
    assert w["B1"] == pytest.approx(4.0)


def test_loss_weights_validation_and_expand():
    with pytest.raises(KernelError):
        LossWeights({"D": 0.0})
    with pytest.raises(KernelError):
        LossWeights({"D": np.inf})
    w = LossWeights({"D": 2.0, "B1": 5.0})
    lam = w.expand(_layout(2, 3))
    assert np.array_equal(lam, [2.0, 2.0, 5.0, 5.0, 5.0])
    assert w.max_difference(LossWeights({"D": 1.0, "B1": 5.5})) == 1.0


def test_kernel_shape_checked():
    with pytest.raises(KernelError):
        NtkMatrix(np.zeros((3, 3)), _layout(2, 2))
    with pytest.raises(KernelError):
        ntk(np.zeros((4, 3)), _layout(2, 2))


def test_jacobi_diagonal_and_2x2():
    assert np.allclose(eigenvalues_symmetric(np.diag([3.0, 1.0, 2.0])),
                       [1.0, 2.0, 3.0])
    # [[2, 1], [1, 2]] has eigenvalues 1 and 3.
    ev = eigenvalues_symmetric(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(ev, [1.0, 3.0], rtol=1e-12)
    assert np.array_equal(eigenvalues_symmetric(np.zeros((3, 3))),
                          np.zeros(3))


def test_jacobi_random_matrix_invariants():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((8, 8))
    a = (a + a.T) / 2.0
    ev = eigenvalues_symmetric(a)
    assert np.sum(ev) == pytest.approx(np.trace(a), abs=1e-10)
    assert np.sum(ev ** 2) == pytest.approx(np.linalg.norm(a) ** 2,
                                            rel=1e-10)
    assert np.allclose(ev, np.linalg.eigvalsh(a), atol=1e-10)


def test_jacobi_rejects_asymmetric():
    with pytest.raises(KernelError):
        eigenvalues_symmetric(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_dump_csv_layout_and_determinism():
    rng = np.random.default_rng(6)
    jac = rng.standard_normal((5, 4))
    k = ntk(jac, _layout(2, 2))
    buf1, buf2 = io.StringIO(), io.StringIO()
    dump_csv(k, buf1)
    dump_csv(k, buf2)
    text = buf1.getvalue()
    assert text == buf2.getvalue()
    lines = text.strip().split("\n")
    assert lines[0] == "D[0],D[1],B1[0],B1[1]"
    assert len(lines) == 5
    back = np.array([[float(v) for v in row.split(",")]
                     for row in lines[1:]])
    assert np.array_equal(back, k.values)
