"""Pure NumPy fallback for the tape interpreter kernels.

Loops over graph nodes in Python while vectorizing over points per node.
Semantics are identical to the compiled extension; the compiled path is
selected at import time in :mod:`ntkadapt.kernels` when available.
"""

import numpy as np

# Opcodes duplicated here so this module has no import cycle with graph.py.
CONST, INPUT, PARAM = 0, 1, 2
ADD, SUB, MUL, DIV = 3, 4, 5, 6
TANH, SIN, COS, EXP, IPOW, FMA, FMAP, DOT = 7, 8, 9, 10, 11, 12, 13, 14

BACKEND = "python"


def _unary_derivs(op, va, vc, exponent, want3):
    """First/second (and optionally third) derivative of a primitive at va."""
    if op == TANH:
        f1 = 1.0 - vc * vc
        f2 = -2.0 * vc * f1
        f3 = -2.0 * f1 * (f1 - 2.0 * vc * vc) if want3 else None
    elif op == SIN:
        f1 = np.cos(va)
        f2 = -vc
        f3 = -f1 if want3 else None
    elif op == COS:
        f1 = -np.sin(va)
        f2 = -vc
        f3 = -f1 if want3 else None
    elif op == EXP:
        f1 = vc
        f2 = vc
        f3 = vc if want3 else None
    else:  # IPOW
        m = exponent
        f1 = m * va ** (m - 1)
        f2 = m * (m - 1) * va ** (m - 2)
        f3 = m * (m - 1) * (m - 2) * va ** (m - 3) if want3 else None
    return f1, f2, f3


def forward(op, ia, ib, ic, cval, x, theta, direction, order, V, D1, D2):
    m = len(op)
    npts = x.shape[0]
    for i in range(m):
        o = op[i]
        a = ia[i]
        b = ib[i]
        if o == CONST:
            V[i] = cval[i]
            if order >= 1:
                D1[i] = 0.0
            if order >= 2:
                D2[i] = 0.0
        elif o == INPUT:
            V[i] = x[:, a]
            if order >= 1:
                D1[i] = direction[a]
            if order >= 2:
                D2[i] = 0.0
        elif o == PARAM:
            V[i] = theta[a]
            if order >= 1:
                D1[i] = 0.0
            if order >= 2:
                D2[i] = 0.0
        elif o == ADD:
            V[i] = V[a] + V[b]
            if order >= 1:
                D1[i] = D1[a] + D1[b]
            if order >= 2:
                D2[i] = D2[a] + D2[b]
        elif o == SUB:
            V[i] = V[a] - V[b]
            if order >= 1:
                D1[i] = D1[a] - D1[b]
            if order >= 2:
                D2[i] = D2[a] - D2[b]
        elif o == MUL:
            V[i] = V[a] * V[b]
            if order >= 1:
                D1[i] = D1[a] * V[b] + V[a] * D1[b]
            if order >= 2:
                D2[i] = D2[a] * V[b] + 2.0 * D1[a] * D1[b] + V[a] * D2[b]
        elif o == DIV:
            r = 1.0 / V[b]
            V[i] = V[a] * r
            if order >= 1:
                D1[i] = (D1[a] - V[i] * D1[b]) * r
            if order >= 2:
                D2[i] = (D2[a] - 2.0 * D1[i] * D1[b] - V[i] * D2[b]) * r
        elif o == FMA:
            c = ic[i]
            V[i] = V[a] + V[b] * V[c]
            if order >= 1:
                D1[i] = D1[a] + D1[b] * V[c] + V[b] * D1[c]
            if order >= 2:
                D2[i] = (D2[a] + D2[b] * V[c] + 2.0 * D1[b] * D1[c]
                         + V[b] * D2[c])
        elif o == FMAP:
            c = ic[i]
            w = theta[b]
            V[i] = V[a] + w * V[c]
            if order >= 1:
                D1[i] = D1[a] + w * D1[c]
            if order >= 2:
                D2[i] = D2[a] + w * D2[c]
        elif o == DOT:
            L = ic[i]
            w = theta[b:b + L]
            V[i] = w @ V[a:a + L]
            if order >= 1:
                D1[i] = w @ D1[a:a + L]
            if order >= 2:
                D2[i] = w @ D2[a:a + L]
        else:
            va = V[a]
            if o == TANH:
                V[i] = np.tanh(va)
            elif o == SIN:
                V[i] = np.sin(va)
            elif o == COS:
                V[i] = np.cos(va)
            elif o == EXP:
                V[i] = np.exp(va)
            else:  # IPOW
                V[i] = va ** b
            if order >= 1:
                f1, f2, _ = _unary_derivs(o, va, V[i], b, False)
                D1[i] = f1 * D1[a]
                if order >= 2:
                    D2[i] = f2 * D1[a] * D1[a] + f1 * D2[a]
    return npts


def reverse(op, ia, ib, ic, cval, theta, V, D1, D2, order, seed_v, seed_d1,
            seed_d2, out_node, param_nodes, PG):
    m = len(op)
    npts = V.shape[1]
    PG[:] = 0.0
    VB = np.zeros((m, npts))
    D1B = np.zeros((m, npts)) if order >= 1 else None
    D2B = np.zeros((m, npts)) if order >= 2 else None
    VB[out_node] = seed_v
    if order >= 1 and seed_d1.size:
        D1B[out_node] = seed_d1
    if order >= 2 and seed_d2.size:
        D2B[out_node] = seed_d2

    for i in range(m - 1, -1, -1):
        o = op[i]
        if o <= PARAM:
            continue
        a = ia[i]
        b = ib[i]
        vb_c = VB[i]
        d1b_c = D1B[i] if order >= 1 else None
        d2b_c = D2B[i] if order >= 2 else None
        if o == ADD:
            VB[a] += vb_c
            VB[b] += vb_c
            if order >= 1:
                D1B[a] += d1b_c
                D1B[b] += d1b_c
            if order >= 2:
                D2B[a] += d2b_c
                D2B[b] += d2b_c
        elif o == SUB:
            VB[a] += vb_c
            VB[b] -= vb_c
            if order >= 1:
                D1B[a] += d1b_c
                D1B[b] -= d1b_c
            if order >= 2:
                D2B[a] += d2b_c
                D2B[b] -= d2b_c
        elif o == MUL:
            va, vv = V[a], V[b]
            VB[a] += vb_c * vv
            VB[b] += vb_c * va
            if order >= 1:
                d1a, d1b_ = D1[a], D1[b]
                VB[a] += d1b_c * d1b_
                VB[b] += d1b_c * d1a
                D1B[a] += d1b_c * vv
                D1B[b] += d1b_c * va
            if order >= 2:
                d2a, d2b_ = D2[a], D2[b]
                VB[a] += d2b_c * d2b_
                VB[b] += d2b_c * d2a
                D1B[a] += 2.0 * d2b_c * d1b_
                D1B[b] += 2.0 * d2b_c * d1a
                D2B[a] += d2b_c * vv
                D2B[b] += d2b_c * va
        elif o == FMAP:
            c = ic[i]
            w = theta[b]
            PG[b] += vb_c * V[c]
            VB[a] += vb_c
            VB[c] += vb_c * w
            if order >= 1:
                PG[b] += d1b_c * D1[c]
                D1B[a] += d1b_c
                D1B[c] += d1b_c * w
            if order >= 2:
                PG[b] += d2b_c * D2[c]
                D2B[a] += d2b_c
                D2B[c] += d2b_c * w
        elif o == DOT:
            L = ic[i]
            w = theta[b:b + L]
            PG[b:b + L] += V[a:a + L] * vb_c
            VB[a:a + L] += w[:, None] * vb_c
            if order >= 1:
                PG[b:b + L] += D1[a:a + L] * d1b_c
                D1B[a:a + L] += w[:, None] * d1b_c
            if order >= 2:
                PG[b:b + L] += D2[a:a + L] * d2b_c
                D2B[a:a + L] += w[:, None] * d2b_c
        elif o == FMA:
            c = ic[i]
            vb, vv = V[b], V[c]
            VB[a] += vb_c
            VB[b] += vb_c * vv
            VB[c] += vb_c * vb
            if order >= 1:
                d1b_, d1c_ = D1[b], D1[c]
                D1B[a] += d1b_c
                VB[b] += d1b_c * d1c_
                VB[c] += d1b_c * d1b_
                D1B[b] += d1b_c * vv
                D1B[c] += d1b_c * vb
            if order >= 2:
                D2B[a] += d2b_c
                VB[b] += d2b_c * D2[c]
                VB[c] += d2b_c * D2[b]
                D1B[b] += 2.0 * d2b_c * d1c_
                D1B[c] += 2.0 * d2b_c * d1b_
                D2B[b] += d2b_c * vv
                D2B[c] += d2b_c * vb
        elif o == DIV:
            r = 1.0 / V[b]
            vc = V[i]
            rbar = np.zeros(npts)
            if order >= 2:
                d1b_ = D1[b]
                d1c = D1[i]
                d2c = D2[i]
                D2B[a] += d2b_c * r
                d1b_c = d1b_c + d2b_c * (-2.0 * d1b_ * r)
                vb_c = vb_c + d2b_c * (-D2[b] * r)
                D1B[b] += d2b_c * (-2.0 * d1c * r)
                D2B[b] += d2b_c * (-vc * r)
                rbar += d2b_c * d2c * V[b]
            if order >= 1:
                d1b_ = D1[b]
                d1c = D1[i]
                D1B[a] += d1b_c * r
                vb_c = vb_c + d1b_c * (-d1b_ * r)
                D1B[b] += d1b_c * (-vc * r)
                rbar += d1b_c * d1c * V[b]
            VB[a] += vb_c * r
            rbar += vb_c * vc * V[b]
            VB[b] += rbar * (-r * r)
        else:
            va = V[a]
            vc = V[i]
            want3 = order >= 2
            f1, f2, f3 = _unary_derivs(o, va, vc, b, want3)
            VB[a] += vb_c * f1
            if order >= 1:
                d1a = D1[a]
                VB[a] += d1b_c * f2 * d1a
                D1B[a] += d1b_c * f1
            if order >= 2:
                d2a = D2[a]
                VB[a] += d2b_c * (f3 * d1a * d1a + f2 * d2a)
                D1B[a] += 2.0 * d2b_c * f2 * d1a
                D2B[a] += d2b_c * f1

    for j in range(len(param_nodes)):
        node = param_nodes[j]
        if node >= 0:
            PG[j] += VB[node]
    return npts
