# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled tape interpreter kernels.

Same contract as the pure NumPy fallback: a forward sweep filling value and
directional-derivative rows per node, and a seeded reverse sweep producing
per-point parameter gradients.  Loops are specialized per derivative order
so the per-point inner loops stay branch-free and vectorizable.  Selected at
import time in :mod:`ntkadapt.kernels`.
"""

import numpy as np

from libc.math cimport cos, exp, pow, sin, tanh

BACKEND = "compiled"

cdef enum:
    CONST = 0
    INPUT = 1
    PARAM = 2
    ADD = 3
    SUB = 4
    MUL = 5
    DIV = 6
    TANH = 7
    SIN = 8
    COS = 9
    EXP = 10
    IPOW = 11
    FMA = 12
    FMAP = 13
    DOT = 14


def forward(const int[::1] op, const int[::1] ia, const int[::1] ib,
            const int[::1] ic, const double[::1] cval,
            const double[:, ::1] x, const double[::1] theta,
            const double[::1] direction, int order, double[:, ::1] V,
            double[:, ::1] D1, double[:, ::1] D2):
    cdef Py_ssize_t m = op.shape[0]
    cdef Py_ssize_t npts = x.shape[0]
    cdef Py_ssize_t i, k, j2
    cdef int o, a, b, c
    cdef double va, vc, f1, f2, r, d1a, d1i, cv, dv
    for i in range(m):
        o = op[i]
        a = ia[i]
        b = ib[i]
        if o == CONST or o == PARAM:
            cv = cval[i] if o == CONST else theta[a]
            for k in range(npts):
                V[i, k] = cv
            if order >= 1:
                for k in range(npts):
                    D1[i, k] = 0.0
            if order >= 2:
                for k in range(npts):
                    D2[i, k] = 0.0
        elif o == INPUT:
            dv = direction[a]
            for k in range(npts):
                V[i, k] = x[k, a]
            if order >= 1:
                for k in range(npts):
                    D1[i, k] = dv
            if order >= 2:
                for k in range(npts):
                    D2[i, k] = 0.0
        elif o == ADD:
            for k in range(npts):
                V[i, k] = V[a, k] + V[b, k]
            if order >= 1:
                for k in range(npts):
                    D1[i, k] = D1[a, k] + D1[b, k]
            if order >= 2:
                for k in range(npts):
                    D2[i, k] = D2[a, k] + D2[b, k]
        elif o == SUB:
            for k in range(npts):
                V[i, k] = V[a, k] - V[b, k]
            if order >= 1:
                for k in range(npts):
                    D1[i, k] = D1[a, k] - D1[b, k]
            if order >= 2:
                for k in range(npts):
                    D2[i, k] = D2[a, k] - D2[b, k]
        elif o == MUL:
            for k in range(npts):
                V[i, k] = V[a, k] * V[b, k]
            if order >= 1:
                for k in range(npts):
                    D1[i, k] = D1[a, k] * V[b, k] + V[a, k] * D1[b, k]
            if order >= 2:
                for k in range(npts):
                    D2[i, k] = (D2[a, k] * V[b, k]
                                + 2.0 * D1[a, k] * D1[b, k]
                                + V[a, k] * D2[b, k])
        elif o == FMA:
            c = ic[i]
            for k in range(npts):
                V[i, k] = V[a, k] + V[b, k] * V[c, k]
            if order >= 1:
                for k in range(npts):
                    D1[i, k] = (D1[a, k] + D1[b, k] * V[c, k]
                                + V[b, k] * D1[c, k])
            if order >= 2:
                for k in range(npts):
                    D2[i, k] = (D2[a, k] + D2[b, k] * V[c, k]
                                + 2.0 * D1[b, k] * D1[c, k]
                                + V[b, k] * D2[c, k])
        elif o == FMAP:
            c = ic[i]
            cv = theta[b]
            for k in range(npts):
                V[i, k] = V[a, k] + cv * V[c, k]
            if order >= 1:
                for k in range(npts):
                    D1[i, k] = D1[a, k] + cv * D1[c, k]
            if order >= 2:
                for k in range(npts):
                    D2[i, k] = D2[a, k] + cv * D2[c, k]
        elif o == DOT:
            c = ic[i]
            for k in range(npts):
                V[i, k] = 0.0
            for j2 in range(c):
                cv = theta[b + j2]
                for k in range(npts):
                    V[i, k] += cv * V[a + j2, k]
            if order >= 1:
                for k in range(npts):
                    D1[i, k] = 0.0
                for j2 in range(c):
                    cv = theta[b + j2]
                    for k in range(npts):
                        D1[i, k] += cv * D1[a + j2, k]
            if order >= 2:
                for k in range(npts):
                    D2[i, k] = 0.0
                for j2 in range(c):
                    cv = theta[b + j2]
                    for k in range(npts):
                        D2[i, k] += cv * D2[a + j2, k]
        elif o == DIV:
            if order == 0:
                for k in range(npts):
                    V[i, k] = V[a, k] / V[b, k]
            elif order == 1:
                for k in range(npts):
                    r = 1.0 / V[b, k]
                    V[i, k] = V[a, k] * r
                    D1[i, k] = (D1[a, k] - V[i, k] * D1[b, k]) * r
            else:
                for k in range(npts):
                    r = 1.0 / V[b, k]
                    V[i, k] = V[a, k] * r
                    d1i = (D1[a, k] - V[i, k] * D1[b, k]) * r
                    D1[i, k] = d1i
                    D2[i, k] = (D2[a, k] - 2.0 * d1i * D1[b, k]
                                - V[i, k] * D2[b, k]) * r
        else:
            if order == 0:
                for k in range(npts):
                    va = V[a, k]
                    if o == TANH:
                        vc = tanh(va)
                    elif o == SIN:
                        vc = sin(va)
                    elif o == COS:
                        vc = cos(va)
                    elif o == EXP:
                        vc = exp(va)
                    else:
                        vc = pow(va, b)
                    V[i, k] = vc
            elif order == 1:
                for k in range(npts):
                    va = V[a, k]
                    if o == TANH:
                        vc = tanh(va)
                        f1 = 1.0 - vc * vc
                    elif o == SIN:
                        vc = sin(va)
                        f1 = cos(va)
                    elif o == COS:
                        vc = cos(va)
                        f1 = -sin(va)
                    elif o == EXP:
                        vc = exp(va)
                        f1 = vc
                    else:
                        vc = pow(va, b)
                        f1 = b * pow(va, b - 1)
                    V[i, k] = vc
                    D1[i, k] = f1 * D1[a, k]
            else:
                for k in range(npts):
                    va = V[a, k]
                    if o == TANH:
                        vc = tanh(va)
                        f1 = 1.0 - vc * vc
                        f2 = -2.0 * vc * f1
                    elif o == SIN:
                        vc = sin(va)
                        f1 = cos(va)
                        f2 = -vc
                    elif o == COS:
                        vc = cos(va)
                        f1 = -sin(va)
                        f2 = -vc
                    elif o == EXP:
                        vc = exp(va)
                        f1 = vc
                        f2 = vc
                    else:
                        vc = pow(va, b)
                        f1 = b * pow(va, b - 1)
                        f2 = b * (b - 1) * pow(va, b - 2)
                    d1a = D1[a, k]
                    V[i, k] = vc
                    D1[i, k] = f1 * d1a
                    D2[i, k] = f2 * d1a * d1a + f1 * D2[a, k]
    return npts


# Reusable adjoint workspaces keyed by shape, so per-chunk calls do not pay
# repeated allocation and page-zeroing costs.
_workspaces = {}


def _workspace(m, npts, order):
    key = (m, npts, order)
    ws = _workspaces.get(key)
    if ws is None:
        ws = tuple(np.empty((m, npts)) for _ in range(order + 1))
        if len(_workspaces) >= 32:
            _workspaces.clear()
        _workspaces[key] = ws
    return ws


cdef void _rev0(const int[::1] op, const int[::1] ia, const int[::1] ib,
                const int[::1] ic, const double[::1] theta,
                const double[:, ::1] V, double[:, ::1] VB,
                double[:, ::1] PG, Py_ssize_t npts) noexcept:
    cdef Py_ssize_t m = op.shape[0]
    cdef Py_ssize_t i, k, j2
    cdef int o, a, b, c
    cdef double va, vc, f1, r, w
    for i in range(m - 1, -1, -1):
        o = op[i]
        if o <= PARAM:
            continue
        a = ia[i]
        b = ib[i]
        if o == ADD:
            for k in range(npts):
                VB[a, k] += VB[i, k]
                VB[b, k] += VB[i, k]
        elif o == SUB:
            for k in range(npts):
                VB[a, k] += VB[i, k]
                VB[b, k] -= VB[i, k]
        elif o == MUL:
            for k in range(npts):
                VB[a, k] += VB[i, k] * V[b, k]
                VB[b, k] += VB[i, k] * V[a, k]
        elif o == FMAP:
            c = ic[i]
            w = theta[b]
            for k in range(npts):
                PG[b, k] += VB[i, k] * V[c, k]
                VB[a, k] += VB[i, k]
                VB[c, k] += VB[i, k] * w
        elif o == DOT:
            c = ic[i]
            for j2 in range(c):
                w = theta[b + j2]
                for k in range(npts):
                    PG[b + j2, k] += VB[i, k] * V[a + j2, k]
                    VB[a + j2, k] += VB[i, k] * w
        elif o == FMA:
            c = ic[i]
            for k in range(npts):
                VB[a, k] += VB[i, k]
                VB[b, k] += VB[i, k] * V[c, k]
                VB[c, k] += VB[i, k] * V[b, k]
        elif o == DIV:
            for k in range(npts):
                r = 1.0 / V[b, k]
                VB[a, k] += VB[i, k] * r
                VB[b, k] -= VB[i, k] * V[i, k] * r
        else:
            for k in range(npts):
                va = V[a, k]
                vc = V[i, k]
                if o == TANH:
                    f1 = 1.0 - vc * vc
                elif o == SIN:
                    f1 = cos(va)
                elif o == COS:
                    f1 = -sin(va)
                elif o == EXP:
                    f1 = vc
                else:
                    f1 = b * pow(va, b - 1)
                VB[a, k] += VB[i, k] * f1


cdef void _rev1(const int[::1] op, const int[::1] ia, const int[::1] ib,
                const int[::1] ic, const double[::1] theta,
                const double[:, ::1] V,
                const double[:, ::1] D1, double[:, ::1] VB,
                double[:, ::1] D1B, double[:, ::1] PG,
                Py_ssize_t npts) noexcept:
    cdef Py_ssize_t m = op.shape[0]
    cdef Py_ssize_t i, k, j2
    cdef int o, a, b, c
    cdef double va, vc, vb_c, d1b_c, r, rbar, f1, f2, d1a, d1b_, d1c, w
    for i in range(m - 1, -1, -1):
        o = op[i]
        if o <= PARAM:
            continue
        a = ia[i]
        b = ib[i]
        if o == ADD:
            for k in range(npts):
                VB[a, k] += VB[i, k]
                VB[b, k] += VB[i, k]
                D1B[a, k] += D1B[i, k]
                D1B[b, k] += D1B[i, k]
        elif o == SUB:
            for k in range(npts):
                VB[a, k] += VB[i, k]
                VB[b, k] -= VB[i, k]
                D1B[a, k] += D1B[i, k]
                D1B[b, k] -= D1B[i, k]
        elif o == MUL:
            for k in range(npts):
                vb_c = VB[i, k]
                d1b_c = D1B[i, k]
                va = V[a, k]
                vc = V[b, k]
                VB[a, k] += vb_c * vc + d1b_c * D1[b, k]
                VB[b, k] += vb_c * va + d1b_c * D1[a, k]
                D1B[a, k] += d1b_c * vc
                D1B[b, k] += d1b_c * va
        elif o == FMAP:
            c = ic[i]
            w = theta[b]
            for k in range(npts):
                vb_c = VB[i, k]
                d1b_c = D1B[i, k]
                PG[b, k] += vb_c * V[c, k] + d1b_c * D1[c, k]
                VB[a, k] += vb_c
                D1B[a, k] += d1b_c
                VB[c, k] += vb_c * w
                D1B[c, k] += d1b_c * w
        elif o == DOT:
            c = ic[i]
            for j2 in range(c):
                w = theta[b + j2]
                for k in range(npts):
                    PG[b + j2, k] += (VB[i, k] * V[a + j2, k]
                                      + D1B[i, k] * D1[a + j2, k])
                    VB[a + j2, k] += VB[i, k] * w
                    D1B[a + j2, k] += D1B[i, k] * w
        elif o == FMA:
            c = ic[i]
            for k in range(npts):
                vb_c = VB[i, k]
                d1b_c = D1B[i, k]
                va = V[b, k]
                vc = V[c, k]
                VB[a, k] += vb_c
                D1B[a, k] += d1b_c
                VB[b, k] += vb_c * vc + d1b_c * D1[c, k]
                VB[c, k] += vb_c * va + d1b_c * D1[b, k]
                D1B[b, k] += d1b_c * vc
                D1B[c, k] += d1b_c * va
        elif o == DIV:
            for k in range(npts):
                r = 1.0 / V[b, k]
                vc = V[i, k]
                vb_c = VB[i, k]
                d1b_c = D1B[i, k]
                D1B[a, k] += d1b_c * r
                vb_c = vb_c + d1b_c * (-D1[b, k] * r)
                D1B[b, k] += d1b_c * (-vc * r)
                rbar = d1b_c * D1[i, k] * V[b, k]
                VB[a, k] += vb_c * r
                rbar += vb_c * vc * V[b, k]
                VB[b, k] += rbar * (-r * r)
        else:
            for k in range(npts):
                va = V[a, k]
                vc = V[i, k]
                if o == TANH:
                    f1 = 1.0 - vc * vc
                    f2 = -2.0 * vc * f1
                elif o == SIN:
                    f1 = cos(va)
                    f2 = -vc
                elif o == COS:
                    f1 = -sin(va)
                    f2 = -vc
                elif o == EXP:
                    f1 = vc
                    f2 = vc
                else:
                    f1 = b * pow(va, b - 1)
                    f2 = b * (b - 1) * pow(va, b - 2)
                d1b_c = D1B[i, k]
                d1a = D1[a, k]
                VB[a, k] += VB[i, k] * f1 + d1b_c * f2 * d1a
                D1B[a, k] += d1b_c * f1


cdef void _rev2(const int[::1] op, const int[::1] ia, const int[::1] ib,
                const int[::1] ic, const double[::1] theta,
                const double[:, ::1] V,
                const double[:, ::1] D1, const double[:, ::1] D2,
                double[:, ::1] VB, double[:, ::1] D1B,
                double[:, ::1] D2B, double[:, ::1] PG,
                Py_ssize_t npts) noexcept:
    cdef Py_ssize_t m = op.shape[0]
    cdef Py_ssize_t i, k, j2
    cdef int o, a, b, c
    cdef double va, vc, vb_c, d1b_c, d2b_c, r, rbar
    cdef double f1, f2, f3, d1a, d2a, d1b_, d1c, d2c, w
    for i in range(m - 1, -1, -1):
        o = op[i]
        if o <= PARAM:
            continue
        a = ia[i]
        b = ib[i]
        if o == ADD:
            for k in range(npts):
                VB[a, k] += VB[i, k]
                VB[b, k] += VB[i, k]
                D1B[a, k] += D1B[i, k]
                D1B[b, k] += D1B[i, k]
                D2B[a, k] += D2B[i, k]
                D2B[b, k] += D2B[i, k]
        elif o == SUB:
            for k in range(npts):
                VB[a, k] += VB[i, k]
                VB[b, k] -= VB[i, k]
                D1B[a, k] += D1B[i, k]
                D1B[b, k] -= D1B[i, k]
                D2B[a, k] += D2B[i, k]
                D2B[b, k] -= D2B[i, k]
        elif o == MUL:
            for k in range(npts):
                vb_c = VB[i, k]
                d1b_c = D1B[i, k]
                d2b_c = D2B[i, k]
                va = V[a, k]
                vc = V[b, k]
                d1a = D1[a, k]
                d1b_ = D1[b, k]
                VB[a, k] += vb_c * vc + d1b_c * d1b_ + d2b_c * D2[b, k]
                VB[b, k] += vb_c * va + d1b_c * d1a + d2b_c * D2[a, k]
                D1B[a, k] += d1b_c * vc + 2.0 * d2b_c * d1b_
                D1B[b, k] += d1b_c * va + 2.0 * d2b_c * d1a
                D2B[a, k] += d2b_c * vc
                D2B[b, k] += d2b_c * va
        elif o == FMAP:
            c = ic[i]
            w = theta[b]
            for k in range(npts):
                vb_c = VB[i, k]
                d1b_c = D1B[i, k]
                d2b_c = D2B[i, k]
                PG[b, k] += (vb_c * V[c, k] + d1b_c * D1[c, k]
                             + d2b_c * D2[c, k])
                VB[a, k] += vb_c
                D1B[a, k] += d1b_c
                D2B[a, k] += d2b_c
                VB[c, k] += vb_c * w
                D1B[c, k] += d1b_c * w
                D2B[c, k] += d2b_c * w
        elif o == DOT:
            c = ic[i]
            for j2 in range(c):
                w = theta[b + j2]
                for k in range(npts):
                    PG[b + j2, k] += (VB[i, k] * V[a + j2, k]
                                      + D1B[i, k] * D1[a + j2, k]
                                      + D2B[i, k] * D2[a + j2, k])
                    VB[a + j2, k] += VB[i, k] * w
                    D1B[a + j2, k] += D1B[i, k] * w
                    D2B[a + j2, k] += D2B[i, k] * w
        elif o == FMA:
            c = ic[i]
            for k in range(npts):
                vb_c = VB[i, k]
                d1b_c = D1B[i, k]
                d2b_c = D2B[i, k]
                va = V[b, k]
                vc = V[c, k]
                d1b_ = D1[b, k]
                d1c = D1[c, k]
                VB[a, k] += vb_c
                D1B[a, k] += d1b_c
                D2B[a, k] += d2b_c
                VB[b, k] += vb_c * vc + d1b_c * d1c + d2b_c * D2[c, k]
                VB[c, k] += vb_c * va + d1b_c * d1b_ + d2b_c * D2[b, k]
                D1B[b, k] += d1b_c * vc + 2.0 * d2b_c * d1c
                D1B[c, k] += d1b_c * va + 2.0 * d2b_c * d1b_
                D2B[b, k] += d2b_c * vc
                D2B[c, k] += d2b_c * va
        elif o == DIV:
            for k in range(npts):
                r = 1.0 / V[b, k]
                vc = V[i, k]
                vb_c = VB[i, k]
                d1b_c = D1B[i, k]
                d2b_c = D2B[i, k]
                d1b_ = D1[b, k]
                d1c = D1[i, k]
                d2c = D2[i, k]
                D2B[a, k] += d2b_c * r
                d1b_c = d1b_c + d2b_c * (-2.0 * d1b_ * r)
                vb_c = vb_c + d2b_c * (-D2[b, k] * r)
                D1B[b, k] += d2b_c * (-2.0 * d1c * r)
                D2B[b, k] += d2b_c * (-vc * r)
                rbar = d2b_c * d2c * V[b, k]
                D1B[a, k] += d1b_c * r
                vb_c = vb_c + d1b_c * (-d1b_ * r)
                D1B[b, k] += d1b_c * (-vc * r)
                rbar += d1b_c * d1c * V[b, k]
                VB[a, k] += vb_c * r
                rbar += vb_c * vc * V[b, k]
                VB[b, k] += rbar * (-r * r)
        else:
            for k in range(npts):
                va = V[a, k]
                vc = V[i, k]
                if o == TANH:
                    f1 = 1.0 - vc * vc
                    f2 = -2.0 * vc * f1
                    f3 = -2.0 * f1 * (f1 - 2.0 * vc * vc)
                elif o == SIN:
                    f1 = cos(va)
                    f2 = -vc
                    f3 = -f1
                elif o == COS:
                    f1 = -sin(va)
                    f2 = -vc
                    f3 = -f1
                elif o == EXP:
                    f1 = vc
                    f2 = vc
                    f3 = vc
                else:
                    f1 = b * pow(va, b - 1)
                    f2 = b * (b - 1) * pow(va, b - 2)
                    f3 = b * (b - 1) * (b - 2) * pow(va, b - 3)
                d1b_c = D1B[i, k]
                d2b_c = D2B[i, k]
                d1a = D1[a, k]
                d2a = D2[a, k]
                VB[a, k] += (VB[i, k] * f1 + d1b_c * f2 * d1a
                             + d2b_c * (f3 * d1a * d1a + f2 * d2a))
                D1B[a, k] += d1b_c * f1 + 2.0 * d2b_c * f2 * d1a
                D2B[a, k] += d2b_c * f1


def reverse(const int[::1] op, const int[::1] ia, const int[::1] ib,
            const int[::1] ic, const double[::1] cval,
            const double[::1] theta,
            const double[:, ::1] V, const double[:, ::1] D1,
            const double[:, ::1] D2, int order, const double[::1] seed_v,
            const double[::1] seed_d1, const double[::1] seed_d2,
            int out_node, const int[::1] param_nodes, double[:, ::1] PG):
    cdef Py_ssize_t m = op.shape[0]
    cdef Py_ssize_t npts = V.shape[1]
    cdef Py_ssize_t i, k, j
    cdef int node

    for i in range(PG.shape[0]):
        for k in range(npts):
            PG[i, k] = 0.0

    ws = _workspace(m, npts, order)
    cdef double[:, ::1] VB = ws[0]
    cdef double[:, ::1] D1B = VB
    cdef double[:, ::1] D2B = VB
    if order >= 1:
        D1B = ws[1]
    if order >= 2:
        D2B = ws[2]
    for i in range(m):
        for k in range(npts):
            VB[i, k] = 0.0
    if order >= 1:
        for i in range(m):
            for k in range(npts):
                D1B[i, k] = 0.0
    if order >= 2:
        for i in range(m):
            for k in range(npts):
                D2B[i, k] = 0.0

    for k in range(npts):
        VB[out_node, k] = seed_v[k]
    if order >= 1 and seed_d1.shape[0] > 0:
        for k in range(npts):
            D1B[out_node, k] = seed_d1[k]
    if order >= 2 and seed_d2.shape[0] > 0:
        for k in range(npts):
            D2B[out_node, k] = seed_d2[k]

    if order == 0:
        _rev0(op, ia, ib, ic, theta, V, VB, PG, npts)
    elif order == 1:
        _rev1(op, ia, ib, ic, theta, V, D1, VB, D1B, PG, npts)
    else:
        _rev2(op, ia, ib, ic, theta, V, D1, D2, VB, D1B, D2B, PG, npts)

    for j in range(param_nodes.shape[0]):
        node = param_nodes[j]
        if node >= 0:
            for k in range(npts):
                PG[j, k] += VB[node, k]
    return npts
