"""Compiled RK4 forward sweep and its exact discrete adjoint.

Plain loops over small dense arrays; numba removes the per-step interpreter
overhead, which dominates for the state sizes used here.
"""
import numpy as np
from numba import njit

BLOWUP = 1e6


@njit(cache=True)
def _rhs(A, N, B, y, u, out):
    n = y.shape[0]
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += A[i, j] * y[j]
        for j in range(n):
            yj = y[j]
            if yj != 0.0:
                s = 0.0
                for l in range(n):
                    s += N[i, j, l] * y[l]
                acc -= s * yj
        for p in range(B.shape[1]):
            acc += B[i, p] * u[p]
        out[i] = acc


@njit(cache=True)
def _rhs_adj(A, A0, y, v, out):
    # (A - DF(y))^T v, where DF(y) z = A0(y, z) and A0[i, j, l] multiplies y_j z_l
    n = y.shape[0]
    for l in range(n):
        acc = 0.0
        for i in range(n):
            acc += A[i, l] * v[i]
        for i in range(n):
            vi = v[i]
            if vi != 0.0:
                s = 0.0
                for j in range(n):
                    s += A0[i, j, l] * y[j]
                acc -= vi * s
        out[l] = acc


@njit(cache=True)
def _dot(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


@njit(cache=True)
def forward(A, N, B, Pi, y0, u, h, alpha, states, stages):
    """Fill states/stages; return (cost, index of blow-up step or -1)."""
    n = y0.shape[0]
    steps = u.shape[0] - 1
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    um = np.empty(u.shape[1])
    y = y0.copy()
    states[0] = y
    total = 0.0
    comp = 0.0
    for k in range(steps):
        for p in range(um.shape[0]):
            um[p] = 0.5 * (u[k, p] + u[k + 1, p])
        _rhs(A, N, B, y, u[k], k1)
        y2 = stages[k, 0]
        for i in range(n):
            y2[i] = y[i] + 0.5 * h * k1[i]
        _rhs(A, N, B, y2, um, k2)
        y3 = stages[k, 1]
        for i in range(n):
            y3[i] = y[i] + 0.5 * h * k2[i]
        _rhs(A, N, B, y3, um, k3)
        y4 = stages[k, 2]
        for i in range(n):
            y4[i] = y[i] + h * k3[i]
        _rhs(A, N, B, y4, u[k + 1], k4)
        inc = h / 6.0 * (
            0.5 * (_dot(y, y) + 2.0 * _dot(y2, y2) + 2.0 * _dot(y3, y3) + _dot(y4, y4))
            + 0.5 * alpha * (_dot(u[k], u[k]) + 4.0 * _dot(um, um) + _dot(u[k + 1], u[k + 1]))
        )
        # Kahan summation keeps the cost accurate to rounding of the increments
        t = inc - comp
        s = total + t
        comp = (s - total) - t
        total = s
        norm2 = 0.0
        for i in range(n):
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            norm2 += y[i] * y[i]
        if not np.isfinite(norm2) or norm2 > BLOWUP * BLOWUP:
            return np.inf, k + 1
        states[k + 1] = y
    py = Pi @ y
    return total + 0.5 * _dot(y, py), -1


@njit(cache=True)
def adjoint(A, A0, B, Pi, u, h, alpha, states, stages, grad, costates):
    """Reverse sweep of ``forward``; fills grad (w.r.t. nodal u) and costates."""
    n = states.shape[1]
    m = u.shape[1]
    steps = u.shape[0] - 1
    lam = Pi @ states[steps]
    costates[steps] = lam
    grad[:, :] = 0.0
    kb = np.empty(n)
    tmp = np.empty(n)
    yb = np.empty(n)
    um = np.empty(m)
    for k in range(steps - 1, -1, -1):
        y = states[k]
        y2 = stages[k, 0]
        y3 = stages[k, 1]
        y4 = stages[k, 2]
        for p in range(m):
            um[p] = 0.5 * (u[k, p] + u[k + 1, p])
        for i in range(n):
            yb[i] = lam[i]
        # stage 4
        for i in range(n):
            kb[i] = (h / 6.0) * lam[i]
        _rhs_adj(A, A0, y4, kb, tmp)
        for p in range(m):
            acc = (h / 6.0) * alpha * u[k + 1, p]
            for i in range(n):
                acc += B[i, p] * kb[i]
            grad[k + 1, p] += acc
        for i in range(n):
            tmp[i] += (h / 6.0) * y4[i]
            yb[i] += tmp[i]
            kb[i] = (h / 3.0) * lam[i] + h * tmp[i]
        # stage 3
        _rhs_adj(A, A0, y3, kb, tmp)
        for p in range(m):
            acc = (h / 3.0) * alpha * um[p]
            for i in range(n):
                acc += B[i, p] * kb[i]
            grad[k, p] += 0.5 * acc
            grad[k + 1, p] += 0.5 * acc
        for i in range(n):
            tmp[i] += (h / 3.0) * y3[i]
            yb[i] += tmp[i]
            kb[i] = (h / 3.0) * lam[i] + 0.5 * h * tmp[i]
        # stage 2
        _rhs_adj(A, A0, y2, kb, tmp)
        for p in range(m):
            acc = (h / 3.0) * alpha * um[p]
            for i in range(n):
                acc += B[i, p] * kb[i]
            grad[k, p] += 0.5 * acc
            grad[k + 1, p] += 0.5 * acc
        for i in range(n):
            tmp[i] += (h / 3.0) * y2[i]
            yb[i] += tmp[i]
            kb[i] = (h / 6.0) * lam[i] + 0.5 * h * tmp[i]
        # stage 1
        _rhs_adj(A, A0, y, kb, tmp)
        for p in range(m):
            acc = (h / 6.0) * alpha * u[k, p]
            for i in range(n):
                acc += B[i, p] * kb[i]
            grad[k, p] += acc
        for i in range(n):
            yb[i] += tmp[i] + (h / 6.0) * y[i]
        lam = yb.copy()
        costates[k] = lam
