"""Compiled per-pair entropic OT solver used by :mod:`epimvs.ot`.

Annealed log-domain Sinkhorn sweeps bring the potentials close; the
remaining marginal error is removed with damped Newton steps on the
semi-dual in ``g`` (the c-transform keeps row marginals exact, so only the
column residual has to be driven below ``tol``).
"""

import numba
import numpy as np


@numba.njit(cache=True)
def _c_transform(g, C, lq, eps, f, cond):
    """``f_i = -eps log sum_j q_j exp((g_j - C_ij)/eps)``; ``cond`` gets row-conditional plans."""
    D = g.shape[0]
    for i in range(D):
        m = -np.inf
        for j in range(D):
            cond[i, j] = (g[j] - C[i, j]) / eps + lq[j]
            if cond[i, j] > m:
                m = cond[i, j]
        s = 0.0
        for j in range(D):
            cond[i, j] = np.exp(cond[i, j] - m)
            s += cond[i, j]
        for j in range(D):
            cond[i, j] /= s
        f[i] = -eps * (np.log(s) + m)


@numba.njit(cache=True)
def _g_update(f, C, lp, eps, g):
    D = f.shape[0]
    for j in range(D):
        m = -np.inf
        for i in range(D):
            v = (f[i] - C[i, j]) / eps + lp[i]
            if v > m:
                m = v
        s = 0.0
        for i in range(D):
            s += np.exp((f[i] - C[i, j]) / eps + lp[i] - m)
        g[j] = -eps * (np.log(s) + m)


@numba.njit(cache=True)
def _semi_dual(g, C, lp, lq, p, q, eps, f, cond):
    _c_transform(g, C, lq, eps, f, cond)
    val = 0.0
    D = g.shape[0]
    for i in range(D):
        if p[i] > 0:
            val += p[i] * f[i]
    for j in range(D):
        if q[j] > 0:
            val += q[j] * g[j]
    return val


@numba.njit(cache=True)
def solve_pair(p, q, x, eps_target, tol, sinkhorn_iters, max_iters, anneal, f, g, cond):
    """Solve one pair in place; returns ``(iterations, column violation, final eps)``."""
    D = p.shape[0]
    C = np.empty((D, D))
    for i in range(D):
        for j in range(D):
            C[i, j] = abs(x[i] - x[j])
    lp = np.log(p)
    lq = np.log(q)
    for j in range(D):
        g[j] = 0.0
    eps = eps_target
    if anneal:
        eps = max(C.max(), eps_target)
    it = 0
    while True:
        final = eps <= eps_target
        n = sinkhorn_iters if final else 10
        for _ in range(n):
            _c_transform(g, C, lq, eps, f, cond)
            _g_update(f, C, lp, eps, g)
            it += 1
        if final:
            break
        eps = max(eps * 0.5, eps_target)

    grad = np.empty(D)
    H = np.empty((D, D))
    f_new = np.empty(D)
    g_new = np.empty(D)
    cond_new = np.empty((D, D))
    val = _semi_dual(g, C, lp, lq, p, q, eps, f, cond)
    viol = np.inf
    while True:
        viol = 0.0
        for j in range(D):
            col = 0.0
            for i in range(D):
                col += p[i] * cond[i, j]
            grad[j] = q[j] - col
            viol += abs(grad[j])
        if viol <= tol or it >= max_iters:
            break
        for j in range(D):
            col = 0.0
            for i in range(D):
                col += p[i] * cond[i, j]
            for k in range(D):
                h = 0.0
                for i in range(D):
                    h += p[i] * cond[i, j] * cond[i, k]
                H[j, k] = -h / eps
            # small ridge: constants and zero-mass columns are null directions
            H[j, j] += (col + 1e-12) / eps
        step = np.linalg.solve(H, grad)
        t = 1.0
        accepted = False
        while t > 1e-12:
            for j in range(D):
                g_new[j] = g[j] + t * step[j]
            v_new = _semi_dual(g_new, C, lp, lq, p, q, eps, f_new, cond_new)
            if v_new >= val - 1e-14 * abs(val):
                accepted = True
                break
            t *= 0.5
        it += 1
        if not accepted:
            break
        g[:] = g_new
        f[:] = f_new
        cond[:, :] = cond_new
        val = v_new
    return it, viol, eps


@numba.njit(cache=True)
def solve_batch(P, Q, X, eps, tol, sinkhorn_iters, max_iters, anneal):
    n, D = P.shape
    F = np.empty((n, D))
    G = np.empty((n, D))
    COND = np.empty((n, D, D))
    iters = np.empty(n, dtype=np.int64)
    viol = np.empty(n)
    for k in range(n):
        it, v, _ = solve_pair(P[k], Q[k], X[k], eps[k], tol, sinkhorn_iters, max_iters, anneal, F[k], G[k], COND[k])
        iters[k] = it
        viol[k] = v
    return F, G, COND, iters, viol
