"""Numba-compiled inner loops for the simplex-constrained quadratic solver.

The quadratic is written as f(w) = w'Aw - 2 b'w (constant term dropped) with
A positive semidefinite.  Kept free of package imports so the kernels cache
cleanly.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def project_simplex(v):
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sort-based)."""
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = 0.0
    theta = 0.0
    for i in range(n):
        css += u[i]
        t = (css - 1.0) / (i + 1.0)
        if u[i] - t > 0.0:
            theta = t
    out = np.empty(n)
    for i in range(n):
        d = v[i] - theta
        out[i] = d if d > 0.0 else 0.0
    return out


@njit(cache=True)
def active_set_simplex(A, b, w_init, max_pivots):
    """Primal active-set method for min w'Aw - 2b'w on the simplex.

    Step-length controlled (monotone objective, no cycling); face systems
    are solved with lstsq, which is exact here because the bordered KKT
    system of a least-squares objective is always consistent.  Returns
    (w, converged).
    """
    n = w_init.shape[0]
    w = np.empty(n)
    total = 0.0
    for j in range(n):
        w[j] = w_init[j] if w_init[j] > 0.0 else 0.0
        total += w[j]
    if total <= 0.0:
        for j in range(n):
            w[j] = 1.0 / n
    else:
        for j in range(n):
            w[j] /= total
    free = np.empty(n, dtype=np.bool_)
    any_free = False
    for j in range(n):
        free[j] = w[j] > 0.0
        any_free = any_free or free[j]
    if not any_free:
        free[int(np.argmax(w))] = True

    for _ in range(max_pivots):
        idx = np.nonzero(free)[0]
        m = idx.shape[0]
        bordered = np.zeros((m + 1, m + 1))
        rhs = np.empty(m + 1)
        for p in range(m):
            for q in range(m):
                bordered[p, q] = 2.0 * A[idx[p], idx[q]]
            bordered[p, m] = 1.0
            bordered[m, p] = 1.0
            rhs[p] = 2.0 * b[idx[p]]
        rhs[m] = 1.0
        sol, _, _, _ = np.linalg.lstsq(bordered, rhs)
        mu = sol[m]

        w_scale = 1.0
        move = 0.0
        for p in range(m):
            d = abs(sol[p] - w[idx[p]])
            if d > move:
                move = d
            if abs(w[idx[p]]) > w_scale:
                w_scale = abs(w[idx[p]])
        if move <= 1e-13 * w_scale:
            g = 2.0 * (A @ w - b)
            g_scale = 1.0
            for j in range(n):
                if abs(g[j]) > g_scale:
                    g_scale = abs(g[j])
            entering = -1
            g_best = np.inf
            for j in range(n):
                if not free[j] and g[j] < g_best:
                    g_best = g[j]
                    entering = j
            if entering >= 0 and g_best < -mu - 1e-11 * g_scale:
                free[entering] = True
                continue
            return w, True

        step = 1.0
        blocker = -1
        for p in range(m):
            d = sol[p] - w[idx[p]]
            if d < 0.0:
                limit = -w[idx[p]] / d
                if limit < step:
                    step = limit
                    blocker = idx[p]
        for p in range(m):
            updated = w[idx[p]] + step * (sol[p] - w[idx[p]])
            w[idx[p]] = updated if updated > 0.0 else 0.0
        if blocker >= 0 and step < 1.0:
            w[blocker] = 0.0
            free[blocker] = False
    return w, False


@njit(cache=True)
def weighted_gram(x0, x1, v):
    """A = x0' diag(v) x0 and b = x0' (v * x1) for the lower-level QP."""
    k, j = x0.shape
    A = np.zeros((j, j))
    b = np.zeros(j)
    for r in range(k):
        vr = v[r]
        if vr == 0.0:
            continue
        row = x0[r]
        for p in range(j):
            s = vr * row[p]
            b[p] += s * x1[r]
            for q in range(p, j):
                A[p, q] += s * row[q]
    for p in range(j):
        for q in range(p + 1, j):
            A[q, p] = A[p, q]
    return A, b


@njit(cache=True)
def kkt_residual(A, b, w):
    """max(simplex feasibility violation, complementarity gap w'g - min g)."""
    n = w.shape[0]
    g = 2.0 * (A @ w - b)
    total = 0.0
    w_min = np.inf
    wg = 0.0
    g_min = np.inf
    for j in range(n):
        total += w[j]
        if w[j] < w_min:
            w_min = w[j]
        wg += w[j] * g[j]
        if g[j] < g_min:
            g_min = g[j]
    feas = abs(total - 1.0)
    if -w_min > feas:
        feas = -w_min
    gap = wg - g_min
    return feas if feas > gap else gap


@njit(cache=True)
def pgd_simplex(A, b, w0, lip, tol, max_iter):
    """Projected gradient descent with Armijo backtracking on the simplex.

    Returns (w, iterations, converged).  Convergence is declared when the
    gradient-mapping norm at reference step 1/lip falls below tol.
    """
    n = w0.shape[0]
    w = project_simplex(w0)
    Aw = A @ w
    f = w @ Aw - 2.0 * (b @ w)
    t_ref = 1.0 / lip if lip > 0.0 else 1.0
    t = t_ref
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        g = 2.0 * (Aw - b)
        w_ref = project_simplex(w - t_ref * g)
        pg = 0.0
        for j in range(n):
            d = abs(w[j] - w_ref[j])
            if d > pg:
                pg = d
        if pg / t_ref <= tol:
            converged = True
            break

        grow = t * 1.3
        cap = 100.0 * t_ref
        t = grow if grow < cap else cap
        accepted = False
        w_new = w_ref
        Aw_new = Aw
        f_new = f
        for _ in range(80):
            w_new = project_simplex(w - t * g)
            Aw_new = A @ w_new
            f_new = w_new @ Aw_new - 2.0 * (b @ w_new)
            dgd = 0.0
            dd = 0.0
            for j in range(n):
                d = w_new[j] - w[j]
                dgd += g[j] * d
                dd += d * d
            if f_new <= f + dgd + dd / (2.0 * t) + 1e-15 * (1.0 + abs(f)):
                accepted = True
                break
            t *= 0.5
            if t < 1e-18:
                break
        if not accepted:
            break
        w = w_new
        Aw = Aw_new
        f = f_new
    return w, iterations, converged
