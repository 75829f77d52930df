"""Compiled inner loops of the block coordinate descent."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def soft_threshold(a, lam):
    if a > lam:
        return a - lam
    if a < -lam:
        return a + lam
    return 0.0


@njit(cache=True)
def group_is_null(a, c, lam1, lam2):
    """a^2 + S_lam1(c)^2 <= lam2^2 with lam1 = rho*lam*s, lam2 = (1-rho)*lam*s."""
    sc = soft_threshold(c, lam1)
    return a * a + sc * sc <= lam2 * lam2


@njit(cache=True)
def solve_group(a, c, gg, hh, gh, lam1, lam2, beta, gamma, tol, max_inner):
    """Exact minimizer of the two-coefficient group subproblem.

    Minimizes 0.5 x'Ax - (a, c)'x + lam2 ||x||_2 + lam1 |x_2| over
    x = (beta, gamma), A = [[gg, gh], [gh, hh]], where (a, c) are the
    weighted inner products of G_j and D*G_j with the partial residual.

    Off the null and gamma = 0 cases the solution satisfies the fixed
    point of the majorization step, x = (A + (lam2 / ||x||) I)^-1 v with
    v = (a, c - lam1 sign(gamma)). Writing t = lam2 / ||x|| turns this
    into the monotone scalar equation t ||(A + tI)^-1 v|| = lam2, solved
    per sign of gamma by safeguarded Newton. ``beta`` and ``gamma`` (the
    current values) are only used to order the two sign candidates.
    Returns (beta, gamma, iterations, status); status 0 ok, 2 no
    consistent root found (the best candidate is returned).
    """
    if group_is_null(a, c, lam1, lam2):
        return 0.0, 0.0, 0, 0
    # gamma = 0 case
    b0 = soft_threshold(a, lam2) / gg if gg > 0.0 else 0.0
    if abs(c - gh * b0) <= lam1 and b0 != 0.0:
        return b0, 0.0, 0, 0
    if gg <= 0.0 and hh <= 0.0:
        return 0.0, 0.0, 0, 2
    first = 1.0
    if gamma < 0.0 or (gamma == 0.0 and c < 0.0):
        first = -1.0
    best_b = 0.0
    best_g = 0.0
    best_f = 0.0
    if b0 != 0.0:
        best_b = b0
        best_f = group_objective(a, c, gg, hh, gh, lam1, lam2, b0, 0.0)
    its = 0
    for k in range(2):
        s = first if k == 0 else -first
        v1 = a
        v2 = c - lam1 * s
        b, g, it, ok = _secular(v1, v2, gg, hh, gh, lam2, tol, max_inner)
        its += it
        if not ok:
            continue
        if g * s > 0.0:
            return b, g, its, 0
        f = group_objective(a, c, gg, hh, gh, lam1, lam2, b, g)
        if f < best_f:
            best_b = b
            best_g = g
            best_f = f
    return best_b, best_g, its, 2


@njit(cache=True)
def _secular(v1, v2, gg, hh, gh, lam2, tol, max_inner):
    """Root of t ||(A + tI)^-1 v|| = lam2 and the matching x = (A + tI)^-1 v."""
    vn = math.sqrt(v1 * v1 + v2 * v2)
    if vn <= lam2:
        return 0.0, 0.0, 0, False
    tr = gg + hh
    dt = math.sqrt(max((gg - hh) * (gg - hh) + 4.0 * gh * gh, 0.0))
    lmax = 0.5 * (tr + dt)
    lo = 0.0
    # t ||(A+tI)^-1 v|| >= t ||v|| / (lmax + t) gives an upper bracket
    hi = lam2 * lmax / (vn - lam2) * (1.0 + 1e-12) + 1e-300
    t = hi
    b = 0.0
    g = 0.0
    it = 0
    for it in range(1, max_inner + 1):
        m11 = gg + t
        m22 = hh + t
        det = m11 * m22 - gh * gh
        if det <= 0.0:
            lo = t
            t = 0.5 * (lo + hi)
            continue
        b = (m22 * v1 - gh * v2) / det
        g = (m11 * v2 - gh * v1) / det
        yn = math.sqrt(b * b + g * g)
        h = t * yn - lam2
        if h > 0.0:
            hi = t
        else:
            lo = t
        if abs(h) <= 1e-15 * lam2 or (hi - lo) <= 1e-15 * hi:
            break
        # d/dt (t ||y||) with dy/dt = -(A + tI)^-1 y
        z1 = (m22 * b - gh * g) / det
        z2 = (m11 * g - gh * b) / det
        dphi = yn - t * (b * z1 + g * z2) / yn
        t_new = t - h / dphi if dphi > 0.0 else -1.0
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        t = t_new
    m11 = gg + t
    m22 = hh + t
    det = m11 * m22 - gh * gh
    if det <= 0.0:
        return 0.0, 0.0, it, False
    b = (m22 * v1 - gh * v2) / det
    g = (m11 * v2 - gh * v1) / det
    return b, g, it, True


@njit(cache=True)
def group_objective(a, c, gg, hh, gh, lam1, lam2, b, g):
    return (0.5 * (gg * b * b + 2.0 * gh * b * g + hh * g * g) - a * b - c * g
            + lam2 * math.sqrt(b * b + g * g) + lam1 * abs(g))


@njit(cache=True)
def delta_cd(U, w, e, delta, ridge, tol, max_sweeps):
    """Cyclic coordinate descent for the rotated random effects.

    Minimizes sum_i w_i (e_i - U_i (d - delta))^2 + sum_j ridge_j d_j^2 where
    ``e`` is the current residual (working response minus fixed part minus
    U delta) and ridge_j = phi / Lambda_j. Updates ``delta`` and ``e`` in
    place and returns the number of sweeps.
    """
    n, k = U.shape
    uw2 = np.empty(k)
    for j in range(k):
        s = 0.0
        for i in range(n):
            s += w[i] * U[i, j] * U[i, j]
        uw2[j] = s
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        max_change = 0.0
        for j in range(k):
            num = 0.0
            for i in range(n):
                num += w[i] * U[i, j] * e[i]
            num += uw2[j] * delta[j]
            new = num / (uw2[j] + ridge[j])
            diff = new - delta[j]
            if diff != 0.0:
                for i in range(n):
                    e[i] -= U[i, j] * diff
                delta[j] = new
                ad = abs(diff)
                if ad > max_change:
                    max_change = ad
        if max_change < tol:
            break
    return sweeps


@njit(cache=True)
def _group_pass(G, DG, w, e, beta, gamma, groups, sel, gg, hh, gh, pen, lam, rho, s_t,
                tol_inner, max_inner, status_box):
    n = G.shape[0]
    max_change = 0.0
    for t in sel:
        j = groups[t]
        b_old = beta[j]
        g_old = gamma[j]
        a = gg[t] * b_old + gh[t] * g_old
        c = gh[t] * b_old + hh[t] * g_old
        for i in range(n):
            a += w[i] * G[i, j] * e[i]
            c += w[i] * DG[i, j] * e[i]
        lam1 = rho * lam * s_t * pen[j]
        lam2 = (1.0 - rho) * lam * s_t * pen[j]
        b_new, g_new, _, status = solve_group(a, c, gg[t], hh[t], gh[t], lam1, lam2,
                                              b_old, g_old, tol_inner, max_inner)
        if status > status_box[0]:
            status_box[0] = status
        db = b_new - b_old
        dg = g_new - g_old
        if db != 0.0 or dg != 0.0:
            for i in range(n):
                e[i] -= G[i, j] * db + DG[i, j] * dg
            beta[j] = b_new
            gamma[j] = g_new
            ch = max(abs(db), abs(dg))
            if ch > max_change:
                max_change = ch
    return max_change


@njit(cache=True)
def _unpenalized_pass(Z, D, w, e, theta, alpha, zz, dd, skip_alpha):
    n, m = Z.shape
    max_change = 0.0
    for k in range(m):
        if zz[k] <= 0.0:
            continue
        num = 0.0
        for i in range(n):
            num += w[i] * Z[i, k] * e[i]
        diff = num / zz[k]
        if diff != 0.0:
            for i in range(n):
                e[i] -= Z[i, k] * diff
            theta[k] += diff
            if abs(diff) > max_change:
                max_change = abs(diff)
    if dd > 0.0 and not skip_alpha:
        num = 0.0
        for i in range(n):
            num += w[i] * D[i] * e[i]
        diff = num / dd
        if diff != 0.0:
            for i in range(n):
                e[i] -= D[i] * diff
            alpha += diff
            if abs(diff) > max_change:
                max_change = abs(diff)
    return alpha, max_change


@njit(cache=True)
def bcd_sweeps(Z, D, G, DG, w, e, theta, alpha, beta, gamma, groups, pen, lam, rho,
               s_t, tol, max_sweeps, tol_inner, max_inner, skip_alpha):
    """Cyclic block coordinate descent over theta, alpha and the listed groups.

    ``e`` is the full weighted-least-squares residual and is kept in sync.
    A full pass over all listed groups alternates with passes restricted to
    the currently nonzero groups; the loop ends when a full pass moves no
    coefficient by more than ``tol``. Returns (alpha, sweeps, worst group
    status, max last change).
    """
    n, m = Z.shape
    zz = np.empty(m)
    for k in range(m):
        s = 0.0
        for i in range(n):
            s += w[i] * Z[i, k] * Z[i, k]
        zz[k] = s
    dd = 0.0
    for i in range(n):
        dd += w[i] * D[i] * D[i]
    ng = groups.shape[0]
    gg = np.empty(ng)
    hh = np.empty(ng)
    gh = np.empty(ng)
    for t in range(ng):
        j = groups[t]
        s1 = 0.0
        s2 = 0.0
        s3 = 0.0
        for i in range(n):
            x = G[i, j]
            xd = DG[i, j]
            s1 += w[i] * x * x
            s2 += w[i] * xd * xd
            s3 += w[i] * x * xd
        gg[t] = s1
        hh[t] = s2
        gh[t] = s3
    status_box = np.zeros(1, dtype=np.int64)
    every = np.arange(ng)
    sweeps = 0
    max_change = 0.0
    while sweeps < max_sweeps:
        sweeps += 1
        alpha, ch_u = _unpenalized_pass(Z, D, w, e, theta, alpha, zz, dd, skip_alpha)
        ch_g = _group_pass(G, DG, w, e, beta, gamma, groups, every, gg, hh, gh, pen, lam, rho,
                           s_t, tol_inner, max_inner, status_box)
        max_change = max(ch_u, ch_g)
        if max_change < tol:
            break
        nnz = 0
        for t in range(ng):
            if beta[groups[t]] != 0.0 or gamma[groups[t]] != 0.0:
                nnz += 1
        act = np.empty(nnz, dtype=np.int64)
        nnz = 0
        for t in range(ng):
            if beta[groups[t]] != 0.0 or gamma[groups[t]] != 0.0:
                act[nnz] = t
                nnz += 1
        while sweeps < max_sweeps:
            sweeps += 1
            alpha, ch_u = _unpenalized_pass(Z, D, w, e, theta, alpha, zz, dd, skip_alpha)
            ch_g = _group_pass(G, DG, w, e, beta, gamma, groups, act, gg, hh, gh, pen, lam, rho,
                               s_t, tol_inner, max_inner, status_box)
            if max(ch_u, ch_g) < tol:
                break
    return alpha, sweeps, status_box[0], max_change
