"""
Compiled closed-loop right-hand side and RK4 driver.

Mirrors ``ClosedLoop.rhs`` line for line on plain arrays so that long runs
cost microseconds per step; the numpy path stays the reference and the two
are cross-checked in the tests.  Between recording points the driver also
tracks full-resolution extrema of the state and of the monitor vector
(per-bus frequency, applied command, line flow) for the settling check.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# kinds
DROOP, UC, DUC, AGC = 0, 1, 2, 3
# offsets into the flat state; -1 when the block is absent
THETA, OMEGA, PM, V, LAM, PHI, RHO_P, RHO_M, PI, PM_HAT, V_HAT, S = range(12)
BLOCKS = ("theta", "omega", "pm", "v", "lam", "phi", "rho_plus", "rho_minus", "pi", "pm_hat", "v_hat", "s")


@njit(cache=True)
def _r_at(t, times, table):
    i = 0
    while i < len(times) and times[i] <= t:
        i += 1
    return table[i]


@njit(cache=True)
def _eval(x, r, off, kind, second, P, A, dx, mon):
    """Fill ``dx`` and the monitor vector ``[omega (n), p (n), flows (m)]``; returns max load residual."""
    (gen, load, src, dst, B, inj, D, invM, invTt, invTg, alpha, pmin, pmax, part,
     Pmin, Pmax, T, sched, Klam, Kphi, Krp, Krm, Kpi, invTt_hat, invTg_hat,
     share, route, bias_mean, K_agc) = P
    n = len(inj)
    m = len(src)
    g = len(gen)
    th = off[THETA]
    flows = np.empty(m)
    out = np.zeros(n)
    for e in range(m):
        f = B[e] * np.sin(x[th + src[e]] - x[th + dst[e]])
        flows[e] = f
        out[src[e]] += f
        out[dst[e]] -= f
    lam = np.zeros(n)
    if off[LAM] >= 0:
        for i in range(n):
            lam[i] = x[off[LAM] + i]
    omega = np.empty(n)
    p = np.zeros(n)
    for j in range(g):
        omega[gen[j]] = x[off[OMEGA] + j]
    # generator commands
    if kind == AGC:
        ns = len(bias_mean)
        for j in range(g):
            sec = 0.0
            for k in range(ns):
                sec += route[j, k] * x[off[S] + k]
            i = gen[j]
            p[i] = min(max(-alpha[i] * omega[i] + share[j] * sec, pmin[i]), pmax[i])
    else:
        for j in range(g):
            i = gen[j]
            p[i] = min(max(-alpha[i] * (omega[i] + lam[i]), pmin[i]), pmax[i])
    # load buses: algebraic balance
    res_max = 0.0
    for j in range(len(load)):
        i = load[j]
        c = inj[i] + r[i] - out[i]
        if part[i] and kind != AGC:
            w = (c - alpha[i] * lam[i]) / (D[i] + alpha[i])
            pl = -alpha[i] * (w + lam[i])
            if pl > pmax[i]:
                w = (c + pmax[i]) / D[i]
                pl = pmax[i]
            elif pl < pmin[i]:
                w = (c + pmin[i]) / D[i]
                pl = pmin[i]
        else:
            w = c / D[i]
            pl = 0.0
        omega[i] = w
        p[i] = pl
        res = abs(-D[i] * w + c + pl)
        if res > res_max:
            res_max = res
    for i in range(n):
        dx[th + i] = omega[i]
    mw = np.empty(g)
    for j in range(g):
        i = gen[j]
        pm = x[off[PM] + j]
        mw[j] = inj[i] + r[i] - D[i] * omega[i] - out[i] + pm
        dx[off[OMEGA] + j] = mw[j] * invM[j]
        if second:
            v = x[off[V] + j]
            dx[off[PM] + j] = (v - pm) * invTt[j]
            dx[off[V] + j] = (p[i] - v) * invTg[j]
        else:
            dx[off[PM] + j] = (p[i] - pm) * invTt[j]
    for i in range(n):
        mon[i] = omega[i]
        mon[n + i] = p[i]
    for e in range(m):
        mon[2 * n + e] = flows[e]
    if kind == AGC:
        ns = len(bias_mean)
        for k in range(ns):
            acc = 0.0
            for j in range(g):
                acc += route[j, k] * omega[gen[j]]
            ace = bias_mean[k] * acc
            if A:
                for e in range(m):
                    ace += T[k, e] * flows[e]
                ace -= sched[k]
            dx[off[S] + k] = -K_agc * ace
        return res_max
    if kind == DROOP:
        return res_max
    ph = off[PHI]
    P_hat = np.empty(m)
    out_hat = np.zeros(n)
    mult = np.empty(m)
    for e in range(m):
        f = B[e] * np.sin(x[ph + src[e]] - x[ph + dst[e]])
        P_hat[e] = f
        out_hat[src[e]] += f
        out_hat[dst[e]] -= f
        mult[e] = lam[src[e]] - lam[dst[e]]
    if off[RHO_P] >= 0:
        for e in range(m):
            rp = x[off[RHO_P] + e]
            rm = x[off[RHO_M] + e]
            mult[e] += rm - rp
            a = P_hat[e] - Pmax[e]
            dx[off[RHO_P] + e] = Krp[e] * a if (rp > 0 or a > 0) else 0.0
            b = Pmin[e] - P_hat[e]
            dx[off[RHO_M] + e] = Krm[e] * b if (rm > 0 or b > 0) else 0.0
    if off[PI] >= 0:
        na = T.shape[0]
        for k in range(na):
            acc = 0.0
            for e in range(m):
                acc += T[k, e] * P_hat[e]
                mult[e] -= T[k, e] * x[off[PI] + k]
            dx[off[PI] + k] = Kpi[k] * (acc - sched[k])
    dphi = np.zeros(n)
    for e in range(m):
        w = B[e] * mult[e]
        dphi[src[e]] += w
        dphi[dst[e]] -= w
    for i in range(n):
        dx[ph + i] = Kphi[i] * dphi[i]
    imb = np.empty(n)
    for i in range(n):
        imb[i] = D[i] * omega[i] + out[i] - out_hat[i]
    for j in range(g):
        imb[gen[j]] += mw[j]
    if kind == DUC:
        for i in range(n):
            if part[i]:
                imb[i] += min(max(-alpha[i] * lam[i], pmin[i]), pmax[i])
        for j in range(g):
            i = gen[j]
            pmh = x[off[PM_HAT] + j]
            vh = x[off[V_HAT] + j]
            imb[i] -= pmh
            dx[off[PM_HAT] + j] = (vh - pmh) * invTt_hat[j]
            dx[off[V_HAT] + j] = (p[i] - vh) * invTg_hat[j]
        for j in range(len(load)):
            imb[load[j]] -= p[load[j]]
    for i in range(n):
        dx[off[LAM] + i] = Klam[i] * imb[i]
    return res_max


@njit(cache=True)
def rhs(t, x, off, kind, second, P, A, times, table):
    dx = np.empty(len(x))
    mon = np.empty(2 * len(P[5]) + len(P[2]))
    _eval(x, _r_at(t, times, table), off, kind, second, P, A, dx, mon)
    return dx


@njit(cache=True)
def advance(x, t0, h, nsteps, off, kind, second, P, A, times, table, xmin, xmax, mmin, mmax):
    """``nsteps`` RK4 steps from ``t0``; updates the running extrema in place.

    Returns ``(x, steps_done, max_load_residual, min_multiplier)``; a
    non-finite state stops early with ``steps_done`` < ``nsteps``.
    """
    N = len(x)
    k1 = np.empty(N)
    k2 = np.empty(N)
    k3 = np.empty(N)
    k4 = np.empty(N)
    tmp = np.empty(N)
    mon = np.empty(len(mmin))
    res_max = 0.0
    mult_min = np.inf
    for k in range(nsteps):
        t = t0 + k * h
        _eval(x, _r_at(t, times, table), off, kind, second, P, A, k1, mon)
        for i in range(N):
            tmp[i] = x[i] + 0.5 * h * k1[i]
        _eval(tmp, _r_at(t + 0.5 * h, times, table), off, kind, second, P, A, k2, mon)
        for i in range(N):
            tmp[i] = x[i] + 0.5 * h * k2[i]
        _eval(tmp, _r_at(t + 0.5 * h, times, table), off, kind, second, P, A, k3, mon)
        for i in range(N):
            tmp[i] = x[i] + h * k3[i]
        _eval(tmp, _r_at(t + h, times, table), off, kind, second, P, A, k4, mon)
        ok = True
        for i in range(N):
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if not np.isfinite(x[i]):
                ok = False
        for blk in (RHO_P, RHO_M):
            if off[blk] >= 0:
                for e in range(len(P[2])):
                    if x[off[blk] + e] < 0.0:
                        x[off[blk] + e] = 0.0
                    if x[off[blk] + e] < mult_min:
                        mult_min = x[off[blk] + e]
        if not ok:
            return x, k, res_max, mult_min
        # monitor quantities at the accepted state
        res = _eval(x, _r_at(t + h, times, table), off, kind, second, P, A, tmp, mon)
        if res > res_max:
            res_max = res
        for i in range(N):
            if x[i] < xmin[i]:
                xmin[i] = x[i]
            if x[i] > xmax[i]:
                xmax[i] = x[i]
        for i in range(len(mon)):
            if mon[i] < mmin[i]:
                mmin[i] = mon[i]
            if mon[i] > mmax[i]:
                mmax[i] = mon[i]
    return x, nsteps, res_max, mult_min
