"""Compiled inner loops for the extended Bellman update.

Conventions shared by every kernel:

* ``W[j, k]`` is the next-stage value along atom j at z-grid index k.
* ``voff[q]`` is the z-index offset of v-grid point q; ``vval[q]`` its value.
  A v choice is admissible at z-index ``zi`` iff ``0 <= zi + voff[q] < nz``.
* Ties go to the zero profile (``v = 0`` on every atom) when it is optimal,
  else to the lexicographically smallest optimal index profile.
* ``inc[j, q]`` is ``probs[j] * vval[q]`` on the integer sum lattice, and a
  profile is martingale-feasible iff ``|sum_j inc[j, q_j]| <= tol_units``.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

INF = np.inf
BAND = 1e-12

SUMDP = 0
MUSCAN = 1


@njit(cache=True)
def _band(x):
    if x == INF:
        return 0.0
    return BAND * (1.0 + abs(x))


@njit(cache=True)
def sumdp_cell(W, zi, probs, voff, inc, tol_units, prof):
    """Exact minimum over martingale-feasible profiles by a DP on partial sums.

    Writes the lexicographically smallest optimal profile into ``prof``
    (``-1`` everywhere when infeasible) and returns the weighted value.
    """
    na, nz = W.shape
    nv = voff.shape[0]
    amin = np.zeros(na, np.int64)
    amax = np.zeros(na, np.int64)
    for j in range(na):
        found = False
        for q in range(nv):
            zz = zi + voff[q]
            if zz < 0 or zz >= nz or W[j, zz] == INF:
                continue
            if not found:
                amin[j] = inc[j, q]
                amax[j] = inc[j, q]
                found = True
            else:
                amin[j] = min(amin[j], inc[j, q])
                amax[j] = max(amax[j], inc[j, q])
        if not found:
            prof[:] = -1
            return INF
    # admissible partial sums after k atoms: forward reach intersected with
    # the window from which the band [-tol, tol] is still reachable
    lo = np.zeros(na + 1, np.int64)
    hi = np.zeros(na + 1, np.int64)
    f_lo = 0
    f_hi = 0
    r_lo = np.zeros(na + 1, np.int64)
    r_hi = np.zeros(na + 1, np.int64)
    for j in range(na - 1, -1, -1):
        r_lo[j] = r_lo[j + 1] + amin[j]
        r_hi[j] = r_hi[j + 1] + amax[j]
    for k in range(na + 1):
        lo[k] = max(f_lo, -tol_units - r_hi[k])
        hi[k] = min(f_hi, tol_units - r_lo[k])
        if k < na:
            f_lo += amin[k]
            f_hi += amax[k]
    width = 1
    for k in range(na + 1):
        if hi[k] < lo[k]:
            prof[:] = -1
            return INF
        width = max(width, hi[k] - lo[k] + 1)
    B = np.full((na + 1, width), INF)
    for s in range(lo[na], hi[na] + 1):
        B[na, s - lo[na]] = 0.0
    for k in range(na - 1, -1, -1):
        pk = probs[k]
        for s in range(lo[k], hi[k] + 1):
            best = INF
            for q in range(nv):
                zz = zi + voff[q]
                if zz < 0 or zz >= nz:
                    continue
                c = W[k, zz]
                if c == INF:
                    continue
                s2 = s + inc[k, q]
                if s2 < lo[k + 1] or s2 > hi[k + 1]:
                    continue
                b = B[k + 1, s2 - lo[k + 1]]
                if b == INF:
                    continue
                val = pk * c + b
                if val < best:
                    best = val
            B[k, s - lo[k]] = best
    if lo[0] > 0 or hi[0] < 0:
        prof[:] = -1
        return INF
    opt = B[0, -lo[0]]
    if opt == INF:
        prof[:] = -1
        return INF
    band = _band(opt)
    s = 0
    acc = 0.0
    for k in range(na):
        chosen = -1
        for q in range(nv):
            zz = zi + voff[q]
            if zz < 0 or zz >= nz:
                continue
            c = W[k, zz]
            if c == INF:
                continue
            s2 = s + inc[k, q]
            if s2 < lo[k + 1] or s2 > hi[k + 1]:
                continue
            b = B[k + 1, s2 - lo[k + 1]]
            if b == INF:
                continue
            if acc + probs[k] * c + b <= opt + band:
                chosen = q
                acc += probs[k] * c
                s = s2
                break
        prof[k] = chosen
    return opt


@njit(cache=True)
def prefer_zero(W, zi, probs, qzero, val, prof):
    """Switch ``prof`` to the zero profile if it is optimal; returns the value."""
    if qzero < 0:
        return val
    na = W.shape[0]
    z = 0.0
    for j in range(na):
        c = W[j, zi]
        if c == INF:
            return val
        z += probs[j] * c
    if z <= val + _band(val):
        prof[:] = qzero
        return z
    return val


@njit(cache=True)
def mu_rows(W, zi, voff, vval, mus, out):
    """``out[j, k] = min_q W[j, zi + voff[q]] + mus[k] * vval[q]``."""
    na, nz = W.shape
    nv = voff.shape[0]
    nm = mus.shape[0]
    for j in range(na):
        for k in range(nm):
            best = INF
            for q in range(nv):
                zz = zi + voff[q]
                if zz < 0 or zz >= nz:
                    continue
                c = W[j, zz]
                if c == INF:
                    continue
                c = c + mus[k] * vval[q]
                if c < best:
                    best = c
            out[j, k] = best


@njit(cache=True)
def lagrangian_profiles(Vn, voff, vval, mus):
    """Per next state and z-index: ``min_v V(x', z + v) + mu * v`` for each mu."""
    nx, nz = Vn.shape
    nm = mus.shape[0]
    out = np.empty((nx, nz, nm))
    for x in range(nx):
        for zi in range(nz):
            mu_rows(Vn[x:x + 1], zi, voff, vval, mus, out[x, zi:zi + 1])
    return out


@njit(cache=True)
def muscan_cell(W, mrows, zi, probs, voff, vval, mus, eps, prof, inc, tol_units, refine, scratch):
    """Lagrangian scan over ``mus`` then greedy single-atom repair.

    Returns ``(value, bound)``; ``bound`` is the best dual value found, a
    valid lower bound on the exact inner minimum. With ``refine`` the
    repaired value serves as an upper bound for reduced-cost fixing: every
    choice whose weighted reduced cost exceeds the bound gap is masked and
    the lattice DP runs on the survivors, which makes the result exact. A
    stalled repair leaves the gap infinite, so nothing is masked.
    """
    na, nz = W.shape
    nv = voff.shape[0]
    nm = mus.shape[0]
    best_b = -INF
    kb = -1
    for k in range(nm):
        s = 0.0
        for j in range(na):
            s += probs[j] * mrows[j, k]
        if s == INF:
            continue
        s -= abs(mus[k]) * eps
        if s > best_b:
            best_b = s
            kb = k
    if kb < 0:
        prof[:] = -1
        return INF, INF
    mu = mus[kb]
    r = 0.0
    for j in range(na):
        bq = -1
        best = INF
        for q in range(nv):
            zz = zi + voff[q]
            if zz < 0 or zz >= nz:
                continue
            c = W[j, zz]
            if c == INF:
                continue
            c = c + mu * vval[q]
            if c < best:
                best = c
                bq = q
        prof[j] = bq
        r += probs[j] * vval[bq]
    rtol = eps + 1e-12
    while abs(r) > rtol:
        bratio = INF
        bj = -1
        bq = -1
        br = r
        for j in range(na):
            cur = W[j, zi + voff[prof[j]]]
            v0 = vval[prof[j]]
            for q in range(nv):
                zz = zi + voff[q]
                if zz < 0 or zz >= nz:
                    continue
                c = W[j, zz]
                if c == INF:
                    continue
                r2 = r + probs[j] * (vval[q] - v0)
                gain = abs(r) - abs(r2)
                if gain <= 1e-15:
                    continue
                ratio = probs[j] * (c - cur) / gain
                if ratio < bratio:
                    bratio = ratio
                    bj = j
                    bq = q
                    br = r2
        if bj < 0:
            break
        prof[bj] = bq
        r = br
    if abs(r) > rtol:
        ub = INF
    else:
        ub = 0.0
        for j in range(na):
            ub += probs[j] * W[j, zi + voff[prof[j]]]
    if not refine:
        if ub == INF:
            prof[:] = -1
        return ub, best_b
    gap = ub - best_b
    if gap <= _band(ub):
        return ub, best_b
    scratch[:, :] = INF
    for j in range(na):
        for q in range(nv):
            zz = zi + voff[q]
            if zz < 0 or zz >= nz:
                continue
            c = W[j, zz]
            if c == INF:
                continue
            if probs[j] * (c + mu * vval[q] - mrows[j, kb]) <= gap + _band(gap) + _band(c):
                scratch[j, zz] = c
    val = sumdp_cell(scratch, zi, probs, voff, inc, tol_units, prof)
    return val, best_b


@njit(cache=True, parallel=True)
def extended_stage(Vn, nxt, Lbar, probs, voff, vval, inc, tol_units, mus, eps, method, mprof, refine, qzero):
    """Full stage sweep over (x, z) cells and the u-grid.

    Returns ``(V, u_index, v_index, bound)``; ``bound`` is only meaningful
    for the scan method (NaN otherwise).
    """
    nx, nu, na = nxt.shape
    nz = Vn.shape[1]
    nm = mus.shape[0]
    V = np.full((nx, nz), INF)
    U = np.zeros((nx, nz), np.int64)
    VP = np.full((nx, nz, na), -1, np.int64)
    LB = np.full((nx, nz), INF)
    for x in prange(nx):
        W = np.empty((na, nz))
        prof = np.empty(na, np.int64)
        mrows = np.empty((na, nm))
        scratch = np.empty((na, nz))
        for u in range(nu):
            for j in range(na):
                W[j, :] = Vn[nxt[x, u, j], :]
            for zi in range(nz):
                lb = np.nan
                if method == SUMDP:
                    val = sumdp_cell(W, zi, probs, voff, inc, tol_units, prof)
                else:
                    for j in range(na):
                        mrows[j, :] = mprof[nxt[x, u, j], zi, :]
                    val, lb = muscan_cell(W, mrows, zi, probs, voff, vval, mus, eps, prof,
                                          inc, tol_units, refine, scratch)
                val = prefer_zero(W, zi, probs, qzero, val, prof)
                tot = INF if val == INF else Lbar[x, u] + val
                if tot < V[x, zi] - _band(V[x, zi]):
                    V[x, zi] = tot
                    U[x, zi] = u
                    VP[x, zi, :] = prof
                if method == MUSCAN and lb != INF:
                    t = Lbar[x, u] + lb
                    if t < LB[x, zi]:
                        LB[x, zi] = t
    if method == SUMDP:
        LB[:, :] = np.nan
    return V, U, VP, LB
