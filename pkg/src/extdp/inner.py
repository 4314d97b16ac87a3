"""The inner minimization over zero-mean v profiles.

For one (x, z, u) cell with next states ``x'_j`` the problem is::

    min  sum_j p_j W_j(z + v_j)    over v_j in the v-grid, z + v_j on the z-grid,
    s.t. |sum_j p_j v_j| <= eps

Three methods: ``exhaustive`` (enumeration, test scale), ``sumdp`` (exact DP
over the accumulated weighted sum) and ``muscan`` (decoupled Lagrangian over a
mu-grid with a greedy feasibility repair).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from extdp import _kernels as K
from extdp.core import PLUS_INF, BudgetExceeded, ConfigInvalid, ScalarGrid, make_uniform_grid

METHODS = ("exhaustive", "sumdp", "muscan")
EXHAUSTIVE_BUDGET = 10**7
LATTICE_SPAN_LIMIT = 5 * 10**6


@dataclass(frozen=True)
class InnerSolveConfig:
    """Numerical scheme for the inner v-minimization.

    ``sum_step`` and ``eps_mart`` default (``None``) to values derived from
    the atom probabilities, see :func:`default_sum_step` and
    :func:`default_eps_mart`.
    """

    v_grid: ScalarGrid
    method: str = "muscan"
    sum_step: float | None = None
    eps_mart: float | None = None
    mu_grid: ScalarGrid = field(default_factory=lambda: make_uniform_grid(0.0, 200.0, 1.0))
    refine: bool = True
    audit_fraction: float = 0.0
    audit_seed: int = 0

    def __post_init__(self):
        problems = []
        if self.method not in METHODS:
            problems.append(f"unknown inner method {self.method!r}")
        if self.eps_mart is not None and self.eps_mart < 0:
            problems.append("eps_mart must be >= 0")
        if self.sum_step is not None and not self.sum_step > 0:
            problems.append("sum_step must be > 0")
        if not 0.0 <= self.audit_fraction <= 1.0:
            problems.append("audit_fraction must lie in [0, 1]")
        if problems:
            raise ConfigInvalid(problems)

    def eps_for(self, probs) -> float:
        return default_eps_mart(self.v_grid, probs) if self.eps_mart is None else float(self.eps_mart)


class InnerResult(NamedTuple):
    value: float
    profile: tuple[int, ...]
    residual: float


def default_eps_mart(v_grid: ScalarGrid, probs) -> float:
    """Half the smallest nonzero weighted increment, ``dv * min p / 2``."""
    return v_grid.step * float(np.min(probs)) / 2.0


def _common_denominator(probs, max_den: int = 10**4) -> int | None:
    den = 1
    for p in probs:
        f = Fraction(float(p)).limit_denominator(max_den)
        if abs(float(f) - p) > 1e-12:
            return None
        den = den * f.denominator // math.gcd(den, f.denominator)
        if den > 10**6:
            return None
    return den


def default_sum_step(v_grid: ScalarGrid, probs) -> float:
    """Exact lattice step when probabilities are rationals with a small denominator."""
    den = _common_denominator(probs)
    unit = v_grid.step
    if den is not None and abs(v_grid.lo / unit - round(v_grid.lo / unit)) < 1e-9:
        return unit / den
    return unit * 1e-9


def v_offsets(v_grid: ScalarGrid, z_grid: ScalarGrid) -> np.ndarray:
    """z-index offset of every v-grid point; requires commensurate steps."""
    off = v_grid.points / z_grid.step
    rounded = np.rint(off)
    if np.any(np.abs(off - rounded) > 1e-9 * np.maximum(1.0, np.abs(off))):
        raise ConfigInvalid(["v-grid points must be integer multiples of the z-grid step"])
    return rounded.astype(np.int64)


def lattice(probs, v_grid: ScalarGrid, eps: float, sum_step: float | None = None):
    """Integer increments ``p_j v_q / step`` and the tolerance in lattice units."""
    step = default_sum_step(v_grid, probs) if sum_step is None else sum_step
    inc = np.rint(np.outer(probs, v_grid.points) / step).astype(np.int64)
    tol_units = int(math.floor(eps / step + 1e-6))
    span = int(np.sum(inc.max(axis=1) - inc.min(axis=1)))
    return inc, tol_units, span


def zero_index(voff: np.ndarray) -> int:
    """v-grid index of ``v = 0``, or -1 when the grid lacks it."""
    hits = np.flatnonzero(voff == 0)
    return int(hits[0]) if hits.size else -1


def prefer_zero(res: InnerResult, W, zi: int, probs, voff) -> InnerResult:
    """Replace an optimal profile by ``v = 0`` on every atom when that ties."""
    q0 = zero_index(voff)
    if q0 < 0 or not np.all(np.isfinite(W[:, zi])):
        return res
    z = float(probs @ W[:, zi])
    if z <= res.value + K.BAND * (1.0 + abs(res.value)) or res.value == PLUS_INF:
        return InnerResult(z, (q0,) * W.shape[0], 0.0)
    return res


def _admissible(W: np.ndarray, zi: int, voff: np.ndarray) -> list[list[int]]:
    nz = W.shape[1]
    return [[q for q in range(voff.size) if 0 <= zi + voff[q] < nz and W[j, zi + voff[q]] < PLUS_INF]
            for j in range(W.shape[0])]


def _exhaustive(W, zi, probs, vval, voff, eps) -> InnerResult:
    cand = _admissible(W, zi, voff)
    total = math.prod(len(c) for c in cand)
    if total > EXHAUSTIVE_BUDGET:
        raise BudgetExceeded(total, EXHAUSTIVE_BUDGET, "profile")
    if total == 0:
        return InnerResult(PLUS_INF, (), 0.0)
    na = len(cand)
    # C-order flattening of the product grid is lexicographic order of profiles
    cost = np.zeros([len(c) for c in cand])
    resid = np.zeros_like(cost)
    for j, c in enumerate(cand):
        shape = [1] * na
        shape[j] = len(c)
        q = np.asarray(c)
        cost = cost + (probs[j] * W[j, zi + voff[q]]).reshape(shape)
        resid = resid + (probs[j] * vval[q]).reshape(shape)
    cost[np.abs(resid) > eps + 1e-12] = PLUS_INF
    best = float(cost.min())
    if best == PLUS_INF:
        return InnerResult(PLUS_INF, (), 0.0)
    flat = int(np.argmax(cost.ravel() <= best + K.BAND * (1.0 + abs(best))))
    idx = np.unravel_index(flat, cost.shape)
    prof = tuple(int(cand[j][k]) for j, k in enumerate(idx))
    return InnerResult(best, prof, float(resid[idx]))


def _sumdp_sparse(W, zi, probs, vval, voff, inc, tol_units) -> InnerResult:
    """Dictionary version of the lattice DP for spans too wide for dense arrays."""
    na = W.shape[0]
    cand = _admissible(W, zi, voff)
    if any(not c for c in cand):
        return InnerResult(PLUS_INF, (), 0.0)
    reach = [{0}]
    for j in range(na):
        reach.append({s + inc[j, q] for s in reach[-1] for q in cand[j]})
    B = [dict() for _ in range(na + 1)]
    B[na] = {s: 0.0 for s in reach[na] if abs(s) <= tol_units}
    for k in range(na - 1, -1, -1):
        for s in reach[k]:
            best = PLUS_INF
            for q in cand[k]:
                b = B[k + 1].get(s + inc[k, q], PLUS_INF)
                if b < PLUS_INF:
                    best = min(best, probs[k] * W[k, zi + voff[q]] + b)
            if best < PLUS_INF:
                B[k][s] = best
    opt = B[0].get(0, PLUS_INF)
    if opt == PLUS_INF:
        return InnerResult(PLUS_INF, (), 0.0)
    band = K.BAND * (1.0 + abs(opt))
    prof, s, acc = [], 0, 0.0
    for k in range(na):
        for q in cand[k]:
            b = B[k + 1].get(s + inc[k, q], PLUS_INF)
            c = probs[k] * W[k, zi + voff[q]]
            if b < PLUS_INF and acc + c + b <= opt + band:
                prof.append(q)
                acc += c
                s += inc[k, q]
                break
    return InnerResult(opt, tuple(prof), float(np.dot(probs, vval[prof])))


def inner_v_minimization(W, z_index: int, probs, cfg: InnerSolveConfig, z_grid: ScalarGrid,
                         method: str | None = None) -> InnerResult:
    """Solve one inner problem; ``W[j]`` is the next-stage value row of atom j.

    An infeasible cell (no admissible zero-mean profile) gives
    ``InnerResult(inf, (), 0.0)``.
    """
    W = np.ascontiguousarray(W, dtype=float)
    if W.ndim != 2 or W.shape[1] != z_grid.n:
        raise ValueError("W must have one row per atom and one column per z-grid point")
    probs = np.ascontiguousarray(probs, dtype=float)
    method = cfg.method if method is None else method
    voff = v_offsets(cfg.v_grid, z_grid)
    vval = np.ascontiguousarray(cfg.v_grid.points, dtype=float)
    eps = cfg.eps_for(probs)
    if method == "exhaustive":
        return prefer_zero(_exhaustive(W, z_index, probs, vval, voff, eps), W, z_index, probs, voff)
    prof = np.empty(W.shape[0], np.int64)
    if method == "sumdp":
        inc, tol_units, span = lattice(probs, cfg.v_grid, eps, cfg.sum_step)
        if span > LATTICE_SPAN_LIMIT:
            return prefer_zero(_sumdp_sparse(W, z_index, probs, vval, voff, inc, tol_units),
                               W, z_index, probs, voff)
        val = K.sumdp_cell(W, z_index, probs, voff, inc, tol_units, prof)
    elif method == "muscan":
        inc, tol_units, span = lattice(probs, cfg.v_grid, eps, cfg.sum_step)
        if cfg.refine and span > LATTICE_SPAN_LIMIT:
            raise ConfigInvalid(["muscan refinement needs a lattice; set refine = false or sum_step"])
        mus = np.ascontiguousarray(cfg.mu_grid.points, dtype=float)
        mrows = np.empty((W.shape[0], mus.size))
        K.mu_rows(W, z_index, voff, vval, mus, mrows)
        val, _ = K.muscan_cell(W, mrows, z_index, probs, voff, vval, mus, eps, prof,
                               inc, tol_units, cfg.refine, np.empty_like(W))
    else:
        raise ConfigInvalid([f"unknown inner method {method!r}"])
    if val == PLUS_INF:
        res = InnerResult(PLUS_INF, (), 0.0)
    else:
        res = InnerResult(float(val), tuple(int(q) for q in prof), float(np.dot(probs, vval[prof])))
    return prefer_zero(res, W, z_index, probs, voff)


def lagrangian_bound(W, z_index: int, probs, cfg: InnerSolveConfig, z_grid: ScalarGrid) -> float:
    """Best decoupled dual value over the mu-grid (a lower bound on the inner minimum)."""
    W = np.ascontiguousarray(W, dtype=float)
    probs = np.ascontiguousarray(probs, dtype=float)
    voff = v_offsets(cfg.v_grid, z_grid)
    vval = np.ascontiguousarray(cfg.v_grid.points, dtype=float)
    mus = np.ascontiguousarray(cfg.mu_grid.points, dtype=float)
    mrows = np.empty((W.shape[0], mus.size))
    K.mu_rows(W, z_index, voff, vval, mus, mrows)
    dual = probs @ mrows - np.abs(mus) * cfg.eps_for(probs)
    return float(np.max(dual))
