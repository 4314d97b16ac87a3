"""Dynamic programming on the augmented state (x, z).

The second state component z carries the remaining constraint budget; its
control v is chosen after the noise is observed and must have zero mean. At
the final stage a cell is feasible iff ``g(x) <= z``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from extdp import _kernels as K
from extdp.core import (
    PLUS_INF,
    ConfigInvalid,
    NoiseModel,
    NoiseStage,
    OutOfHorizon,
    ProblemDefinition,
    ScalarGrid,
    expected_stage_cost,
    next_state_indices,
)
from extdp.inner import (
    LATTICE_SPAN_LIMIT,
    InnerSolveConfig,
    _exhaustive,
    _sumdp_sparse,
    lattice,
    prefer_zero,
    v_offsets,
    zero_index,
)

log = logging.getLogger(__name__)

NO_ACTION = -1
FEAS_TOL = 1e-9


@dataclass(frozen=True)
class ExtendedValueTable:
    t0: int
    T: int
    x_grid: ScalarGrid
    z_grid: ScalarGrid
    values: np.ndarray
    audit: tuple[dict, ...] = ()

    def at(self, t: int) -> np.ndarray:
        if not self.t0 <= t <= self.T:
            raise OutOfHorizon(f"stage {t} outside [{self.t0}, {self.T}]")
        return self.values[t - self.t0]

    def value(self, t: int, x: float, z: float) -> float:
        return float(self.at(t)[self.x_grid.snap(x), self.z_grid.snap(z)])


@dataclass(frozen=True)
class ExtendedPolicy:
    """Feedbacks on (x, z): a u-index per cell and a v-index per cell and atom.

    Cells whose value is +inf hold ``u = 0`` and ``v = NO_ACTION``.
    """

    t0: int
    T: int
    x_grid: ScalarGrid
    z_grid: ScalarGrid
    u_grid: ScalarGrid
    v_grid: ScalarGrid
    u_index: np.ndarray
    v_index: tuple[np.ndarray, ...]
    probs: tuple[np.ndarray, ...] = field(default=())

    def at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.t0 <= t < self.T:
            raise OutOfHorizon(f"stage {t} outside [{self.t0}, {self.T})")
        return self.u_index[t - self.t0], self.v_index[t - self.t0]

    def truncate(self, t: int) -> "ExtendedPolicy":
        if not self.t0 <= t < self.T:
            raise OutOfHorizon(f"cannot truncate at {t}: policy covers [{self.t0}, {self.T})")
        k = t - self.t0
        return ExtendedPolicy(t, self.T, self.x_grid, self.z_grid, self.u_grid, self.v_grid,
                              self.u_index[k:].copy(), tuple(a.copy() for a in self.v_index[k:]),
                              self.probs[k:])

    def martingale_residuals(self) -> list[np.ndarray]:
        """``sum_j p_j v(x, z, j)`` per stage; NaN where no action is stored."""
        out = []
        vv = self.v_grid.points
        for vidx, p in zip(self.v_index, self.probs):
            res = (vv[np.maximum(vidx, 0)] * p).sum(axis=-1)
            out.append(np.where(np.any(vidx < 0, axis=-1), np.nan, res))
        return out


def terminal_extended_value(x: float, z, K_cost, g) -> float:
    """``K(x)`` if ``g(x) <= z`` componentwise, else +inf."""
    gz = np.atleast_1d(np.asarray(g(np.asarray(x, dtype=float)), dtype=float)) - np.atleast_1d(z)
    if np.all(gz <= FEAS_TOL):
        return float(K_cost(np.asarray(x, dtype=float)))
    return PLUS_INF


def terminal_extended_table(problem: ProblemDefinition, x_grid: ScalarGrid, z_grid: ScalarGrid) -> np.ndarray:
    Kx = np.broadcast_to(np.asarray(problem.terminal_cost(x_grid.points), dtype=float), (x_grid.n,))
    gx = problem.g(x_grid.points)[:, 0]
    feasible = gx[:, None] - z_grid.points[None, :] <= FEAS_TOL
    return np.where(feasible, Kx[:, None], PLUS_INF)


def _require_scalar_constraint(problem: ProblemDefinition):
    if problem.m != 1:
        raise ConfigInvalid(["grid-based extended DP supports a scalar constraint (m = 1) only"])


def _stage_inputs(problem, t, x_grid, u_grid, stage: NoiseStage):
    nxt = np.ascontiguousarray(next_state_indices(problem, t, x_grid, u_grid, stage))
    Lbar = np.ascontiguousarray(expected_stage_cost(problem, t, x_grid, u_grid, stage) @ stage.probs)
    return nxt, Lbar


def _python_stage(V_next, nxt, Lbar, probs, voff, vval, eps, solve_cell):
    nx, nu, na = nxt.shape
    nz = V_next.shape[1]
    V = np.full((nx, nz), PLUS_INF)
    U = np.zeros((nx, nz), np.int64)
    VP = np.full((nx, nz, na), NO_ACTION, np.int64)
    for x in range(nx):
        for u in range(nu):
            W = V_next[nxt[x, u]]
            for zi in range(nz):
                res = solve_cell(W, zi)
                if res.value == PLUS_INF:
                    continue
                tot = Lbar[x, u] + res.value
                cur = V[x, zi]
                if cur == PLUS_INF or tot < cur - K.BAND * (1.0 + abs(cur)):
                    V[x, zi], U[x, zi] = tot, u
                    VP[x, zi] = res.profile
    return V, U, VP


def extended_stage_update(V_next, t: int, problem: ProblemDefinition, x_grid: ScalarGrid,
                          z_grid: ScalarGrid, u_grid: ScalarGrid, noise: NoiseStage,
                          cfg: InnerSolveConfig):
    """One backward step of the extended recursion.

    ``noise`` is the distribution of ``w_{t+1}``. Returns
    ``(V_t, u_index, v_index, info)``; ``info`` holds the Lagrangian lower
    bound table (scan method) and the sampled exactness audit.
    """
    _require_scalar_constraint(problem)
    V_next = np.ascontiguousarray(V_next, dtype=float)
    if V_next.shape != (x_grid.n, z_grid.n):
        raise ValueError(f"V_next has shape {V_next.shape}, expected {(x_grid.n, z_grid.n)}")
    nxt, Lbar = _stage_inputs(problem, t, x_grid, u_grid, noise)
    probs = np.ascontiguousarray(noise.probs)
    voff = v_offsets(cfg.v_grid, z_grid)
    vval = np.ascontiguousarray(cfg.v_grid.points, dtype=float)
    eps = cfg.eps_for(probs)
    info: dict = {"stage": t, "method": cfg.method, "eps_mart": eps}

    if cfg.method == "exhaustive":
        V, U, VP = _python_stage(V_next, nxt, Lbar, probs, voff, vval, eps,
                                 lambda W, zi: prefer_zero(_exhaustive(W, zi, probs, vval, voff, eps),
                                                                    W, zi, probs, voff))
        return V, U, VP, info

    inc, tol_units, span = lattice(probs, cfg.v_grid, eps, cfg.sum_step)
    if span > LATTICE_SPAN_LIMIT:
        if cfg.method == "muscan" and cfg.refine:
            raise ConfigInvalid(["muscan refinement needs a lattice; set refine = false or sum_step"])
        if cfg.method == "sumdp":
            V, U, VP = _python_stage(V_next, nxt, Lbar, probs, voff, vval, eps,
                                     lambda W, zi: prefer_zero(
                                         _sumdp_sparse(W, zi, probs, vval, voff, inc, tol_units),
                                         W, zi, probs, voff))
            return V, U, VP, info
    mus = np.ascontiguousarray(cfg.mu_grid.points, dtype=float)
    if cfg.method == "muscan":
        method = K.MUSCAN
        mprof = K.lagrangian_profiles(V_next, voff, vval, mus)
    else:
        method = K.SUMDP
        mprof = np.empty((1, 1, 1))
    V, U, VP, LB = K.extended_stage(V_next, nxt, Lbar, probs, voff, vval, inc, tol_units,
                                    mus, eps, method, mprof, cfg.refine, zero_index(voff))
    if cfg.method == "muscan":
        info["lower_bound"] = LB
        if cfg.audit_fraction > 0:
            info["audit"] = _audit_stage(V, V_next, nxt, Lbar, probs, voff, inc, tol_units, cfg, t)
    return V, U, VP, info


def _audit_stage(V, V_next, nxt, Lbar, probs, voff, inc, tol_units, cfg, t) -> dict:
    """Re-solve a random sample of cells with the exact lattice DP."""
    nx, nz = V.shape
    rng = np.random.default_rng([cfg.audit_seed, t])
    n_cells = max(1, int(round(cfg.audit_fraction * nx * nz)))
    flat = rng.choice(nx * nz, size=min(n_cells, nx * nz), replace=False)
    prof = np.empty(nxt.shape[2], np.int64)
    gaps = []
    for c in np.sort(flat):
        x, zi = divmod(int(c), nz)
        best = PLUS_INF
        for u in range(nxt.shape[1]):
            val = K.sumdp_cell(np.ascontiguousarray(V_next[nxt[x, u]]), zi, probs, voff, inc, tol_units, prof)
            if val < PLUS_INF:
                best = min(best, Lbar[x, u] + val)
        if best == PLUS_INF and V[x, zi] == PLUS_INF:
            gaps.append(0.0)
        else:
            gaps.append(V[x, zi] - best)
    g = np.array(gaps)
    return {"cells": int(g.size), "max_gap": float(np.max(g)), "mean_gap": float(np.mean(g))}


def solve_extended(problem: ProblemDefinition, x_grid: ScalarGrid, z_grid: ScalarGrid,
                   u_grid: ScalarGrid, noise: NoiseModel,
                   cfg: InnerSolveConfig) -> tuple[ExtendedValueTable, ExtendedPolicy]:
    """Backward sweep from the terminal indicator table down to ``problem.t0``."""
    noise.require_valid()
    _require_scalar_constraint(problem)
    t0, T = problem.t0, problem.T
    values = np.empty((T - t0 + 1, x_grid.n, z_grid.n))
    values[-1] = terminal_extended_table(problem, x_grid, z_grid)
    u_index = np.empty((T - t0, x_grid.n, z_grid.n), dtype=np.int64)
    v_index: list[np.ndarray] = [None] * (T - t0)  # type: ignore[list-item]
    audits = []
    for t in range(T - 1, t0 - 1, -1):
        k = t - t0
        values[k], u_index[k], v_index[k], info = extended_stage_update(
            values[k + 1], t, problem, x_grid, z_grid, u_grid, noise.at(t + 1), cfg)
        if "audit" in info:
            audits.append({"stage": t, **info["audit"]})
        log.debug("extended stage %d done", t)
    probs = tuple(noise.at(t + 1).probs for t in range(t0, T))
    table = ExtendedValueTable(t0, T, x_grid, z_grid, values, tuple(reversed(audits)))
    policy = ExtendedPolicy(t0, T, x_grid, z_grid, u_grid, cfg.v_grid, u_index, tuple(v_index), probs)
    return table, policy
