"""Backward dynamic programming on the physical state grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from extdp.core import (
    NoiseModel,
    NoiseStage,
    OutOfHorizon,
    ProblemDefinition,
    ScalarGrid,
    expected_stage_cost,
    first_argmin,
    next_state_indices,
    next_state_weights,
)


@dataclass(frozen=True)
class ValueTable:
    """``values[t - t0]`` is V_t over the x-grid, for t in t0..T."""

    t0: int
    T: int
    x_grid: ScalarGrid
    values: np.ndarray

    def at(self, t: int) -> np.ndarray:
        if not self.t0 <= t <= self.T:
            raise OutOfHorizon(f"stage {t} outside [{self.t0}, {self.T}]")
        return self.values[t - self.t0]

    def value(self, t: int, x: float) -> float:
        return float(self.at(t)[self.x_grid.snap(x)])


@dataclass(frozen=True)
class StatePolicy:
    """State feedback: ``u_index[t - t0, i]`` is the u-grid index used at x_i."""

    t0: int
    T: int
    x_grid: ScalarGrid
    u_grid: ScalarGrid
    u_index: np.ndarray

    def at(self, t: int) -> np.ndarray:
        if not self.t0 <= t < self.T:
            raise OutOfHorizon(f"stage {t} outside [{self.t0}, {self.T})")
        return self.u_index[t - self.t0]

    def truncate(self, t: int) -> "StatePolicy":
        if not self.t0 <= t < self.T:
            raise OutOfHorizon(f"cannot truncate at {t}: policy covers [{self.t0}, {self.T})")
        return StatePolicy(t, self.T, self.x_grid, self.u_grid, self.u_index[t - self.t0:].copy())


def _read_next(V_next: np.ndarray, problem, t, x_grid, u_grid, stage, interpolate: bool) -> np.ndarray:
    if not interpolate:
        return V_next[next_state_indices(problem, t, x_grid, u_grid, stage)]
    lo, hi, frac = next_state_weights(problem, t, x_grid, u_grid, stage)
    a, b = V_next[lo], V_next[hi]
    with np.errstate(invalid="ignore"):
        mix = (1.0 - frac) * a + frac * b
    return np.where(frac == 0.0, a, np.where(frac == 1.0, b, mix))


def stage_q_values(V_next, t, problem, x_grid, u_grid, stage: NoiseStage, interpolate=False):
    """Expected cost-to-go of each (x, u) pair, shape (nx, nu)."""
    L = expected_stage_cost(problem, t, x_grid, u_grid, stage)
    nxt_vals = _read_next(np.asarray(V_next, dtype=float), problem, t, x_grid, u_grid, stage, interpolate)
    return (L + nxt_vals) @ stage.probs


def bellman_stage_update(V_next, t: int, problem: ProblemDefinition, x_grid: ScalarGrid,
                         u_grid: ScalarGrid, noise: NoiseStage, interpolate: bool = False):
    """One backward step; returns ``(V_t, phi_t)`` with smallest-index tie-break.

    ``noise`` is the distribution of ``w_{t+1}``.
    """
    V_next = np.asarray(V_next, dtype=float)
    if V_next.shape != (x_grid.n,):
        raise ValueError(f"V_next has shape {V_next.shape}, expected ({x_grid.n},)")
    Q = stage_q_values(V_next, t, problem, x_grid, u_grid, noise, interpolate)
    phi = first_argmin(Q, axis=1)
    return Q[np.arange(x_grid.n), phi], phi


def solve_classic(problem: ProblemDefinition, x_grid: ScalarGrid, u_grid: ScalarGrid,
                  noise: NoiseModel, terminal: Callable | None = None,
                  interpolate: bool = False) -> tuple[ValueTable, StatePolicy]:
    """Solve the unconstrained (or dualized) problem over ``problem.horizon``.

    ``terminal`` overrides ``problem.terminal_cost``; it maps x-grid points to
    extended reals.
    """
    noise.require_valid()
    t0, T = problem.t0, problem.T
    term = problem.terminal_cost if terminal is None else terminal
    VT = np.broadcast_to(np.asarray(term(x_grid.points), dtype=float), (x_grid.n,)).copy()
    values = np.empty((T - t0 + 1, x_grid.n))
    policy = np.empty((T - t0, x_grid.n), dtype=np.int64)
    values[-1] = VT
    for t in range(T - 1, t0 - 1, -1):
        values[t - t0], policy[t - t0] = bellman_stage_update(
            values[t - t0 + 1], t, problem, x_grid, u_grid, noise.at(t + 1), interpolate)
    return ValueTable(t0, T, x_grid, values), StatePolicy(t0, T, x_grid, u_grid, policy)
