"""Single-reservoir benchmark with a probability target on the final volume.

The dam sells turbinated water at deterministic prices; revenue enters as a
negative cost. The final requirement ``P(x_T >= l) >= pi`` is encoded as the
expectation constraint ``E[g(x_T)] <= b`` with ``g(x) = -H(x - l)`` and
``b = -pi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from extdp.core import (
    GRID_RTOL,
    ConfigInvalid,
    NoiseModel,
    NoiseStage,
    ProblemDefinition,
    ScalarGrid,
    TimeHorizon,
    make_uniform_grid,
)

DEFAULT_PRICES = (10.0, 10.0, 10.0, 8.0, 6.0, 4.0, 4.0, 4.0, 4.0, 6.0, 8.0, 10.0)


def heaviside(y):
    """1 for ``y >= 0``, 0 otherwise (closed at the origin)."""
    out = (np.asarray(y) >= 0).astype(float)
    return float(out) if out.ndim == 0 else out


def dam_turbinate(x, u, w, x_min=0.0):
    """Water actually released: the request, capped by what is available."""
    return np.minimum(u, x + w - x_min)


def dam_dynamics(x, u, w, bounds=(0.0, 20.0)):
    lo, hi = bounds
    return np.minimum(hi, np.maximum(lo, x - u + w))


def dam_stage_cost(t, x, u, w, prices, x_min=0.0):
    return -prices[t] * dam_turbinate(x, u, w, x_min)


def _multiple(a: float, b: float) -> bool:
    r = a / b
    return abs(r - round(r)) <= 1e-9 * max(1.0, abs(r))


@dataclass(frozen=True)
class DamConfig:
    T: int = 12
    x0: float = 10.0
    x_bounds: tuple[float, float] = (0.0, 20.0)
    u_bounds: tuple[float, float] = (0.0, 3.0)
    w_bounds: tuple[float, float] = (0.0, 4.0)
    prices: tuple[float, ...] = DEFAULT_PRICES
    level: float = 10.0
    pi: float = 0.9
    dx: float = 0.1
    du: float = 0.3
    dw: float = 0.2
    dz: float = 0.05
    dv: float = 0.05
    z_halfwidth: float = 1.0
    v_bound: float = 1.0

    def problems(self) -> list[str]:
        out = []
        (xl, xh), (ul, uh), (wl, wh) = self.x_bounds, self.u_bounds, self.w_bounds
        if self.T < 1:
            out.append("T must be >= 1")
        if len(self.prices) != self.T:
            out.append(f"prices has length {len(self.prices)}, expected T = {self.T}")
        if any(p < 0 for p in self.prices):
            out.append("prices must be nonnegative")
        if not xl <= self.x0 <= xh:
            out.append("x0 outside the volume bounds")
        if not (xl <= xh and ul <= uh and wl <= wh):
            out.append("bounds must satisfy lo <= hi")
        for name in ("dx", "du", "dw", "dz", "dv"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if out:
            return out
        if not (_multiple(self.du, self.dx) and _multiple(self.dw, self.dx)):
            out.append("du and dw must be integer multiples of dx")
        if not _multiple(self.dv, self.dz):
            out.append("dv must be an integer multiple of dz")
        for name, (lo, hi), step in (("x", self.x_bounds, self.dx), ("u", self.u_bounds, self.du),
                                     ("w", self.w_bounds, self.dw)):
            if not _multiple(hi - lo, step):
                out.append(f"{name} range is not a multiple of its step")
        if not _multiple(self.x0 - xl, self.dx):
            out.append("x0 is not on the x-grid")
        if not _multiple(ul - xl, self.dx) or not _multiple(wl - xl, self.dx):
            out.append("u and w grids must be commensurate with the x-grid")
        if not 0.0 <= self.pi <= 1.0:
            out.append("pi must lie in [0, 1]")
        if not _multiple(2 * self.z_halfwidth, self.dz) or not _multiple(2 * self.v_bound, self.dv):
            out.append("z and v ranges must be multiples of their steps")
        return out


@dataclass(frozen=True)
class DamInstance:
    config: DamConfig
    problem: ProblemDefinition
    x_grid: ScalarGrid
    u_grid: ScalarGrid
    noise: NoiseModel
    b: float
    z0: float
    z_grid: ScalarGrid
    v_grid: ScalarGrid
    x0: float = field(default=10.0)


def build_dam_problem(cfg: DamConfig | None = None) -> DamInstance:
    cfg = DamConfig() if cfg is None else cfg
    problems = cfg.problems()
    if problems:
        raise ConfigInvalid(problems)
    prices = np.asarray(cfg.prices, dtype=float)
    xl, xh = cfg.x_bounds
    level = cfg.level

    def dynamics(t, x, u, w):
        return dam_dynamics(x, u, w, (xl, xh))

    def stage_cost(t, x, u, w):
        return dam_stage_cost(t, x, u, w, prices, xl)

    def terminal_cost(x):
        return np.zeros(np.shape(x))

    def constraint(x):
        # tolerance keeps grid points that print as l on the success side
        return -heaviside(np.asarray(x) - level + GRID_RTOL)

    def event(x):
        return heaviside(np.asarray(x) - level + GRID_RTOL)

    problem = ProblemDefinition(TimeHorizon(0, cfg.T), dynamics, stage_cost, terminal_cost,
                                constraint, 1, event, "dam")
    x_grid = make_uniform_grid(xl, xh, cfg.dx)
    u_grid = make_uniform_grid(*cfg.u_bounds, cfg.du)
    w_grid = make_uniform_grid(*cfg.w_bounds, cfg.dw)
    noise = NoiseModel.iid(NoiseStage.uniform(w_grid.points), cfg.T)
    z0 = -cfg.pi
    z_grid = make_uniform_grid(round(z0 - cfg.z_halfwidth, 12), round(z0 + cfg.z_halfwidth, 12), cfg.dz)
    v_grid = make_uniform_grid(-cfg.v_bound, cfg.v_bound, cfg.dv)
    return DamInstance(cfg, problem, x_grid, u_grid, noise, -cfg.pi, z0, z_grid, v_grid, cfg.x0)
