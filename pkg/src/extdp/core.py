"""Problem description types shared by every solver.

Grids are uniform, noise is finite and stagewise independent, and values live
in the extended reals ``R U {+inf}`` (represented by IEEE ``inf``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

PLUS_INF = math.inf

GRID_RTOL = 1e-9
PROB_TOL = 1e-12
DEFAULT_NODE_BUDGET = 10**6


class ExtdpError(Exception):
    """Base class for errors raised by this package."""


class NonIntegralRange(ExtdpError, ValueError):
    pass


class OutOfRange(ExtdpError, ValueError):
    pass


class OutOfHorizon(ExtdpError, ValueError):
    pass


class Infeasible(ExtdpError):
    pass


class BudgetExceeded(ExtdpError):
    def __init__(self, count: int, budget: int, what: str = "nodes"):
        super().__init__(f"{what} count {count} exceeds budget {budget}")
        self.count = count
        self.budget = budget


class ConfigInvalid(ExtdpError, ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NotConverged(ExtdpError):
    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history


# -- extended reals ---------------------------------------------------------

def ext_add(a: float, b: float) -> float:
    out = a + b
    if out == -math.inf or math.isnan(out):
        raise ValueError("negative infinity is not representable")
    return out


def ext_scale(p: float, a: float) -> float:
    """``p * a`` for a positive weight; ``p * inf = inf``."""
    if not p > 0:
        raise ValueError("weights must be positive")
    return a if a == math.inf else p * a


def ext_min(values) -> float:
    vals = list(values)
    if not vals:
        raise ValueError("min over an empty set")
    return min(vals, key=float)


# -- horizon and grids ------------------------------------------------------

@dataclass(frozen=True)
class TimeHorizon:
    t0: int
    T: int

    def __post_init__(self):
        if not (0 <= self.t0 < self.T):
            raise ValueError(f"need 0 <= t0 < T, got t0={self.t0}, T={self.T}")

    @property
    def stages(self) -> range:
        """Decision stages t0..T-1."""
        return range(self.t0, self.T)

    def __len__(self) -> int:
        return self.T - self.t0


@dataclass(frozen=True)
class ScalarGrid:
    lo: float
    hi: float
    step: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("grid needs at least one point")
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        expect = self.lo + (self.n - 1) * self.step
        if abs(expect - self.hi) > GRID_RTOL * max(1.0, abs(self.hi), abs(self.lo)):
            raise NonIntegralRange(f"hi={self.hi} is not lo + (n-1)*step")

    @cached_property
    def points(self) -> np.ndarray:
        pts = np.round(self.lo + self.step * np.arange(self.n), 12)
        pts.setflags(write=False)
        return pts

    def point(self, i: int) -> float:
        return float(self.points[i])

    def snap(self, value):
        return snap(self, value)

    def __len__(self) -> int:
        return self.n

    def contains(self, value, tol: float = GRID_RTOL) -> bool:
        """True if ``value`` lies on a grid point (within ``tol`` steps)."""
        pos = (value - self.lo) / self.step
        return bool(-tol <= pos <= self.n - 1 + tol and abs(pos - round(pos)) <= tol * max(1.0, abs(pos)))


def make_uniform_grid(lo: float, hi: float, step: float) -> ScalarGrid:
    if not step > 0:
        raise ValueError("step must be positive")
    if hi < lo:
        raise ValueError("hi must be >= lo")
    ratio = (hi - lo) / step
    k = round(ratio)
    if abs(ratio - k) > GRID_RTOL * max(1.0, abs(ratio)):
        raise NonIntegralRange(f"(hi - lo) = {hi - lo} is not a multiple of step {step}")
    return ScalarGrid(float(lo), float(hi), float(step), int(k) + 1)


def snap(grid: ScalarGrid, value):
    """Index of the nearest grid point; scalar in, int out; array in, array out."""
    arr = np.asarray(value, dtype=float)
    slack = grid.step / 2 + GRID_RTOL * max(1.0, abs(grid.lo), abs(grid.hi))
    if np.any(arr < grid.lo - slack) or np.any(arr > grid.hi + slack) or np.any(np.isnan(arr)):
        bad = arr[(arr < grid.lo - slack) | (arr > grid.hi + slack) | np.isnan(arr)]
        raise OutOfRange(f"value {bad.ravel()[0]} outside grid [{grid.lo}, {grid.hi}]")
    idx = np.clip(np.rint((arr - grid.lo) / grid.step), 0, grid.n - 1).astype(np.int64)
    if idx.ndim == 0:
        return int(idx)
    return idx


# -- noise ------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseStage:
    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        p = np.asarray(self.probs, dtype=float).ravel()
        if v.shape != p.shape or v.size == 0:
            raise ValueError("noise stage needs matching, nonempty values and probs")
        v.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_atoms(cls, atoms: Sequence[tuple[float, float]]) -> "NoiseStage":
        vals, probs = zip(*atoms)
        return cls(np.array(vals), np.array(probs))

    @classmethod
    def uniform(cls, values) -> "NoiseStage":
        v = np.asarray(values, dtype=float)
        return cls(v, np.full(v.size, 1.0 / v.size))

    @property
    def size(self) -> int:
        return int(self.values.size)

    def problems(self) -> list[str]:
        out = []
        if np.any(self.probs <= 0):
            out.append("nonpositive probability")
        s = float(self.probs.sum())
        if abs(s - 1.0) > PROB_TOL:
            out.append(f"probabilities sum to {s:.12g}")
        if np.any(np.diff(self.values) <= 0):
            out.append("atom values not strictly increasing")
        return out

    @cached_property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c


@dataclass(frozen=True)
class NoiseModel:
    """Noise ``w_1..w_T``; ``stages[t-1]`` is the distribution of ``w_t``."""

    stages: tuple[NoiseStage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @classmethod
    def iid(cls, stage: NoiseStage, T: int) -> "NoiseModel":
        return cls((stage,) * T)

    @property
    def T(self) -> int:
        return len(self.stages)

    def at(self, t: int) -> NoiseStage:
        """Distribution of ``w_t`` for t in 1..T."""
        if not 1 <= t <= self.T:
            raise OutOfHorizon(f"no noise stage w_{t}")
        return self.stages[t - 1]

    def require_valid(self) -> None:
        rep = validate_noise_model(self)
        if not rep.valid:
            raise ConfigInvalid([f"w_{t}: {msg}" for t, msg in rep.problems])


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    problems: list[tuple[int, str]] = field(default_factory=list)


def validate_noise_model(model: NoiseModel) -> ValidationReport:
    problems = [(t, msg) for t, st in enumerate(model.stages, start=1) for msg in st.problems()]
    return ValidationReport(not problems, problems)


# -- problems ---------------------------------------------------------------

Dynamics = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ProblemDefinition:
    """Data of a finite-horizon problem with an optional final constraint.

    All callables must accept broadcastable numpy arrays. ``constraint(x)``
    returns shape ``x.shape + (m,)`` or, for ``m == 1``, ``x.shape``.
    ``terminal_event`` is an optional indicator used only for reporting a
    success probability (the dam's ``x_T >= l``).
    """

    horizon: TimeHorizon
    dynamics: Dynamics
    stage_cost: Dynamics
    terminal_cost: Callable[[np.ndarray], np.ndarray]
    constraint: Callable[[np.ndarray], np.ndarray] | None = None
    m: int = 1
    terminal_event: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "problem"

    @property
    def t0(self) -> int:
        return self.horizon.t0

    @property
    def T(self) -> int:
        return self.horizon.T

    def restricted(self, t0: int) -> "ProblemDefinition":
        if not self.horizon.t0 <= t0 < self.horizon.T:
            raise OutOfHorizon(f"stage {t0} outside [{self.horizon.t0}, {self.horizon.T})")
        return replace(self, horizon=TimeHorizon(t0, self.horizon.T))

    def g(self, x) -> np.ndarray:
        """Constraint values with a trailing axis of length m."""
        if self.constraint is None:
            return np.zeros(np.shape(x) + (self.m,))
        out = np.asarray(self.constraint(np.asarray(x, dtype=float)), dtype=float)
        if out.shape == np.shape(x):
            out = out[..., None]
        if out.shape[-1] != self.m:
            raise ValueError(f"constraint has dimension {out.shape[-1]}, expected {self.m}")
        return out


# -- scenario trees ---------------------------------------------------------

@dataclass(frozen=True)
class TreeNode:
    stage: int
    path: tuple[int, ...]
    noise: tuple[float, ...]
    prob: float
    parent: int
    children: tuple[int, ...]


@dataclass(frozen=True)
class ScenarioTree:
    """Full scenario tree; adapted random variables are per-node values."""

    t0: int
    T: int
    nodes: tuple[TreeNode, ...]
    levels: tuple[tuple[int, ...], ...]

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def leaves(self) -> list[TreeNode]:
        return [self.nodes[i] for i in self.levels[-1]]


def tree_size(model: NoiseModel, t0: int, T: int) -> int:
    count, width = 1, 1
    for t in range(t0 + 1, T + 1):
        width *= model.at(t).size
        count += width
    return count


def enumerate_tree(model: NoiseModel, t0: int, T: int, budget: int = DEFAULT_NODE_BUDGET) -> ScenarioTree:
    size = tree_size(model, t0, T)
    if size > budget:
        raise BudgetExceeded(size, budget)
    nodes: list[dict] = [dict(stage=t0, path=(), noise=(), prob=1.0, parent=-1, children=[])]
    levels = [[0]]
    for t in range(t0 + 1, T + 1):
        st = model.at(t)
        level = []
        for parent in levels[-1]:
            pn = nodes[parent]
            for j in range(st.size):
                nodes.append(dict(
                    stage=t,
                    path=pn["path"] + (j,),
                    noise=pn["noise"] + (float(st.values[j]),),
                    prob=pn["prob"] * float(st.probs[j]),
                    parent=parent,
                    children=[],
                ))
                pn["children"].append(len(nodes) - 1)
                level.append(len(nodes) - 1)
        levels.append(level)
    frozen = tuple(TreeNode(children=tuple(n.pop("children")), **n) for n in nodes)
    return ScenarioTree(t0, T, frozen, tuple(tuple(lv) for lv in levels))


# -- transitions on grids ---------------------------------------------------

def next_state_indices(problem: ProblemDefinition, t: int, x_grid: ScalarGrid,
                       u_grid: ScalarGrid, stage: NoiseStage) -> np.ndarray:
    """Snapped next-state indices, shape (nx, nu, n_atoms)."""
    X = x_grid.points[:, None, None]
    U = u_grid.points[None, :, None]
    W = stage.values[None, None, :]
    nxt = np.broadcast_to(problem.dynamics(t, X, U, W), (x_grid.n, u_grid.n, stage.size))
    return snap(x_grid, nxt).reshape(x_grid.n, u_grid.n, stage.size)


def next_state_weights(problem: ProblemDefinition, t: int, x_grid: ScalarGrid,
                       u_grid: ScalarGrid, stage: NoiseStage):
    """Linear-interpolation brackets: (lo index, hi index, weight on hi)."""
    X = x_grid.points[:, None, None]
    U = u_grid.points[None, :, None]
    W = stage.values[None, None, :]
    nxt = np.broadcast_to(problem.dynamics(t, X, U, W), (x_grid.n, u_grid.n, stage.size)).astype(float)
    snap(x_grid, nxt)  # range check
    pos = np.clip((nxt - x_grid.lo) / x_grid.step, 0, x_grid.n - 1)
    near = np.rint(pos)
    pos = np.where(np.abs(pos - near) <= GRID_RTOL, near, pos)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, x_grid.n - 1)
    frac = pos - lo
    return lo, hi, frac


def expected_stage_cost(problem: ProblemDefinition, t: int, x_grid: ScalarGrid,
                        u_grid: ScalarGrid, stage: NoiseStage) -> np.ndarray:
    """Per-atom stage costs, shape (nx, nu, n_atoms)."""
    X = x_grid.points[:, None, None]
    U = u_grid.points[None, :, None]
    W = stage.values[None, None, :]
    L = np.broadcast_to(problem.stage_cost(t, X, U, W), (x_grid.n, u_grid.n, stage.size))
    return np.asarray(L, dtype=float)


def first_argmin(Q: np.ndarray, axis: int = -1, rtol: float = 1e-12) -> np.ndarray:
    """Smallest index attaining the minimum up to a relative round-off band."""
    m = Q.min(axis=axis, keepdims=True)
    band = np.where(np.isfinite(m), rtol * (1.0 + np.abs(m)), 0.0)
    return np.argmax(Q <= m + band, axis=axis)
