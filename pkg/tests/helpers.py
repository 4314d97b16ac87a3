"""Random tiny instances with table-driven dynamics, small enough for the tree oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from extdp import (
    InnerSolveConfig,
    NoiseModel,
    NoiseStage,
    ProblemDefinition,
    TimeHorizon,
    make_uniform_grid,
)
from extdp.oracle import constrained_frontier
from extdp.core import enumerate_tree


@dataclass
class Tiny:
    problem: ProblemDefinition
    x_grid: object
    u_grid: object
    noise: NoiseModel
    x0: float
    T: int
    step: float  # z and v resolution which makes every conditional expectation on-grid

    def tree(self, t0: int = 0):
        return enumerate_tree(self.noise, t0, self.T)

    def v_grid(self):
        return make_uniform_grid(-1.0, 1.0, self.step)

    def z_grid(self, b: float):
        return make_uniform_grid(round(b - 1.0, 12), round(b + 1.0, 12), self.step)

    def inner(self, method: str = "exhaustive") -> InnerSolveConfig:
        return InnerSolveConfig(self.v_grid(), method=method)


def table_problem(F, C, K, G, name="tiny") -> ProblemDefinition:
    """Problem on integer states, controls and atom indices, read from lookup tables.

    ``F[t, x, u, j]`` is the next state, ``C[t, x, u, j]`` the stage cost,
    ``K[x]`` the final cost and ``G[x]`` the constraint function.
    """
    T = F.shape[0]

    def ix(a):
        return np.rint(np.asarray(a, dtype=float)).astype(np.int64)

    def dynamics(t, x, u, w):
        return F[t][ix(x), ix(u), ix(w)].astype(float)

    def stage_cost(t, x, u, w):
        return C[t][ix(x), ix(u), ix(w)]

    def terminal(x):
        return K[ix(x)]

    def constraint(x):
        return G[ix(x)]

    return ProblemDefinition(TimeHorizon(0, T), dynamics, stage_cost, terminal, constraint, 1, None, name)

def parity_problem(T=2):
    """x, u, w in {0, 1}; x' = (x + u + w) mod 2, L = u, K(x) = x."""
    return ProblemDefinition(
        TimeHorizon(0, T),
        lambda t, x, u, w: np.mod(x + u + w, 2.0),
        lambda t, x, u, w: np.broadcast_to(u, np.broadcast_shapes(np.shape(x), np.shape(u), np.shape(w))) * 1.0,
        lambda x: np.asarray(x, dtype=float),
    )


SHAPES = [  # (T, atom probabilities)
    (1, (0.5, 0.5)),
    (2, (0.5, 0.5)),
    (3, (0.5, 0.5)),
    (1, (1 / 3, 1 / 3, 1 / 3)),
    (2, (1 / 3, 1 / 3, 1 / 3)),
    (2, (0.25, 0.75)),
    (3, (1.0,)),
]


def random_tiny(rng: np.random.Generator, T: int, probs, n_states: int = 4, n_controls: int = 3) -> Tiny:
    na = len(probs)
    F = rng.integers(0, n_states, size=(T, n_states, n_controls, na))
    C = rng.integers(0, 7, size=(T, n_states, n_controls, na)) / 2.0
    K = rng.integers(0, 7, size=n_states) / 2.0
    G = -rng.integers(0, 2, size=n_states).astype(float)
    problem = table_problem(F, C, K, G)
    den = round(1.0 / min(probs))
    noise = NoiseModel.iid(NoiseStage(np.arange(na, dtype=float), np.asarray(probs, dtype=float)), T)
    return Tiny(problem, make_uniform_grid(0, n_states - 1, 1), make_uniform_grid(0, n_controls - 1, 1),
                noise, float(rng.integers(0, n_states)), T, 1.0 / den**T)


def feasible_level(inst: Tiny, rng: np.random.Generator) -> float:
    """A level between the smallest reachable ``E[g(x_T)]`` and 0, on the z resolution."""
    front = constrained_frontier(inst.problem, inst.x0, inst.tree(), inst.u_grid)
    gmin = min(g[0] for _, g in front)
    k_lo = math.ceil(gmin / inst.step - 1e-9)
    return round(int(rng.integers(k_lo, 1)) * inst.step, 12)


CRITERIA: list[str] = []


def record(number: int, title: str, checks: dict[str, tuple[bool, str]]) -> bool:
    """Store and print one PASS/FAIL line for an acceptance criterion."""
    ok = all(c[0] for c in checks.values())
    detail = "; ".join(f"{k}: {v[1]}{'' if v[0] else ' (FAIL)'}" for k, v in checks.items())
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} | {detail}"
    CRITERIA.append(line)
    print(line)
    return ok


def within_rel(value: float, target: float, rel: float) -> tuple[bool, str]:
    return abs(value - target) <= rel * abs(target), f"{value:.4f} vs {target} (rel {rel:g})"


def within_abs(value: float, target: float, tol: float) -> tuple[bool, str]:
    return abs(value - target) <= tol, f"{value:.4f} vs {target} (abs {tol:g})"


def random_inner(rng: np.random.Generator, monotone: bool = False):
    """A random inner problem: ``(W, z_index, probs, cfg, z_grid)``.

    Up to 4 atoms, a v-grid of at most 7 points, rational probabilities and
    next-stage values with some infinite entries. ``monotone`` makes every
    ``W_j`` nonincreasing in z, as extended value tables are.
    """
    na = int(rng.integers(1, 5))
    half = int(rng.integers(1, 4))
    v_grid = make_uniform_grid(-half, half, 1)
    nz = int(rng.integers(2 * half + 1, 2 * half + 6))
    z_grid = make_uniform_grid(0, nz - 1, 1)
    weights = rng.integers(1, 6, size=na).astype(float)
    probs = weights / weights.sum()
    W = rng.integers(-20, 21, size=(na, nz)) / 4.0
    if monotone:
        W = -np.sort(-W, axis=1)
        cut = rng.integers(0, 3, size=na)
        for j in range(na):
            W[j, : cut[j]] = np.inf
    else:
        W[rng.random((na, nz)) < 0.15] = np.inf
    zi = int(rng.integers(0, nz))
    cfg = InnerSolveConfig(v_grid, mu_grid=make_uniform_grid(-40.0, 40.0, 0.25))
    return W, zi, probs, cfg, z_grid
