"""Brute-force solvers on full scenario trees, for tiny instances only.

Adaptedness is structural: a control is attached to a tree node, so it can
depend on the noise history up to that node and nothing else. States are
propagated exactly through the dynamics (no grids), which makes these
solvers an independent reference for the grid-based DP code.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from extdp.core import PLUS_INF, BudgetExceeded, Infeasible, ProblemDefinition, ScalarGrid, ScenarioTree

ORACLE_BUDGET = 10**7
TOL = 1e-9


class _Counter:
    def __init__(self, budget: int):
        self.budget = budget
        self.count = 0

    def add(self, k: int, what: str = "assignment"):
        self.count += k
        if self.count > self.budget:
            raise BudgetExceeded(self.count, self.budget, what)


def _controls(u_grid) -> list[float]:
    return [float(u) for u in (u_grid.points if isinstance(u_grid, ScalarGrid) else u_grid)]


def _step(problem: ProblemDefinition, t: int, x: float, u: float, w: float) -> tuple[float, float]:
    nx = float(problem.dynamics(t, np.float64(x), np.float64(u), np.float64(w)))
    c = float(problem.stage_cost(t, np.float64(x), np.float64(u), np.float64(w)))
    return round(nx, 12), c


def _better(total: float, best: float) -> bool:
    """Strict improvement beyond the tie tolerance (earlier candidates win ties)."""
    if best == PLUS_INF:
        return total < PLUS_INF
    return total < best - TOL * (1 + abs(best))


def _cond_probs(tree: ScenarioTree, node) -> list[float]:
    return [tree.nodes[c].prob / node.prob for c in node.children]


def oracle_solve_unconstrained(problem: ProblemDefinition, x0: float, t0: int, tree: ScenarioTree,
                               u_grid, terminal=None, budget: int = ORACLE_BUDGET):
    """Optimal expected cost over adapted controls and the per-node minimizers.

    Ties go to the first control in ``u_grid`` order.
    """
    if tree.t0 != t0:
        raise ValueError("tree root stage differs from t0")
    term = problem.terminal_cost if terminal is None else terminal
    us = _controls(u_grid)
    counter = _Counter(budget)
    memo: dict = {}

    def solve(nid: int, x: float):
        key = (nid, x)
        if key in memo:
            return memo[key]
        node = tree.nodes[nid]
        if not node.children:
            out = (float(term(np.float64(x))), None)
            memo[key] = out
            return out
        probs = _cond_probs(tree, node)
        best, bu = PLUS_INF, None
        counter.add(len(us) * len(node.children), "node evaluation")
        for u in us:
            total = 0.0
            for c, p in zip(node.children, probs):
                nx, cost = _step(problem, node.stage, x, u, tree.nodes[c].noise[-1])
                total += p * (cost + solve(c, nx)[0])
            if _better(total, best):
                best, bu = total, u
        memo[key] = (best, bu)
        return best, bu

    value = solve(0, round(float(x0), 12))[0]
    controls = _walk_controls(problem, tree, x0, lambda nid, x: memo[(nid, x)][1])
    return value, controls


def _walk_controls(problem, tree, x0, pick) -> dict[int, float]:
    """Follow the chosen controls down the tree; ``pick(node, x)`` gives u."""
    out: dict[int, float] = {}
    stack = [(0, round(float(x0), 12))]
    while stack:
        nid, x = stack.pop()
        node = tree.nodes[nid]
        if not node.children:
            continue
        u = pick(nid, x)
        out[nid] = u
        for c in node.children:
            nx, _ = _step(problem, node.stage, x, u, tree.nodes[c].noise[-1])
            stack.append((c, nx))
    return out


# -- expectation constraint -------------------------------------------------

@dataclass(frozen=True)
class _Point:
    cost: float
    g: tuple[float, ...]
    plan: object  # (u, child plans) or None at leaves


def _dominates(a: _Point, b: _Point) -> bool:
    return a.cost <= b.cost + TOL * (1 + abs(b.cost)) and all(x <= y + TOL for x, y in zip(a.g, b.g))


def _prune(points: list[_Point]) -> list[_Point]:
    """Drop points weakly dominated by an earlier kept point (first one wins ties)."""
    kept: list[_Point] = []
    for p in sorted(points, key=lambda q: (q.cost, q.g)):
        if not any(_dominates(k, p) for k in kept):
            kept.append(p)
    return kept


def _frontiers(problem, tree, x0, us, counter):
    memo: dict = {}

    def front(nid: int, x: float) -> list[_Point]:
        key = (nid, x)
        if key in memo:
            return memo[key]
        node = tree.nodes[nid]
        if not node.children:
            g = tuple(float(v) for v in problem.g(np.float64(x)).ravel())
            out = [_Point(float(problem.terminal_cost(np.float64(x))), g, None)]
            memo[key] = out
            return out
        probs = _cond_probs(tree, node)
        cands = []
        for u in us:
            partial = [_Point(0.0, (0.0,) * problem.m, ())]
            for c, p in zip(node.children, probs):
                nx, cost = _step(problem, node.stage, x, u, tree.nodes[c].noise[-1])
                sub = front(c, nx)
                counter.add(len(partial) * len(sub))
                partial = _prune([
                    _Point(a.cost + p * (cost + s.cost), tuple(ga + p * gs for ga, gs in zip(a.g, s.g)),
                           a.plan + (s.plan,))
                    for a in partial for s in sub])
            cands.extend(_Point(q.cost, q.g, (u, q.plan)) for q in partial)
        out = _prune(cands)
        memo[key] = out
        return out

    return front(0, round(float(x0), 12))


def _plan_controls(problem, tree, x0, plan) -> dict[int, float]:
    out: dict[int, float] = {}
    stack = [(0, round(float(x0), 12), plan)]
    while stack:
        nid, x, pl = stack.pop()
        node = tree.nodes[nid]
        if not node.children:
            continue
        u, subs = pl
        out[nid] = u
        for c, sp in zip(node.children, subs):
            nx, _ = _step(problem, node.stage, x, u, tree.nodes[c].noise[-1])
            stack.append((c, nx, sp))
    return out


def oracle_solve_expectation_constrained(problem: ProblemDefinition, x0: float, t0: int, b,
                                         tree: ScenarioTree, u_grid, budget: int = ORACLE_BUDGET):
    """Minimum expected cost over adapted controls with ``E[g(x_T)] <= b``.

    Enumerates every adapted control map, keeping at each node only the
    (cost, E[g]) pairs not dominated by another achievable pair; dropping a
    dominated pair cannot lose the constrained optimum. Raises
    :class:`Infeasible` when no control map meets the level.
    """
    if tree.t0 != t0:
        raise ValueError("tree root stage differs from t0")
    b = np.atleast_1d(np.asarray(b, dtype=float))
    counter = _Counter(budget)
    front = _frontiers(problem, tree, x0, _controls(u_grid), counter)
    ok = [p for p in front if all(g <= bi + TOL for g, bi in zip(p.g, b))]
    if not ok:
        raise Infeasible(f"no adapted control map reaches E[g(x_T)] <= {b}")
    best = min(ok, key=lambda p: p.cost)
    return best.cost, _plan_controls(problem, tree, x0, best.plan)


def constrained_frontier(problem, x0, tree, u_grid, budget: int = ORACLE_BUDGET) -> list[tuple[float, tuple]]:
    """All nondominated (expected cost, E[g(x_T)]) pairs from the root."""
    front = _frontiers(problem, tree, x0, _controls(u_grid), _Counter(budget))
    return [(p.cost, p.g) for p in front]


# -- martingale construction ------------------------------------------------

@dataclass(frozen=True)
class MartingaleConstruction:
    """Per-node conditional expectation of g, increment v (on entering the node) and z.

    ``exact`` holds the same quantities as Fractions when the inputs are
    rational with small denominators, else ``None``.
    """

    cond: np.ndarray
    v: np.ndarray
    z: np.ndarray
    exact: dict | None


def _as_fraction(x: float) -> Fraction | None:
    f = Fraction(x).limit_denominator(10**9)
    return f if abs(float(f) - x) <= 1e-15 * max(1.0, abs(x)) else None


def construct_martingale_controls(tree: ScenarioTree, leaf_g, z0) -> MartingaleConstruction:
    """Increments of the conditional expectation of ``g(x_T)`` along the tree.

    ``leaf_g`` is indexed like ``tree.leaves``, shape (n_leaves,) or
    (n_leaves, m). For every leaf ``g(x_T) - z_T = E[g(x_T)] - z0``.
    """
    g = np.asarray(leaf_g, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    m = g.shape[1]
    z0v = np.broadcast_to(np.atleast_1d(np.asarray(z0, dtype=float)), (m,))
    leaves = tree.levels[-1]
    if g.shape[0] != len(leaves):
        raise ValueError("one g value per leaf is required")

    fr_p = {nid: _as_fraction(n.prob) for nid, n in enumerate(tree.nodes)}
    fr_g = [[_as_fraction(v) for v in row] for row in g]
    fr_z = [_as_fraction(v) for v in z0v]
    rational = all(v is not None for v in fr_p.values()) and all(
        v is not None for row in fr_g for v in row) and all(v is not None for v in fr_z)

    n = len(tree.nodes)
    if rational:
        cond: list = [None] * n
        for k, nid in enumerate(leaves):
            cond[nid] = list(fr_g[k])
        for level in reversed(tree.levels[:-1]):
            for nid in level:
                node = tree.nodes[nid]
                cond[nid] = [sum(fr_p[c] * cond[c][i] for c in node.children) / fr_p[nid] for i in range(m)]
        v = [[Fraction(0)] * m for _ in range(n)]
        z = [list(fr_z) for _ in range(n)]
        for level in tree.levels[1:]:
            for nid in level:
                par = tree.nodes[nid].parent
                v[nid] = [cond[nid][i] - cond[par][i] for i in range(m)]
                z[nid] = [z[par][i] + v[nid][i] for i in range(m)]
        tofl = lambda rows: np.array([[float(x) for x in r] for r in rows])
        return MartingaleConstruction(tofl(cond), tofl(v), tofl(z), {"cond": cond, "v": v, "z": z})

    condf = np.zeros((n, m))
    for k, nid in enumerate(leaves):
        condf[nid] = g[k]
    for level in reversed(tree.levels[:-1]):
        for nid in level:
            node = tree.nodes[nid]
            condf[nid] = sum(tree.nodes[c].prob * condf[c] for c in node.children) / node.prob
    vf = np.zeros((n, m))
    zf = np.zeros((n, m))
    zf[0] = z0v
    for level in tree.levels[1:]:
        for nid in level:
            par = tree.nodes[nid].parent
            vf[nid] = condf[nid] - condf[par]
            zf[nid] = zf[par] + vf[nid]
    return MartingaleConstruction(condf, vf, zf, None)


# -- extended problem -------------------------------------------------------

def _leaf_g_of(problem, tree, x0, controls) -> np.ndarray:
    state = {0: round(float(x0), 12)}
    for level in tree.levels[1:]:
        for nid in level:
            node = tree.nodes[nid]
            par = tree.nodes[node.parent]
            state[nid], _ = _step(problem, par.stage, state[node.parent], controls[node.parent], node.noise[-1])
    return np.array([problem.g(np.float64(state[nid])).ravel() for nid in tree.levels[-1]])


def default_v_candidates(problem, x0, t0, z0, tree, u_grid, extra=(0.0,)) -> dict[int, list[float]]:
    """Construction increments of the constrained and unconstrained optima, plus ``extra``."""
    cands: dict[int, set] = {nid: {float(e) for e in extra} for nid in range(1, len(tree.nodes))}
    plans = []
    try:
        plans.append(oracle_solve_expectation_constrained(problem, x0, t0, z0, tree, u_grid)[1])
    except Infeasible:
        pass
    plans.append(oracle_solve_unconstrained(problem, x0, t0, tree, u_grid)[1])
    for ctrl in plans:
        mc = construct_martingale_controls(tree, _leaf_g_of(problem, tree, x0, ctrl), z0)
        for nid in range(1, len(tree.nodes)):
            cands[nid].add(round(float(mc.v[nid, 0]), 12))
    return {nid: sorted(c) for nid, c in cands.items()}


def oracle_solve_extended(problem: ProblemDefinition, x0: float, z0, t0: int, tree: ScenarioTree,
                          u_grid, v_candidates: dict[int, list[float]] | None = None,
                          eps: float = 1e-12, budget: int = ORACLE_BUDGET):
    """Optimum over adapted (u, v) with node-wise zero-mean v and ``g(x_T) <= z_T``.

    ``v_candidates[c]`` lists the values allowed for the increment on entering
    child node ``c``. Returns ``(value, {node: (u, {child: v})})``; raises
    :class:`Infeasible` when no assignment is feasible.
    """
    if problem.m != 1:
        raise ValueError("the extended oracle handles a scalar constraint")
    if tree.t0 != t0:
        raise ValueError("tree root stage differs from t0")
    if v_candidates is None:
        v_candidates = default_v_candidates(problem, x0, t0, float(np.atleast_1d(z0)[0]), tree, u_grid)
    us = _controls(u_grid)
    counter = _Counter(budget)
    memo: dict = {}

    def solve(nid: int, x: float, z: float):
        key = (nid, x, z)
        if key in memo:
            return memo[key]
        node = tree.nodes[nid]
        if not node.children:
            ok = float(problem.g(np.float64(x)).ravel()[0]) <= z + TOL
            out = (float(problem.terminal_cost(np.float64(x))) if ok else PLUS_INF, None)
            memo[key] = out
            return out
        probs = _cond_probs(tree, node)
        lists = [v_candidates[c] for c in node.children]
        best, arg = PLUS_INF, None
        for u in us:
            steps = [_step(problem, node.stage, x, u, tree.nodes[c].noise[-1]) for c in node.children]
            for prof in itertools.product(*lists):
                counter.add(1)
                if abs(sum(p * v for p, v in zip(probs, prof))) > eps:
                    continue
                total = 0.0
                for c, p, (nx, cost), v in zip(node.children, probs, steps, prof):
                    sub = solve(c, nx, round(z + v, 12))[0]
                    if sub == PLUS_INF:
                        total = PLUS_INF
                        break
                    total += p * (cost + sub)
                if _better(total, best):
                    best, arg = total, (u, dict(zip(node.children, prof)))
        memo[key] = (best, arg)
        return best, arg

    z0f = round(float(np.atleast_1d(z0)[0]), 12)
    value, _ = solve(0, round(float(x0), 12), z0f)
    if value == PLUS_INF:
        raise Infeasible("no adapted (u, v) assignment satisfies the final constraint")
    out: dict[int, tuple] = {}
    stack = [(0, round(float(x0), 12), z0f)]
    while stack:
        nid, x, z = stack.pop()
        node = tree.nodes[nid]
        if not node.children:
            continue
        u, vs = memo[(nid, x, z)][1]
        out[nid] = (u, vs)
        for c in node.children:
            nx, _ = _step(problem, node.stage, x, u, tree.nodes[c].noise[-1])
            stack.append((c, nx, round(z + vs[c], 12)))
    return value, out
