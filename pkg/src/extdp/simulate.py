"""Exact distribution propagation and Monte Carlo rollouts of feedback policies.

Every scenario draws one uniform per noise stage ``w_1..w_T`` from its own
substream of a root seed, and atoms are picked by inverse CDF. A run
restarted at ``t0`` therefore reuses the tail of the same noise paths, and
scenario ``i`` does not depend on how many scenarios are drawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from extdp.classic import StatePolicy
from extdp.core import (
    ExtdpError,
    Infeasible,
    NoiseModel,
    OutOfHorizon,
    ProblemDefinition,
    ScalarGrid,
    expected_stage_cost,
    next_state_indices,
    snap,
)
from extdp.extended import NO_ACTION, ExtendedPolicy
from extdp.inner import v_offsets

MASS_TOL = 1e-10


@dataclass(frozen=True)
class DistributionOverGrid:
    """Probability mass on the x-grid, or on x-grid by z-grid when ``z_grid`` is set."""

    stage: int
    probs: np.ndarray
    x_grid: ScalarGrid
    z_grid: ScalarGrid | None = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < -MASS_TOL) or abs(p.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"not a probability vector (sum {p.sum():.12g})")
        object.__setattr__(self, "probs", p)

    @classmethod
    def dirac(cls, stage: int, x_grid: ScalarGrid, x: float, z_grid: ScalarGrid | None = None,
              z: float | None = None) -> "DistributionOverGrid":
        if z_grid is None:
            p = np.zeros(x_grid.n)
            p[x_grid.snap(x)] = 1.0
        else:
            p = np.zeros((x_grid.n, z_grid.n))
            p[x_grid.snap(x), z_grid.snap(z)] = 1.0
        return cls(stage, p, x_grid, z_grid)

    def x_marginal(self) -> np.ndarray:
        return self.probs if self.probs.ndim == 1 else self.probs.sum(axis=1)


def _stage_step(problem, t, x_grid, u_vals, stage):
    """Next x-index for every (x-cell, atom), given the control at each cell."""
    nxt = problem.dynamics(t, x_grid.points[:, None], u_vals[:, None], stage.values[None, :])
    return snap(x_grid, np.broadcast_to(nxt, (x_grid.n, stage.size)))


def _stage_cost(problem, t, x_grid, u_vals, stage):
    L = problem.stage_cost(t, x_grid.points[:, None], u_vals[:, None], stage.values[None, :])
    return np.broadcast_to(np.asarray(L, dtype=float), (x_grid.n, stage.size)) @ stage.probs


def pushforward_distribution(problem: ProblemDefinition, policy: StatePolicy,
                             initial: DistributionOverGrid, t0: int, t_end: int,
                             noise: NoiseModel, with_cost: bool = False):
    """Propagate ``initial`` (at stage t0) through the closed loop up to ``t_end``.

    With ``with_cost`` also returns the expected accumulated stage cost.
    """
    if not (policy.t0 <= t0 <= t_end <= policy.T):
        raise OutOfHorizon(f"policy covers [{policy.t0}, {policy.T}), asked [{t0}, {t_end})")
    x_grid = policy.x_grid
    p = initial.x_marginal().astype(float).copy()
    cost = 0.0
    for t in range(t0, t_end):
        stage = noise.at(t + 1)
        u_vals = policy.u_grid.points[policy.at(t)]
        nxt = _stage_step(problem, t, x_grid, u_vals, stage)
        if with_cost:
            mask = p > 0
            cost += float(p[mask] @ _stage_cost(problem, t, x_grid, u_vals, stage)[mask])
        new = np.zeros(x_grid.n)
        np.add.at(new, nxt.ravel(), (p[:, None] * stage.probs[None, :]).ravel())
        p = new
    out = DistributionOverGrid(t_end, p, x_grid)
    return (out, cost) if with_cost else out


def pushforward_extended(problem: ProblemDefinition, policy: ExtendedPolicy,
                         initial: DistributionOverGrid, t0: int, t_end: int,
                         noise: NoiseModel, with_cost: bool = False):
    """Same as :func:`pushforward_distribution` on the (x, z) grid.

    Mass reaching a cell without a stored action raises :class:`Infeasible`.
    """
    if not (policy.t0 <= t0 <= t_end <= policy.T):
        raise OutOfHorizon(f"policy covers [{policy.t0}, {policy.T}), asked [{t0}, {t_end})")
    x_grid, z_grid = policy.x_grid, policy.z_grid
    voff = v_offsets(policy.v_grid, z_grid)
    p = np.asarray(initial.probs, dtype=float)
    if p.ndim != 2:
        raise ValueError("extended push-forward needs a distribution over (x, z)")
    cost = 0.0
    zi = np.arange(z_grid.n)
    for t in range(t0, t_end):
        stage = noise.at(t + 1)
        U, VP = policy.at(t)
        live = p > 0
        if np.any(VP[live] == NO_ACTION):
            raise Infeasible(f"mass on (x, z) cells without an action at stage {t}")
        new = np.zeros_like(p)
        for ui in np.unique(U[live]):
            sel = live & (U == ui)
            xs, zs = np.nonzero(sel)
            u_vals = np.full(x_grid.n, policy.u_grid.points[ui])
            nxt = _stage_step(problem, t, x_grid, u_vals, stage)[xs]
            if with_cost:
                c = _stage_cost(problem, t, x_grid, u_vals, stage)[xs]
                cost += float(p[xs, zs] @ c)
            znew = zi[zs][:, None] + voff[VP[xs, zs]]
            if np.any(znew < 0) or np.any(znew >= z_grid.n):
                raise ExtdpError("z left its grid during push-forward")
            np.add.at(new, (nxt.ravel(), znew.ravel()),
                      (p[xs, zs][:, None] * stage.probs[None, :]).ravel())
        p = new
    out = DistributionOverGrid(t_end, p, x_grid, z_grid)
    return (out, cost) if with_cost else out


def constraint_from_distribution(dist: DistributionOverGrid, g) -> np.ndarray:
    """``E[g(x)]`` under ``dist``; ``g`` maps x-grid points to values of shape (n,) or (n, m)."""
    vals = np.asarray(g(dist.x_grid.points), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    return dist.x_marginal() @ vals


def evaluate_policy(problem: ProblemDefinition, policy, x0: float, t0: int, noise: NoiseModel,
                    z0: float | None = None):
    """Exact expected cost, ``E[g(x_T)]`` and event probability of a policy from a point.

    Returns ``(cost, constraint, probability, terminal distribution)``;
    probability is ``None`` when the problem has no terminal event.
    """
    if isinstance(policy, ExtendedPolicy):
        init = DistributionOverGrid.dirac(t0, policy.x_grid, x0, policy.z_grid, z0)
        dist, cost = pushforward_extended(problem, policy, init, t0, policy.T, noise, with_cost=True)
    else:
        init = DistributionOverGrid.dirac(t0, policy.x_grid, x0)
        dist, cost = pushforward_distribution(problem, policy, init, t0, policy.T, noise, with_cost=True)
    xm = dist.x_marginal()
    cost += float(xm @ np.broadcast_to(np.asarray(problem.terminal_cost(dist.x_grid.points), float),
                                       (dist.x_grid.n,)))
    cons = constraint_from_distribution(dist, problem.g)
    prob = None
    if problem.terminal_event is not None:
        prob = float(xm @ problem.terminal_event(dist.x_grid.points))
    return cost, cons, prob, dist


@dataclass(frozen=True)
class Trajectories:
    """Closed-loop paths; column k is stage ``t0 + k``.

    ``x`` and ``z`` have one more column than ``u``, ``w`` and ``v``.
    """

    t0: int
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    z: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass(frozen=True)
class SimulationReport:
    n: int
    seed: int
    t0: int
    mean_cost: float
    cost_stderr: float
    constraint_estimate: np.ndarray
    probability: float | None
    mean_zT: float | None
    z_stdev: float | None
    v_means: np.ndarray | None
    max_v_residual: float | None
    trajectories: Trajectories


def noise_uniforms(seed: int, n: int, T: int) -> np.ndarray:
    """One uniform per scenario and noise stage, shape (n, T); column k drives ``w_{k+1}``."""
    children = np.random.SeedSequence(seed).spawn(n)
    return np.array([np.random.default_rng(c).random(T) for c in children]).reshape(n, T)


def sample_atoms(noise: NoiseModel, uniforms: np.ndarray, t0: int) -> np.ndarray:
    """Atom indices for stages ``w_{t0+1}..w_T`` by inverse CDF."""
    cols = []
    for t in range(t0 + 1, noise.T + 1):
        st = noise.at(t)
        cols.append(np.minimum(np.searchsorted(st.cdf, uniforms[:, t - 1], side="right"), st.size - 1))
    return np.stack(cols, axis=1) if cols else np.zeros((uniforms.shape[0], 0), np.int64)


def _report(problem, n, seed, t0, cost, xT, traj, zT=None, v=None) -> SimulationReport:
    cost = cost + np.asarray(problem.terminal_cost(xT), dtype=float)
    gT = problem.g(xT)
    prob = None
    if problem.terminal_event is not None:
        prob = float(np.mean(problem.terminal_event(xT)))
    stderr = float(np.std(cost, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    mean_z = z_sd = v_means = v_res = None
    if zT is not None:
        mean_z = float(np.mean(zT))
        z_sd = float(np.std(zT, ddof=1)) if n > 1 else 0.0
        v_means = v.mean(axis=0)
        v_res = float(np.max(np.abs(v_means))) if v_means.size else 0.0
    return SimulationReport(n, seed, t0, float(np.mean(cost)), stderr, gT.mean(axis=0), prob,
                            mean_z, z_sd, v_means, v_res, traj)


def simulate_classic(problem: ProblemDefinition, policy: StatePolicy, x0: float, t0: int,
                     n: int, seed: int, noise: NoiseModel) -> SimulationReport:
    if not policy.t0 <= t0 < policy.T:
        raise OutOfHorizon(f"policy covers [{policy.t0}, {policy.T}), cannot start at {t0}")
    if n < 1:
        raise ValueError("need at least one scenario")
    T = policy.T
    atoms = sample_atoms(noise, noise_uniforms(seed, n, noise.T), t0)
    xi = np.full(n, policy.x_grid.snap(x0), dtype=np.int64)
    X = np.empty((n, T - t0 + 1))
    Uv = np.empty((n, T - t0))
    Wv = np.empty((n, T - t0))
    cost = np.zeros(n)
    X[:, 0] = policy.x_grid.points[xi]
    for k, t in enumerate(range(t0, T)):
        st = noise.at(t + 1)
        x = policy.x_grid.points[xi]
        u = policy.u_grid.points[policy.at(t)[xi]]
        w = st.values[atoms[:, k]]
        cost += problem.stage_cost(t, x, u, w)
        xi = snap(policy.x_grid, problem.dynamics(t, x, u, w))
        X[:, k + 1] = policy.x_grid.points[xi]
        Uv[:, k], Wv[:, k] = u, w
    traj = Trajectories(t0, X, Uv, Wv)
    return _report(problem, n, seed, t0, cost, X[:, -1], traj)


def simulate_extended(problem: ProblemDefinition, policy: ExtendedPolicy, x0: float, z0: float,
                      t0: int, n: int, seed: int, noise: NoiseModel) -> SimulationReport:
    if not policy.t0 <= t0 < policy.T:
        raise OutOfHorizon(f"policy covers [{policy.t0}, {policy.T}), cannot start at {t0}")
    if n < 1:
        raise ValueError("need at least one scenario")
    if not policy.z_grid.contains(z0):
        raise ExtdpError(f"z0 = {z0} is not on the z-grid")
    T = policy.T
    voff = v_offsets(policy.v_grid, policy.z_grid)
    atoms = sample_atoms(noise, noise_uniforms(seed, n, noise.T), t0)
    xi = np.full(n, policy.x_grid.snap(x0), dtype=np.int64)
    zi = np.full(n, policy.z_grid.snap(z0), dtype=np.int64)
    X = np.empty((n, T - t0 + 1))
    Z = np.empty((n, T - t0 + 1))
    Uv = np.empty((n, T - t0))
    Wv = np.empty((n, T - t0))
    Vv = np.empty((n, T - t0))
    cost = np.zeros(n)
    X[:, 0], Z[:, 0] = policy.x_grid.points[xi], policy.z_grid.points[zi]
    for k, t in enumerate(range(t0, T)):
        st = noise.at(t + 1)
        U, VP = policy.at(t)
        q = VP[xi, zi, atoms[:, k]]
        if np.any(q == NO_ACTION):
            if k == 0:
                raise Infeasible(f"no feasible policy from (x, z) = ({x0}, {z0}) at stage {t}")
            raise Infeasible(f"scenario reached an (x, z) cell without an action at stage {t}")
        x = policy.x_grid.points[xi]
        u = policy.u_grid.points[U[xi, zi]]
        w = st.values[atoms[:, k]]
        cost += problem.stage_cost(t, x, u, w)
        xi = snap(policy.x_grid, problem.dynamics(t, x, u, w))
        zi = zi + voff[q]
        # z moves by whole grid steps; leaving the grid would be a solver bug
        if np.any(zi < 0) or np.any(zi >= policy.z_grid.n):
            raise ExtdpError("z left its grid during simulation")
        X[:, k + 1], Z[:, k + 1] = policy.x_grid.points[xi], policy.z_grid.points[zi]
        Uv[:, k], Wv[:, k], Vv[:, k] = u, w, policy.v_grid.points[q]
    traj = Trajectories(t0, X, Uv, Wv, Z, Vv)
    return _report(problem, n, seed, t0, cost, X[:, -1], traj, Z[:, -1], Vv)


@dataclass(frozen=True)
class PolicyEvaluation:
    """Exact cost-to-go, ``E[g(x_T)]`` and event probability of a fixed policy.

    Arrays are indexed ``[t - t0, x]`` (classic) or ``[t - t0, x, z]``
    (extended); ``constraint`` has a trailing axis of length m.
    """

    t0: int
    cost: np.ndarray
    constraint: np.ndarray
    probability: np.ndarray | None


def evaluate_policy_tables(problem: ProblemDefinition, policy, noise: NoiseModel) -> PolicyEvaluation:
    """Backward evaluation of a policy from every grid start at once."""
    x_grid = policy.x_grid
    ext = isinstance(policy, ExtendedPolicy)
    K = np.broadcast_to(np.asarray(problem.terminal_cost(x_grid.points), dtype=float), (x_grid.n,))
    G = problem.g(x_grid.points)
    ev = problem.terminal_event
    P = None if ev is None else np.asarray(ev(x_grid.points), dtype=float)
    if ext:
        nz = policy.z_grid.n
        voff = v_offsets(policy.v_grid, policy.z_grid)
        J = np.repeat(K[:, None], nz, axis=1)
        G = np.repeat(G[:, None, :], nz, axis=1)
        if P is not None:
            P = np.repeat(P[:, None], nz, axis=1)
    else:
        J = K.copy()
    n = policy.T - policy.t0
    costs, cons, probs = [J], [G], [P]
    for k in range(n - 1, -1, -1):
        t = policy.t0 + k
        st = noise.at(t + 1)
        nxt = next_state_indices(problem, t, x_grid, policy.u_grid, st)
        L = expected_stage_cost(problem, t, x_grid, policy.u_grid, st)
        if ext:
            U, VP = policy.at(t)
            xi = np.arange(x_grid.n)[:, None]
            xn = nxt[xi, U]                                    # (nx, nz, na)
            zn = np.arange(nz)[None, :, None] + voff[np.maximum(VP, 0)]
            zn = np.clip(zn, 0, nz - 1)
            dead = np.any(VP < 0, axis=-1)
            Lx = L[xi, U] @ st.probs
            J = np.where(dead, np.inf, Lx + J[xn, zn] @ st.probs)
            G = np.einsum("xzjm,j->xzm", G[xn, zn], st.probs)
            G[dead] = np.nan
            if P is not None:
                P = np.where(dead, np.nan, P[xn, zn] @ st.probs)
        else:
            phi = policy.at(t)
            xi = np.arange(x_grid.n)
            xn = nxt[xi, phi]                                  # (nx, na)
            J = (L[xi, phi] + J[xn]) @ st.probs
            G = np.einsum("xjm,j->xm", G[xn], st.probs)
            if P is not None:
                P = P[xn] @ st.probs
        costs.append(J)
        cons.append(G)
        probs.append(P)
    costs.reverse()
    cons.reverse()
    probs.reverse()
    return PolicyEvaluation(policy.t0, np.array(costs), np.array(cons),
                            None if P is None else np.array(probs))
