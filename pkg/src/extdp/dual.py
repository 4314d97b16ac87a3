"""Lagrangian relaxation of the final constraint and its Uzawa ascent.

For a multiplier ``lam >= 0`` the constraint ``E[g(x_T)] <= b`` is moved into
the terminal cost, ``K + lam . g``, and the classic DP gives the dual value
``phi(lam) = V_t0(x0) - lam . b``. The gradient of ``phi`` is the achieved
``E[g(x_T)] - b`` under the minimizing policy, evaluated by exact push-forward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from extdp.classic import StatePolicy, ValueTable, solve_classic
from extdp.core import ConfigInvalid, NoiseModel, NotConverged, ProblemDefinition, ScalarGrid
from extdp.simulate import DistributionOverGrid, constraint_from_distribution, pushforward_distribution

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "sqrt")


@dataclass(frozen=True)
class UzawaConfig:
    """Projected-gradient settings; ``schedule='sqrt'`` uses ``rho / sqrt(k + 1)``."""

    rho: float = 50.0
    tol: float = 0.005
    max_iter: int = 50
    lambda0: tuple[float, ...] = (0.0,)
    schedule: str = "constant"
    cert_tol: float = 0.01

    def __post_init__(self):
        problems = []
        if not self.rho > 0:
            problems.append("rho must be positive")
        if self.tol < 0:
            problems.append("tol must be >= 0")
        if self.max_iter < 1:
            problems.append("max_iter must be >= 1")
        if any(l < 0 for l in self.lambda0):
            problems.append("lambda0 must be nonnegative")
        if self.schedule not in SCHEDULES:
            problems.append(f"unknown step schedule {self.schedule!r}")
        if problems:
            raise ConfigInvalid(problems)

    def step(self, k: int) -> float:
        return self.rho if self.schedule == "constant" else self.rho / np.sqrt(k + 1)


@dataclass(frozen=True)
class UzawaRecord:
    k: int
    lam: np.ndarray
    dual_value: float
    constraint: np.ndarray
    gradient: np.ndarray


@dataclass
class UzawaHistory:
    records: list[UzawaRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([r.lam for r in self.records])


@dataclass(frozen=True)
class EverettCertificate:
    lam: np.ndarray
    bbar: np.ndarray
    b: np.ndarray
    tol: float
    member: bool
    slack: np.ndarray


@dataclass(frozen=True)
class DualEvaluation:
    value: float
    policy: StatePolicy
    bbar: np.ndarray
    table: ValueTable
    probability: float | None


@dataclass(frozen=True)
class UzawaResult:
    lambda_star: np.ndarray
    policy: StatePolicy
    history: UzawaHistory
    certificate: EverettCertificate
    evaluation: DualEvaluation
    converged: bool


def _vec(a, m: int) -> np.ndarray:
    out = np.atleast_1d(np.asarray(a, dtype=float))
    if out.size == 1 and m > 1:
        out = np.full(m, float(out[0]))
    if out.shape != (m,):
        raise ValueError(f"expected a vector of length {m}")
    return out


def dual_function(lam, problem: ProblemDefinition, x_grid: ScalarGrid, u_grid: ScalarGrid,
                  noise: NoiseModel, b, x0: float) -> DualEvaluation:
    """``phi(lam)`` at ``x0`` (stage ``problem.t0``), its policy and achieved ``E[g(x_T)]``."""
    lam = _vec(lam, problem.m)
    b = _vec(b, problem.m)
    if np.any(lam < 0):
        raise ValueError("multiplier must be nonnegative")

    def terminal(x):
        K = np.broadcast_to(np.asarray(problem.terminal_cost(x), dtype=float), np.shape(x))
        return K + problem.g(x) @ lam

    table, policy = solve_classic(problem, x_grid, u_grid, noise, terminal=terminal)
    value = table.value(problem.t0, x0) - float(lam @ b)
    init = DistributionOverGrid.dirac(problem.t0, x_grid, x0)
    dist = pushforward_distribution(problem, policy, init, problem.t0, problem.T, noise)
    bbar = constraint_from_distribution(dist, problem.g)
    prob = None
    if problem.terminal_event is not None:
        prob = float(dist.probs @ problem.terminal_event(x_grid.points))
    return DualEvaluation(value, policy, bbar, table, prob)


def everett_certificate(lam, bbar, b, tol: float = 0.01) -> EverettCertificate:
    """Membership of ``b`` in the set of levels for which the dual policy is optimal."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    bbar = np.atleast_1d(np.asarray(bbar, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if np.any(lam < 0):
        raise ValueError("multiplier must be nonnegative")
    slack = b - bbar
    active = lam > 0
    ok = np.where(active, np.abs(slack) <= tol, slack >= -tol)
    return EverettCertificate(lam, bbar, b, tol, bool(np.all(ok)), slack)


def _projected(grad: np.ndarray, lam: np.ndarray) -> np.ndarray:
    return np.where((lam <= 0) & (grad < 0), 0.0, grad)


def uzawa_solve(problem: ProblemDefinition, x_grid: ScalarGrid, u_grid: ScalarGrid,
                noise: NoiseModel, b, x0: float, cfg: UzawaConfig | None = None) -> UzawaResult:
    """Projected gradient ascent ``lam <- max(0, lam + rho (E[g(x_T)] - b))``.

    Stops once the projected gradient is within ``cfg.tol``; raises
    :class:`NotConverged` (carrying the history and the last iterate as
    ``.result``) after ``cfg.max_iter`` evaluations otherwise.
    """
    cfg = UzawaConfig() if cfg is None else cfg
    m = problem.m
    if not np.all(np.isfinite(problem.g(x_grid.points))):
        # the dual route needs a bounded constraint function
        raise ConfigInvalid(["constraint function is not finite on the state grid"])
    b = _vec(b, m)
    lam = _vec(cfg.lambda0, m)
    history = UzawaHistory()
    for k in range(cfg.max_iter):
        ev = dual_function(lam, problem, x_grid, u_grid, noise, b, x0)
        grad = ev.bbar - b
        history.records.append(UzawaRecord(k, lam.copy(), ev.value, ev.bbar.copy(), grad.copy()))
        log.info("uzawa k=%d lambda=%s phi=%.6g grad=%s", k, lam, ev.value, grad)
        done = np.max(np.abs(_projected(grad, lam))) <= cfg.tol
        if done:
            break
        if k == cfg.max_iter - 1:
            break
        lam = np.maximum(0.0, lam + cfg.step(k) * grad)
    cert = everett_certificate(lam, ev.bbar, b, cfg.cert_tol)
    result = UzawaResult(lam, ev.policy, history, cert, ev, bool(done))
    if not done:
        err = NotConverged(f"Uzawa stopped after {cfg.max_iter} iterations, gradient {grad}", history)
        err.result = result
        raise err
    return result
