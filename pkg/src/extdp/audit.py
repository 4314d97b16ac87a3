"""Restart experiments probing whether a policy stays optimal over time.

A policy computed at ``t0`` is truncated at a later stage, started from an
interior point and compared with the best one can do when re-solving from
that point at the required constraint level. The dual route re-solves with a
fresh Uzawa loop; the extended route reads the value table, since its
solution covers every (x, z) start.

Verdict rule: the truncated policy is consistent at a restart iff it is
feasible at the required level (achieved ``E[g(x_T)] <= required + tol``) and
its exact value is within the value tolerance of the re-solved value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from extdp.classic import StatePolicy
from extdp.core import NoiseModel, NotConverged, OutOfHorizon, ProblemDefinition, ScalarGrid
from extdp.dual import UzawaConfig, uzawa_solve
from extdp.extended import ExtendedPolicy, ExtendedValueTable
from extdp.simulate import evaluate_policy, evaluate_policy_tables, simulate_classic, simulate_extended


@dataclass(frozen=True)
class AuditTolerances:
    constraint: float = 0.01
    constraint_mc: float = 0.015
    value_rel: float = 0.02


@dataclass(frozen=True)
class SolvedDual:
    problem: ProblemDefinition
    x_grid: ScalarGrid
    u_grid: ScalarGrid
    noise: NoiseModel
    policy: StatePolicy
    uzawa: UzawaConfig = field(default_factory=UzawaConfig)


@dataclass(frozen=True)
class SolvedExtended:
    problem: ProblemDefinition
    noise: NoiseModel
    table: ExtendedValueTable
    policy: ExtendedPolicy


@dataclass(frozen=True)
class AuditVerdict:
    method: str
    stage: int
    x: float
    z: float | None
    required: float
    achieved: float
    achieved_mc: float | None
    probability: float | None
    probability_mc: float | None
    resolved_value: float
    truncated_value: float
    truncated_value_mc: float | None
    consistent: bool
    constraint_gap: float
    value_gap: float
    note: str = ""


def truncate_policy(policy, t: int):
    """Drop the stages before ``t``; later stages are kept unchanged."""
    if not isinstance(policy, (StatePolicy, ExtendedPolicy)):
        raise TypeError("only feedback policies can be truncated")
    if not policy.t0 <= t < policy.T:
        raise OutOfHorizon(f"cannot truncate at {t}: policy covers [{policy.t0}, {policy.T})")
    return policy.truncate(t)


def _judge(achieved, required, trunc, resolved, tol: AuditTolerances, unreachable: bool) -> bool:
    if unreachable:
        # no policy reaches the level from here: nothing to be consistent with
        return True
    feasible = achieved <= required + tol.constraint
    if not math.isfinite(resolved):
        # the re-solve gave no reference value; only feasibility can be judged
        return bool(feasible)
    return bool(feasible and trunc <= resolved + tol.value_rel * abs(resolved))


def _verdict(method, t, x, z, required, achieved, prob, trunc, resolved, tol, mc=None, note="",
             unreachable=False):
    consistent = _judge(achieved, required, trunc, resolved, tol, unreachable)
    if unreachable and note == "":
        note = "required level unreachable from this point"
    if mc is not None:
        ach_mc, prob_mc, val_mc = float(mc.constraint_estimate[0]), mc.probability, mc.mean_cost
    else:
        ach_mc = prob_mc = val_mc = None
    vgap = trunc - resolved if math.isfinite(trunc) and math.isfinite(resolved) else math.nan
    return AuditVerdict(method, t, float(x), None if z is None else float(z), float(required),
                        float(achieved), ach_mc, prob, prob_mc, float(resolved), float(trunc), val_mc,
                        consistent, float(achieved - required), vgap, note)


def _resolve_dual(solved: SolvedDual, t: int, x: float, required: float):
    """Fresh Uzawa from the restart point; retries with diminishing steps if it cycles."""
    problem = solved.problem.restricted(t)
    for cfg in (solved.uzawa, replace(solved.uzawa, schedule="sqrt", max_iter=max(solved.uzawa.max_iter, 100))):
        try:
            return uzawa_solve(problem, solved.x_grid, solved.u_grid, solved.noise, required, x, cfg), ""
        except NotConverged as err:
            last = err.result
    return last, "re-solve did not converge"


def audit_restart(method: str, solved, restart: tuple, required: float | None = None,
                  tol: AuditTolerances | None = None, n: int = 0, seed: int = 0) -> AuditVerdict:
    """Judge the truncated policy from one restart point.

    ``restart`` is ``(t, x)`` for the dual method and ``(t, x, z)`` for the
    extended one. ``required`` is the level on the constraint scale (``b``);
    for the extended method it defaults to ``z``. ``n > 0`` adds Monte Carlo
    estimates (reported, not used in the verdict).
    """
    tol = AuditTolerances() if tol is None else tol
    if method == "dual":
        t, x = restart[0], restart[1]
        if required is None:
            raise ValueError("the dual audit needs a required level")
        pol = truncate_policy(solved.policy, t)
        trunc, ach, prob, _ = evaluate_policy(solved.problem, pol, x, t, solved.noise)
        res, note = _resolve_dual(solved, t, x, required)
        if res.certificate.member:
            resolved, _, _, _ = evaluate_policy(solved.problem, res.policy, x, t, solved.noise)
        else:
            resolved = math.nan
            note = note or "re-solve found no dual policy at the required level"
        mc = simulate_classic(solved.problem, pol, x, t, n, seed, solved.noise) if n > 0 else None
        return _verdict("dual", t, x, None, required, float(ach[0]), prob, trunc, resolved, tol, mc, note)
    if method == "extended":
        t, x, z = restart
        required = z if required is None else required
        pol = truncate_policy(solved.policy, t)
        resolved = solved.table.value(t, x, z)
        if not math.isfinite(resolved):
            return _verdict("extended", t, x, z, required, math.nan, None, math.inf, math.inf, tol,
                            unreachable=True)
        trunc, ach, prob, _ = evaluate_policy(solved.problem, pol, x, t, solved.noise, z0=z)
        mc = simulate_extended(solved.problem, pol, x, z, t, n, seed, solved.noise) if n > 0 else None
        return _verdict("extended", t, x, z, required, float(ach[0]), prob, trunc, resolved, tol, mc)
    raise ValueError(f"unknown audit method {method!r}")


def sweep_audit(method: str, solved, t: int, xs, zs_or_levels, tol: AuditTolerances | None = None,
                n: int = 0, seed: int = 0) -> list[AuditVerdict]:
    """One verdict per restart point of the product ``xs x zs_or_levels``.

    For the extended method the second set lists z values (each its own
    level) and every start is judged from one backward policy evaluation.
    For the dual method it lists required levels ``b``.
    """
    tol = AuditTolerances() if tol is None else tol
    xs, second = list(xs), list(zs_or_levels)
    if not xs or not second:
        return []
    if method == "dual":
        return [audit_restart("dual", solved, (t, x), b, tol, n, seed) for x in xs for b in second]
    if method != "extended":
        raise ValueError(f"unknown audit method {method!r}")
    pol = truncate_policy(solved.policy, t)
    ev = evaluate_policy_tables(solved.problem, pol, solved.noise)
    out = []
    for x in xs:
        i = pol.x_grid.snap(x)
        for z in second:
            k = pol.z_grid.snap(z)
            resolved = float(solved.table.at(t)[i, k])
            if not math.isfinite(resolved):
                out.append(_verdict("extended", t, x, z, z, math.nan, None, math.inf, math.inf, tol,
                                    unreachable=True))
                continue
            prob = None if ev.probability is None else float(ev.probability[0, i, k])
            v = _verdict("extended", t, x, z, z, float(ev.constraint[0, i, k, 0]), prob,
                         float(ev.cost[0, i, k]), resolved, tol)
            if n > 0:
                mc = simulate_extended(solved.problem, pol, x, z, t, n, seed, solved.noise)
                v = replace(v, achieved_mc=float(mc.constraint_estimate[0]), probability_mc=mc.probability,
                            truncated_value_mc=mc.mean_cost)
            out.append(v)
    return out


def summarize(verdicts: list[AuditVerdict]) -> dict:
    n_ok = sum(v.consistent for v in verdicts)
    return {"count": len(verdicts), "consistent": n_ok, "inconsistent": len(verdicts) - n_ok}
