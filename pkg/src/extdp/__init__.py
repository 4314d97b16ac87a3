"""Finite-horizon stochastic control with a final constraint in expectation.

Solvers: classic backward DP, extended-state DP on (x, z) with martingale
controls, and a Lagrangian/Uzawa dual route. Supporting pieces: exact
push-forward and Monte Carlo simulation, a time-consistency auditor,
brute-force tree oracles, and the dam benchmark.
"""

from extdp.core import (
    PLUS_INF,
    BudgetExceeded,
    ConfigInvalid,
    ExtdpError,
    Infeasible,
    NoiseModel,
    NoiseStage,
    NonIntegralRange,
    NotConverged,
    OutOfHorizon,
    OutOfRange,
    ProblemDefinition,
    ScalarGrid,
    ScenarioTree,
    TimeHorizon,
    enumerate_tree,
    make_uniform_grid,
    snap,
    validate_noise_model,
)
from extdp.classic import StatePolicy, ValueTable, bellman_stage_update, solve_classic
from extdp.inner import InnerSolveConfig, inner_v_minimization, lagrangian_bound
from extdp.extended import (
    ExtendedPolicy,
    ExtendedValueTable,
    extended_stage_update,
    solve_extended,
    terminal_extended_value,
)
from extdp.dual import (
    EverettCertificate,
    UzawaConfig,
    UzawaHistory,
    dual_function,
    everett_certificate,
    uzawa_solve,
)
from extdp.simulate import (
    DistributionOverGrid,
    SimulationReport,
    constraint_from_distribution,
    pushforward_distribution,
    pushforward_extended,
    simulate_classic,
    simulate_extended,
)
from extdp.audit import AuditVerdict, audit_restart, sweep_audit, truncate_policy
from extdp.dam import DamConfig, DamInstance, build_dam_problem

__version__ = "0.1.0"
