import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from extdp import (
    NoiseModel,
    NoiseStage,
    ProblemDefinition,
    TimeHorizon,
    bellman_stage_update,
    enumerate_tree,
    make_uniform_grid,
    solve_classic,
)
from extdp.dam import DamConfig, build_dam_problem
from extdp.oracle import oracle_solve_unconstrained

from helpers import SHAPES, parity_problem, random_tiny

DYADIC = [s for s in SHAPES if all((1 / p).is_integer() and int(1 / p) & (int(1 / p) - 1) == 0 for p in s[1])]


BIN = make_uniform_grid(0, 1, 1)
COIN = NoiseStage.uniform([0.0, 1.0])


class TestStageUpdate:
    def test_zero_fixed_point(self):
        p = ProblemDefinition(TimeHorizon(0, 1), lambda t, x, u, w: x, lambda t, x, u, w: 0.0 * x * u * w,
                              lambda x: 0.0 * x)
        xg, ug = make_uniform_grid(0, 3, 1), make_uniform_grid(0, 2, 1)
        V, phi = bellman_stage_update(np.zeros(xg.n), 0, p, xg, ug, NoiseStage.uniform([0.0, 1.0]))
        assert np.array_equal(V, np.zeros(4)) and np.array_equal(phi, np.zeros(4, dtype=int))

    def test_single_atom_is_deterministic_dp(self):
        xg, ug = make_uniform_grid(0, 4, 1), make_uniform_grid(0, 2, 1)
        K = np.array([3.0, 0.0, 2.0, 5.0, 1.0])
        p = ProblemDefinition(TimeHorizon(0, 1), lambda t, x, u, w: np.clip(x - u + w, 0, 4),
                              lambda t, x, u, w: 0.5 * u + 0.0 * x * w, lambda x: K[np.rint(x).astype(int)])
        V, phi = bellman_stage_update(K, 0, p, xg, ug, NoiseStage.uniform([1.0]))
        for i, x in enumerate(xg.points):
            costs = [0.5 * u + K[int(np.clip(x - u + 1, 0, 4))] for u in ug.points]
            assert V[i] == min(costs) and phi[i] == int(np.argmin(costs))

    def test_hand_instance(self):
        problem = parity_problem()
        table, policy = solve_classic(problem, BIN, BIN, NoiseModel.iid(COIN, 2))
        assert np.allclose(table.at(1), [0.5, 0.5])
        assert np.allclose(table.at(2), [0.0, 1.0])
        tree_value, _ = oracle_solve_unconstrained(problem, 0.0, 0, _tree(2), BIN)
        assert abs(table.value(0, 0.0) - tree_value) <= 1e-9
        # u = 0 is optimal everywhere, and the smallest index wins ties
        assert np.array_equal(policy.u_index, np.zeros((2, 2), dtype=int))

    def test_infinity_propagates(self):
        xg = make_uniform_grid(0, 1, 1)
        p = ProblemDefinition(TimeHorizon(0, 1), lambda t, x, u, w: np.mod(x + w, 2.0),
                              lambda t, x, u, w: 0.0 * x * u * w, lambda x: 0.0 * x)
        V, _ = bellman_stage_update(np.array([0.0, np.inf]), 0, p, xg, BIN, COIN)
        assert np.all(V == np.inf)


def _tree(T):
    return enumerate_tree(NoiseModel.iid(COIN, T), 0, T)


class TestSolveClassic:
    def test_zero_costs(self):
        p = ProblemDefinition(TimeHorizon(0, 3), lambda t, x, u, w: np.clip(x + w - u, 0, 3),
                              lambda t, x, u, w: 0.0 * x * u * w, lambda x: 0.0 * x)
        table, _ = solve_classic(p, make_uniform_grid(0, 3, 1), BIN, NoiseModel.iid(COIN, 3))
        assert np.all(table.values == 0.0)

    def test_tables_and_shapes(self):
        problem = parity_problem(3)
        table, policy = solve_classic(problem, BIN, BIN, NoiseModel.iid(COIN, 3))
        assert table.values.shape == (4, 2) and policy.u_index.shape == (3, 2)
        assert np.array_equal(table.at(3), problem.terminal_cost(BIN.points))
        assert table.value(2, 1.0) == 0.5

    def test_dualized_dam_value(self, dam):
        lam = 62.405
        g = lambda x: dam.problem.g(x)[..., 0]
        table, _ = solve_classic(dam.problem, dam.x_grid, dam.u_grid, dam.noise,
                                 terminal=lambda x: lam * (g(x) - dam.b))
        assert abs(table.value(0, 10.0) - (-188.90)) <= 0.015 * 188.90

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(SHAPES))
    def test_oracle_equivalence(self, seed, shape):
        inst = random_tiny(np.random.default_rng(seed), *shape)
        table, _ = solve_classic(inst.problem, inst.x_grid, inst.u_grid, inst.noise)
        value, _ = oracle_solve_unconstrained(inst.problem, inst.x0, 0, inst.tree(), inst.u_grid)
        assert abs(table.value(0, inst.x0) - value) <= 1e-9

    def test_lower_bound(self):
        rng = np.random.default_rng(3)
        inst = random_tiny(rng, 3, (0.5, 0.5))
        table, _ = solve_classic(inst.problem, inst.x_grid, inst.u_grid, inst.noise)
        # stage costs and final costs are nonnegative in the generator
        assert np.all(table.values >= 0.0)


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(SHAPES), st.lists(st.floats(0, 3), min_size=4, max_size=4))
    def test_monotone_in_terminal(self, seed, shape, bump):
        inst = random_tiny(np.random.default_rng(seed), *shape)
        K = inst.problem.terminal_cost
        a, _ = solve_classic(inst.problem, inst.x_grid, inst.u_grid, inst.noise)
        b, _ = solve_classic(inst.problem, inst.x_grid, inst.u_grid, inst.noise,
                             terminal=lambda x: K(x) + np.asarray(bump)[np.rint(x).astype(int)])
        assert np.all(a.values <= b.values + 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(DYADIC), st.integers(-50, 50))
    def test_shift_equivariance(self, seed, shape, c):
        inst = random_tiny(np.random.default_rng(seed), *shape)
        K = inst.problem.terminal_cost
        a, pa = solve_classic(inst.problem, inst.x_grid, inst.u_grid, inst.noise)
        b, pb = solve_classic(inst.problem, inst.x_grid, inst.u_grid, inst.noise, terminal=lambda x: K(x) + c)
        assert np.array_equal(b.values, a.values + c)
        assert np.array_equal(pa.u_index, pb.u_index)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([s for s in SHAPES if s[0] > 1]), st.data())
    def test_truncation_identity(self, seed, shape, data):
        inst = random_tiny(np.random.default_rng(seed), *shape)
        t = data.draw(st.integers(1, inst.T - 1))
        full, pf = solve_classic(inst.problem, inst.x_grid, inst.u_grid, inst.noise)
        part, pp = solve_classic(inst.problem.restricted(t), inst.x_grid, inst.u_grid, inst.noise)
        assert np.max(np.abs(part.values - full.values[t:])) <= 1e-12
        assert np.array_equal(pp.u_index, pf.u_index[t:])

    def test_truncation_identity_dam(self):
        inst = build_dam_problem(DamConfig(T=4, prices=(10, 8, 6, 4)))
        full, _ = solve_classic(inst.problem, inst.x_grid, inst.u_grid, inst.noise)
        part, _ = solve_classic(inst.problem.restricted(2), inst.x_grid, inst.u_grid, inst.noise)
        assert np.max(np.abs(part.values - full.values[2:])) <= 1e-12

    def test_policy_truncate(self):
        _, policy = solve_classic(parity_problem(3), BIN, BIN, NoiseModel.iid(COIN, 3))
        assert np.array_equal(policy.truncate(0).u_index, policy.u_index)
        last = policy.truncate(2)
        assert last.t0 == 2 and np.array_equal(last.u_index, policy.u_index[2:])
        with pytest.raises(ValueError):
            policy.truncate(3)
