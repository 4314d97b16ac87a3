from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from extdp import BudgetExceeded, Infeasible, NoiseModel, NoiseStage, ProblemDefinition, TimeHorizon
from extdp import enumerate_tree, make_uniform_grid
from extdp.oracle import (
    _leaf_g_of,
    construct_martingale_controls,
    oracle_solve_expectation_constrained,
    oracle_solve_extended,
    oracle_solve_unconstrained,
)

from helpers import SHAPES, feasible_level, parity_problem, random_tiny, table_problem

BIN = make_uniform_grid(0, 1, 1)
COIN = NoiseStage.uniform([0.0, 1.0])


def leaf_probs(tree):
    return np.array([tree.nodes[i].prob for i in tree.levels[-1]])


class TestUnconstrained:
    def test_zero_costs(self):
        p = ProblemDefinition(TimeHorizon(0, 2), lambda t, x, u, w: np.mod(x + u + w, 2),
                              lambda t, x, u, w: 0.0 * x, lambda x: 0.0 * x)
        value, _ = oracle_solve_unconstrained(p, 0.0, 0, enumerate_tree(NoiseModel.iid(COIN, 2), 0, 2), BIN)
        assert value == 0.0

    def test_deterministic_tree(self):
        # one atom: the oracle is a shortest path over two stages
        p = ProblemDefinition(TimeHorizon(0, 2), lambda t, x, u, w: np.clip(x + u, 0, 3),
                              lambda t, x, u, w: 1.0 * u, lambda x: 5.0 * (3.0 - x))
        tree = enumerate_tree(NoiseModel.iid(NoiseStage.uniform([0.0]), 2), 0, 2)
        value, ctrl = oracle_solve_unconstrained(p, 0.0, 0, tree, make_uniform_grid(0, 2, 1))
        assert value == 3.0 and len(ctrl) == 2

    def test_parity_instance(self):
        tree = enumerate_tree(NoiseModel.iid(COIN, 2), 0, 2)
        value, ctrl = oracle_solve_unconstrained(parity_problem(), 0.0, 0, tree, BIN)
        assert value == 0.5
        assert ctrl[0] == 0.0

    def test_budget(self):
        tree = enumerate_tree(NoiseModel.iid(COIN, 3), 0, 3)
        with pytest.raises(BudgetExceeded):
            oracle_solve_unconstrained(parity_problem(3), 0.0, 0, tree, BIN, budget=5)

    def test_tree_budget(self):
        with pytest.raises(BudgetExceeded):
            enumerate_tree(NoiseModel.iid(COIN, 12), 0, 12, budget=100)


class TestExpectationConstrained:
    @pytest.mark.parametrize("seed", range(6))
    def test_huge_level_is_unconstrained(self, seed):
        inst = random_tiny(np.random.default_rng(seed), 2, (0.5, 0.5))
        free, _ = oracle_solve_unconstrained(inst.problem, inst.x0, 0, inst.tree(), inst.u_grid)
        best, _ = oracle_solve_expectation_constrained(inst.problem, inst.x0, 0, 1e6, inst.tree(), inst.u_grid)
        assert best == free

    def test_unreachable_level(self):
        inst = random_tiny(np.random.default_rng(0), 2, (0.5, 0.5))
        with pytest.raises(Infeasible):
            oracle_solve_expectation_constrained(inst.problem, inst.x0, 0, -2.0, inst.tree(), inst.u_grid)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(SHAPES))
    def test_plan_meets_level(self, seed, shape):
        rng = np.random.default_rng(seed)
        inst = random_tiny(rng, *shape)
        b = feasible_level(inst, rng)
        tree = inst.tree()
        _, ctrl = oracle_solve_expectation_constrained(inst.problem, inst.x0, 0, b, tree, inst.u_grid)
        g = _leaf_g_of(inst.problem, tree, inst.x0, ctrl)[:, 0]
        assert leaf_probs(tree) @ g <= b + 1e-9


class TestConstruction:
    def test_deterministic_tree_gives_zero_increments(self):
        tree = enumerate_tree(NoiseModel.iid(NoiseStage.uniform([0.0]), 3), 0, 3)
        mc = construct_martingale_controls(tree, [0.7], 0.7)
        assert np.all(mc.v == 0.0) and np.all(mc.z == 0.7)

    def test_one_stage_coin(self):
        tree = enumerate_tree(NoiseModel.iid(COIN, 1), 0, 1)
        mc = construct_martingale_controls(tree, [0.0, 1.0], 0.5)
        assert list(mc.v[1:, 0]) == [-0.5, 0.5]
        assert mc.exact["v"][1] == [Fraction(-1, 2)]

    @settings(max_examples=40)
    @given(st.sampled_from(SHAPES), st.data())
    def test_exact_telescope_and_zero_mean(self, shape, data):
        T, probs = shape
        tree = enumerate_tree(NoiseModel.iid(NoiseStage(np.arange(len(probs), dtype=float), np.array(probs)), T),
                              0, T)
        g = data.draw(st.lists(st.integers(-8, 8), min_size=len(tree.levels[-1]),
                               max_size=len(tree.levels[-1])))
        g = np.array(g) / 4.0
        z0 = data.draw(st.integers(-8, 8)) / 4.0
        mc = construct_martingale_controls(tree, g, z0)
        assert mc.exact is not None
        v, z, cond = mc.exact["v"], mc.exact["z"], mc.exact["cond"]
        for k, nid in enumerate(tree.levels[-1]):
            assert Fraction(g[k]) - z[nid][0] == cond[0][0] - Fraction(z0)
        for node_id, node in enumerate(tree.nodes):
            if node.children:
                pn = Fraction(node.prob).limit_denominator(10**9)
                assert sum(Fraction(tree.nodes[c].prob).limit_denominator(10**9) / pn * v[c][0]
                           for c in node.children) == 0

    def test_leaf_count_checked(self):
        tree = enumerate_tree(NoiseModel.iid(COIN, 2), 0, 2)
        with pytest.raises(ValueError):
            construct_martingale_controls(tree, [0.0, 1.0], 0.0)


class TestExtendedOracle:
    @pytest.mark.parametrize("seed", range(5))
    def test_slack_constraint_is_unconstrained(self, seed):
        rng = np.random.default_rng(seed)
        F = rng.integers(0, 4, size=(2, 4, 3, 2))
        C = rng.integers(0, 7, size=(2, 4, 3, 2)) / 2.0
        K = rng.integers(0, 7, size=4) / 2.0
        p = table_problem(F, C, K, np.zeros(4))
        tree = enumerate_tree(NoiseModel.iid(NoiseStage.uniform([0.0, 1.0]), 2), 0, 2)
        ug = make_uniform_grid(0, 2, 1)
        free, _ = oracle_solve_unconstrained(p, 0.0, 0, tree, ug)
        value, plan = oracle_solve_extended(p, 0.0, 0.0, 0, tree, ug)
        assert value == free
        assert all(v == 0.0 for _, vs in plan.values() for v in vs.values())

    def test_single_atom_forces_zero_increment(self):
        inst = random_tiny(np.random.default_rng(2), 3, (1.0,))
        b = 0.0
        value, plan = oracle_solve_extended(inst.problem, inst.x0, b, 0, inst.tree(), inst.u_grid,
                                            {c: [-0.5, 0.0, 0.5] for c in range(1, 4)})
        assert all(v == 0.0 for _, vs in plan.values() for v in vs.values())
        assert np.isfinite(value)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(SHAPES))
    def test_sandwich_and_feasibility_transfer(self, seed, shape):
        rng = np.random.default_rng(seed)
        inst = random_tiny(rng, *shape)
        b = feasible_level(inst, rng)
        tree = inst.tree()
        free, _ = oracle_solve_unconstrained(inst.problem, inst.x0, 0, tree, inst.u_grid)
        value, plan = oracle_solve_extended(inst.problem, inst.x0, b, 0, tree, inst.u_grid)
        assert value >= free - 1e-9
        # the u part of any extended-feasible plan meets the expectation constraint
        ctrl = {nid: u for nid, (u, _) in plan.items()}
        g = _leaf_g_of(inst.problem, tree, inst.x0, ctrl)[:, 0]
        assert leaf_probs(tree) @ g <= b + 1e-9
