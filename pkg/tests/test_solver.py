import inspect

import numpy as np
import pytest

from conftest import grid_simplex_2, random_units
from dr_ensemble.core import InvalidArgumentError, kl_divergence, validate_stochastic
from dr_ensemble.oracle import (
    OracleFailure,
    StageObjective,
    local_objective,
    oracle_backward,
    oracle_minimize,
    oracle_unit_table,
    posterior_objective,
    prior_objective,
    trivial_objective,
)
from dr_ensemble.solver import (
    StageCosts,
    UnitProfile,
    ValueTable,
    backward_recursion_consensus,
    check_policy_stack,
    evaluate_policy_stack,
    evaluate_value,
    local_policy_stack,
    local_stage_solve,
    policy_rows_for,
    prior_aggregates,
    realized_ensemble_cost,
    solve_myopic_posterior,
    solve_myopic_prior,
    solve_trivial,
    unit_stage_cost,
    unit_value_table,
)

# two-state rows shared by several hand examples
ROW_A = [0.8, 0.2]
ROW_B = [0.4, 0.6]


def grid_row_min(terms, n=400_001):
    """Brute-force minimizer of sum_t w (p.c + gamma KL(p || pbar)) over a 2-state row."""
    grid = grid_simplex_2(n)[1:-1]
    logp = np.log(grid)
    total = np.zeros(len(grid))
    for w, gamma, pbar, c in terms:
        total += w * (grid @ np.asarray(c, float) + gamma * np.sum(grid * (logp - np.log(pbar)), axis=1))
    k = int(np.argmin(total))
    return grid[k], total[k]


def pair_units(gammas=(1.0, 3.0), other_rows=([0.5, 0.5], [0.5, 0.5])):
    a = UnitProfile(0, [[ROW_A, other_rows[0]]], [[gammas[0], 1.0]])
    b = UnitProfile(1, [[ROW_B, other_rows[1]]], [[gammas[1], 1.0]])
    return [a, b]


class TestUnitProfile:
    def test_rejects_boundary_default(self):
        with pytest.raises(InvalidArgumentError):
            UnitProfile(0, [[[1.0, 0.0], [0.5, 0.5]]], [[1.0, 1.0]])

    def test_rejects_nonpositive_gamma(self):
        with pytest.raises(InvalidArgumentError):
            UnitProfile.stationary(0, np.full((2, 2), 0.5), [1.0, 0.0], 1)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            UnitProfile(0, np.full((2, 2, 2), 0.5), np.ones((3, 2)))

    def test_stage_costs_need_two_stages(self):
        with pytest.raises(InvalidArgumentError):
            StageCosts([[0.0, 1.0]])


class TestUnitStageCost:
    def test_default_row_costs_nothing(self, uniform_unit):
        assert unit_stage_cost(uniform_unit, 0, 0, [0.5, 0.5], [0.0, 0.0]) == 0.0

    def test_hand_value(self):
        unit = UnitProfile.stationary(0, np.full((2, 2), 0.5), 2.0, 1)
        assert unit_stage_cost(unit, 0, 0, [0.75, 0.25], [1.0, 1.0]) == pytest.approx(1.261624, abs=1e-6)

    def test_deterministic_row_limit(self, uniform_unit):
        assert unit_stage_cost(uniform_unit, 0, 1, [1.0, 0.0], [0.0, 0.0]) == pytest.approx(np.log(2), abs=1e-12)


class TestAggregates:
    def test_single_unit(self, uniform_unit):
        agg = prior_aggregates([uniform_unit])
        np.testing.assert_allclose(agg.gamma_bar, [1.0, 1.0])
        np.testing.assert_allclose(agg.mu_bar[0], np.log([0.5, 0.5]))

    def test_hand_pair(self):
        agg = prior_aggregates(pair_units())
        assert agg.gamma_bar[0] == pytest.approx(2.0)
        np.testing.assert_allclose(agg.mu_bar[0], [-1.48601, -1.57096], atol=1e-5)

    def test_identical_units_collapse(self, rng):
        (u,) = random_units(rng, 1, 3)
        clones = [UnitProfile(k, u.defaults, u.gamma) for k in range(4)]
        a, b = prior_aggregates([u]), prior_aggregates(clones)
        np.testing.assert_allclose(a.gamma_bar, b.gamma_bar, rtol=1e-14)
        np.testing.assert_allclose(a.mu_bar, b.mu_bar, rtol=1e-14)

    def test_inconsistent_units(self):
        a = UnitProfile.stationary(0, np.full((2, 2), 0.5), 1.0, 1)
        b = UnitProfile.stationary(1, np.full((3, 3), 1 / 3), 1.0, 1)
        with pytest.raises(InvalidArgumentError):
            prior_aggregates([a, b])


class TestMyopicPrior:
    def test_uniform_unit_against_grid(self, uniform_unit):
        P, coeffs = solve_myopic_prior([uniform_unit], [0.0, 1.0])
        row, val = grid_row_min([(1.0, 1.0, [0.5, 0.5], [0.0, 1.0])])
        np.testing.assert_allclose(P[0], row, atol=1e-5)
        np.testing.assert_allclose(coeffs[0], val, atol=1e-8)
        # frozen hand values
        np.testing.assert_allclose(P, [[0.731059, 0.268941]] * 2, atol=1e-6)
        np.testing.assert_allclose(coeffs, [0.379885, 0.379885], atol=1e-6)

    def test_constant_costs_return_weighted_geometric_mean(self, rng):
        units = random_units(rng, 3, 4)
        P, _ = solve_myopic_prior(units, np.full(4, 7.0))
        agg = prior_aggregates(units)
        expected = np.exp(agg.mu_bar / agg.gamma_bar[:, None])
        np.testing.assert_allclose(P, expected / expected.sum(axis=1, keepdims=True), rtol=1e-12)

    def test_single_unit_constant_costs_returns_default(self, rng):
        (u,) = random_units(rng, 1, 4)
        P, _ = solve_myopic_prior([u], np.full(4, -2.0))
        np.testing.assert_allclose(P, u.defaults[0], atol=1e-14)

    def test_heterogeneous_row_against_grid(self):
        P, _ = solve_myopic_prior(pair_units(), [0.0, 0.0])
        row, _ = grid_row_min([(0.5, 1.0, ROW_A, [0, 0]), (0.5, 3.0, ROW_B, [0, 0])])
        np.testing.assert_allclose(P[0], row, atol=1e-5)
        np.testing.assert_allclose(P[0], [0.5106, 0.4894], atol=1e-4)

    def test_value_coeffs_linear_in_x(self, rng):
        units = random_units(rng, 3, 3)
        q = rng.normal(size=3)
        P, coeffs = solve_myopic_prior(units, q)
        x = rng.dirichlet(np.ones(3))
        obj = prior_objective(units, q, x)
        assert obj.value(P) == pytest.approx(x @ coeffs, abs=1e-9)

    def test_shift_invariance(self, rng):
        units = random_units(rng, 4, 3)
        q = rng.normal(size=3)
        P, c = solve_myopic_prior(units, q)
        P2, c2 = solve_myopic_prior(units, q + 5.5)
        np.testing.assert_allclose(P2, P, atol=1e-12)
        np.testing.assert_allclose(c2, c + 5.5, atol=1e-12)

    def test_extreme_costs_stay_finite(self, uniform_unit):
        P, coeffs = solve_myopic_prior([uniform_unit], [0.0, 1e6])
        assert np.all(np.isfinite(P)) and np.all(np.isfinite(coeffs))
        assert validate_stochastic(P).ok


class TestMyopicPosterior:
    def test_shared_state_matches_prior_row(self):
        units = pair_units()
        rows, _ = solve_myopic_posterior(units, [0, 0], [0.0, 0.0])
        P, _ = solve_myopic_prior(units, [0.0, 0.0])
        np.testing.assert_allclose(rows[0], P[0], atol=1e-14)
        np.testing.assert_allclose(rows[0], [0.5106, 0.4894], atol=1e-4)

    def test_split_states_return_defaults(self):
        units = pair_units(other_rows=([0.1, 0.9], [0.3, 0.7]))
        rows, _ = solve_myopic_posterior(units, [0, 1], [2.0, 2.0])
        np.testing.assert_allclose(rows[0], ROW_A, atol=1e-14)
        np.testing.assert_allclose(rows[1], [0.3, 0.7], atol=1e-14)

    def test_cost_matches_realized(self, rng):
        units = random_units(rng, 5, 3)
        joint = [0, 2, 2, 1, 2]
        q = rng.normal(size=3)
        rows, cost = solve_myopic_posterior(units, joint, q)
        assigned = np.stack([rows[i] for i in joint])
        assert realized_ensemble_cost(assigned, joint, q, units) == pytest.approx(cost, abs=1e-12)

    def test_only_occupied_states(self, rng):
        units = random_units(rng, 3, 4)
        rows, _ = solve_myopic_posterior(units, [3, 3, 1], np.zeros(4))
        assert sorted(rows) == [1, 3]

    @pytest.mark.parametrize("joint", [[], [0, 5], [0]])
    def test_bad_joint(self, joint):
        with pytest.raises(InvalidArgumentError):
            solve_myopic_posterior(pair_units(), joint, [0.0, 0.0])


class TestTrivial:
    def test_hand_example_against_grid(self):
        units = [
            UnitProfile(0, [[ROW_A, [0.5, 0.5]]], [[1.0, 1.0]]),
            UnitProfile(1, [[[0.5, 0.5], ROW_B]], [[1.0, 1.0]]),
        ]
        row = solve_trivial(units, [0, 1], [0.0, 0.0])
        expected, _ = grid_row_min([(0.5, 1.0, ROW_A, [0, 0]), (0.5, 1.0, ROW_B, [0, 0])])
        np.testing.assert_allclose(row, expected, atol=1e-5)
        # printed value 0.620203 is off by one in the last digit; exact is 0.6202041
        np.testing.assert_allclose(row, [0.620203, 0.379797], atol=2e-6)

    def test_single_unit_equals_prior_row(self, rng):
        (u,) = random_units(rng, 1, 3)
        q = rng.normal(size=3)
        P, _ = solve_myopic_prior([u], q)
        np.testing.assert_allclose(solve_trivial([u], [2], q), P[2], atol=1e-14)

    def test_identical_units_same_state_equal_posterior(self, rng):
        (u,) = random_units(rng, 1, 3)
        clones = [UnitProfile(k, u.defaults, u.gamma) for k in range(3)]
        q = rng.normal(size=3)
        rows, _ = solve_myopic_posterior(clones, [1, 1, 1], q)
        np.testing.assert_allclose(solve_trivial(clones, [1, 1, 1], q), rows[1], atol=1e-14)


class TestBackwardRecursion:
    def test_hand_recursion(self, uniform_unit, toy_costs):
        stack, table = backward_recursion_consensus([uniform_unit], toy_costs)
        np.testing.assert_allclose(table.v[2], [0.0, 1.0])
        np.testing.assert_allclose(table.v[1], [0.379885, 0.379885], atol=1e-6)
        np.testing.assert_allclose(table.v[0], [0.379885, 0.379885], atol=1e-6)
        np.testing.assert_allclose(stack[1], [[0.731059, 0.268941]] * 2, atol=1e-6)
        np.testing.assert_allclose(stack[0], np.full((2, 2), 0.5), atol=1e-12)

    def test_hand_recursion_against_oracle(self, uniform_unit, toy_costs):
        stack, table = backward_recursion_consensus([uniform_unit], toy_costs)
        ostack, otable = oracle_backward([uniform_unit], toy_costs)
        np.testing.assert_allclose(stack, ostack, atol=1e-6)
        np.testing.assert_allclose(table.v, otable.v, atol=1e-8)

    def test_two_stages_reduce_to_myopic(self, rng):
        units = random_units(rng, 3, 3, stages=1)
        costs = StageCosts(rng.normal(size=(2, 3)))
        stack, table = backward_recursion_consensus(units, costs)
        P, coeffs = solve_myopic_prior(units, costs.q[1])
        np.testing.assert_allclose(stack[0], P, atol=1e-14)
        np.testing.assert_allclose(table.v[0], costs.q[0] + coeffs, atol=1e-12)

    def test_zero_tariff_returns_defaults(self, rng):
        (u,) = random_units(rng, 1, 3, stages=4)
        stack, table = backward_recursion_consensus([u], StageCosts(np.zeros((5, 3))))
        np.testing.assert_allclose(stack, u.defaults, atol=1e-13)
        np.testing.assert_allclose(table.v, 0.0, atol=1e-13)

    def test_signature_admits_no_state(self):
        params = inspect.signature(backward_recursion_consensus).parameters
        assert list(params) == ["units", "costs"]
        assert "x" in inspect.signature(evaluate_value).parameters

    def test_stacks_are_stochastic(self, rng):
        units = random_units(rng, 4, 4, stages=5)
        stack, _ = backward_recursion_consensus(units, StageCosts(rng.normal(size=(6, 4)) * 3))
        assert check_policy_stack(stack)

    def test_value_consistency(self, rng):
        units = random_units(rng, 3, 3, stages=3)
        costs = StageCosts(rng.normal(size=(4, 3)))
        stack, table = backward_recursion_consensus(units, costs)
        N = len(units)
        for stage in range(3):
            obj = StageObjective.from_rows(
                [[(1 / N, u.gamma[stage, i], u.defaults[stage, i], table.v[stage + 1]) for u in units]
                 for i in range(3)]
            )
            np.testing.assert_allclose(costs.q[stage] + obj.row_values(stack[stage]), table.v[stage], atol=1e-9)

    def test_shift_invariance_of_future(self, rng):
        units = random_units(rng, 2, 3, stages=2)
        q = rng.normal(size=(3, 3))
        shifted = q.copy()
        shifted[-1] += 3.0
        s1, t1 = backward_recursion_consensus(units, StageCosts(q))
        s2, t2 = backward_recursion_consensus(units, StageCosts(shifted))
        np.testing.assert_allclose(s2, s1, atol=1e-12)
        np.testing.assert_allclose(t2.v, t1.v + 3.0, atol=1e-12)


class TestUnitValueTable:
    def test_hand_value(self, uniform_unit, toy_costs):
        np.testing.assert_allclose(unit_value_table(uniform_unit, toy_costs).v[1], [0.379885, 0.379885], atol=1e-6)

    def test_single_unit_matches_consensus(self, rng):
        (u,) = random_units(rng, 1, 4, stages=3)
        costs = StageCosts(rng.normal(size=(4, 4)))
        _, table = backward_recursion_consensus([u], costs)
        np.testing.assert_allclose(unit_value_table(u, costs).v, table.v, atol=1e-12)

    def test_against_oracle(self, rng):
        (u,) = random_units(rng, 1, 3, stages=2)
        costs = StageCosts(rng.normal(size=(3, 3)))
        np.testing.assert_allclose(unit_value_table(u, costs).v, oracle_unit_table(u, costs).v, atol=1e-7)

    def test_large_gamma_limit(self, rng):
        d = rng.dirichlet(np.ones(3), size=3)
        u = UnitProfile.stationary(0, d, 1e6, 2)
        costs = StageCosts(rng.normal(size=(3, 3)))
        v = unit_value_table(u, costs).v
        passive = np.empty_like(v)
        passive[-1] = costs.q[-1]
        for stage in (1, 0):
            passive[stage] = costs.q[stage] + d @ passive[stage + 1]
        # first-order correction is var / (2 gamma) ~ 1e-6
        np.testing.assert_allclose(v, passive, atol=1e-5)


class TestLocal:
    def test_homogeneous_equals_global(self, rng):
        (u,) = random_units(rng, 1, 4, stages=4)
        units = [UnitProfile(k, u.defaults, u.gamma) for k in range(5)]
        costs = StageCosts(rng.normal(size=(5, 4)) * 2)
        gstack, _ = backward_recursion_consensus(units, costs)
        lstack, _ = local_policy_stack(units, costs)
        assert np.max(np.abs(gstack - lstack)) <= 1e-9

    def test_single_unit_equals_global(self, rng):
        units = random_units(rng, 1, 3, stages=3)
        costs = StageCosts(rng.normal(size=(4, 3)))
        gstack, _ = backward_recursion_consensus(units, costs)
        lstack, _ = local_policy_stack(units, costs)
        np.testing.assert_allclose(lstack, gstack, atol=1e-12)

    def test_heterogeneous_pair_gap_is_measured(self, hetero_pair, toy_costs):
        gstack, _ = backward_recursion_consensus(hetero_pair, toy_costs)
        lstack, _ = local_policy_stack(hetero_pair, toy_costs)
        # last stage sees only the terminal cost, so both agree there
        np.testing.assert_allclose(lstack[-1], gstack[-1], atol=1e-14)
        gap = np.max(np.abs(gstack - lstack))
        assert np.isfinite(gap)

    def test_stage_solve_against_oracle(self, rng):
        units = random_units(rng, 3, 3, stages=2)
        costs = StageCosts(rng.normal(size=(3, 3)))
        tables = [unit_value_table(u, costs) for u in units]
        # the mean of per-unit next values is what the closed form uses
        obj = local_objective(units, [t.v[1] for t in tables], 0)
        np.testing.assert_allclose(local_stage_solve(tables, units, 0), oracle_minimize(obj), atol=1e-6)

    def test_mismatched_tables(self, hetero_pair, toy_costs):
        tables = [unit_value_table(u, toy_costs) for u in hetero_pair]
        with pytest.raises(InvalidArgumentError):
            local_stage_solve(tables[:1], hetero_pair, 0)
        with pytest.raises(InvalidArgumentError):
            local_stage_solve([tables[0], ValueTable(np.zeros((4, 2)), 1)], hetero_pair, 0)


class TestEvaluate:
    def test_unit_vector_and_midpoint(self):
        table = ValueTable(np.array([[0.379885, 0.379885], [1.0, 3.0]]))
        assert evaluate_value(table, 1, [0, 1]) == 3.0
        assert evaluate_value(table, 0, [0.5, 0.5]) == pytest.approx(0.379885)
        assert evaluate_value(table, 1, [0.25, 0.75]) == pytest.approx(
            0.5 * (evaluate_value(table, 1, [0.5, 0.5]) + evaluate_value(table, 1, [0, 1]))
        )

    def test_bad_stage(self):
        with pytest.raises(InvalidArgumentError):
            evaluate_value(ValueTable(np.zeros((2, 2))), 2, [1, 0])

    def test_policy_evaluation_of_optimum(self, uniform_unit, toy_costs):
        stack, table = backward_recursion_consensus([uniform_unit], toy_costs)
        np.testing.assert_allclose(evaluate_policy_stack(uniform_unit, stack, toy_costs), table.v, atol=1e-12)


class TestRealizedCost:
    def test_defaults_at_zero_cost(self, rng):
        units = random_units(rng, 4, 3)
        joint = [0, 1, 2, 1]
        rows = np.stack([u.defaults[0, i] for u, i in zip(units, joint)])
        assert realized_ensemble_cost(rows, joint, np.zeros(3), units) == pytest.approx(0.0, abs=1e-15)

    def test_wrong_row_count(self, rng):
        units = random_units(rng, 2, 3)
        with pytest.raises(InvalidArgumentError):
            realized_ensemble_cost(np.full((3, 3), 1 / 3), [0, 1], np.zeros(3), units)


def random_myopic_instance(rng):
    S = int(rng.integers(2, 5))
    N = int(rng.integers(1, 6))
    units = random_units(rng, N, S, spread=rng.uniform(0.02, 0.5))
    joint = rng.integers(0, S, size=N)
    q = rng.normal(size=S) * rng.uniform(0.1, 3.0)
    return units, joint, q


class TestOracleEquivalence:
    """Closed forms against the numeric oracle on random small instances."""

    @pytest.mark.parametrize("seed", range(10))
    def test_all_schemes(self, seed):
        rng = np.random.default_rng([7, seed])
        units, joint, q = random_myopic_instance(rng)
        P, _ = solve_myopic_prior(units, q)
        np.testing.assert_allclose(P, oracle_minimize(prior_objective(units, q)), atol=1e-5)
        rows, cost = solve_myopic_posterior(units, joint, q)
        obj, occupied = posterior_objective(units, joint, q)
        expected = oracle_minimize(obj)
        np.testing.assert_allclose(np.stack([rows[i] for i in occupied]), expected, atol=1e-5)
        assert obj.value(expected) == pytest.approx(cost, abs=1e-8)
        tobj = trivial_objective(units, joint, q)
        np.testing.assert_allclose(solve_trivial(units, joint, q), oracle_minimize(tobj)[0], atol=1e-5)

    def test_oracle_restarts_agree(self, rng):
        units, _, q = random_myopic_instance(rng)
        obj = prior_objective(units, q)
        a = oracle_minimize(obj)
        start = rng.dirichlet(np.ones(units[0].S), size=units[0].S)
        np.testing.assert_allclose(oracle_minimize(obj, start=start), a, atol=1e-6)

    def test_oracle_failure_is_raised(self, uniform_unit):
        with pytest.raises(OracleFailure):
            oracle_minimize(prior_objective([uniform_unit], [0.0, 50.0]), tol=1e-14, max_iter=2)


class TestCostOrdering:
    @pytest.mark.parametrize("seed", range(10))
    def test_posterior_prior_trivial(self, seed):
        rng = np.random.default_rng([11, seed])
        units, joint, q = random_myopic_instance(rng)
        _, post = solve_myopic_posterior(units, joint, q)
        P, _ = solve_myopic_prior(units, q)
        prior = realized_ensemble_cost(policy_rows_for(joint, P), joint, q, units)
        row = solve_trivial(units, joint, q)
        trivial = realized_ensemble_cost(np.tile(row, (len(units), 1)), joint, q, units)
        assert post <= prior + 1e-9
        assert post <= trivial + 1e-9


def test_kl_term_matches_core(uniform_unit):
    row = np.array([0.9, 0.1])
    assert unit_stage_cost(uniform_unit, 0, 0, row, [0, 0]) == pytest.approx(kl_divergence(row, [0.5, 0.5]))
