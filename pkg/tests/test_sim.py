import numpy as np
import pytest

from pinnpi.improve import PolicyHandle
from pinnpi.oracle import solve_riccati_discounted
from pinnpi.problems import make_constant_cost, make_lqr
from pinnpi.sim import (IterationTrace, estimate_value_mc,
                        fit_convergence_rate, monotonicity_report, rollout)
from tests.test_problems import explicit_lqr


class TestRollout:
    def test_deterministic_constant_reward_integral(self):
        cc = make_constant_cost(1.0, 1.0, 1, sigma_scale=0.0)
        pol = PolicyHandle.constant(cc)
        res = rollout(cc, pol, np.zeros(1), horizon=10.0, dt=1e-4, seed=0)
        expected = 1.0 - np.exp(-10.0)
        # left-endpoint quadrature bias is O(lambda * dt / 2)
        assert abs(res.discounted_return - expected) < 1e-3
        assert not res.truncated
        assert res.trajectory.shape[0] == int(10.0 / 1e-4) + 1

    def test_lqr_equilibrium_stays_put(self):
        prob = explicit_lqr([[0.0]], [[1.0]], [[1.0]], [[1.0]],
                            u_max=5.0, sigma_scale=0.0)
        ric = solve_riccati_discounted([[0.0]], [[1.0]], [[1.0]], [[1.0]],
                                       discount=1.0, sigma=[[0.0]])
        pol = PolicyHandle.from_function(prob, ric.policy)
        res = rollout(prob, pol, np.zeros(1), horizon=2.0, dt=1e-3, seed=0)
        np.testing.assert_allclose(res.trajectory, 0.0)
        assert res.discounted_return == 0.0

    def test_same_seed_identical(self):
        prob = make_lqr(2, 2, seed=1, u_max=2.0)
        pol = PolicyHandle.constant(prob)
        r1 = rollout(prob, pol, np.ones(2), horizon=1.0, dt=1e-2, seed=9)
        r2 = rollout(prob, pol, np.ones(2), horizon=1.0, dt=1e-2, seed=9)
        assert np.array_equal(r1.trajectory, r2.trajectory)
        assert r1.discounted_return == r2.discounted_return

    def test_blow_up_truncates_with_flag(self):
        import pinnpi.problems as P

        prob = P.ControlProblem(
            "exploding", 1, 1, lambda x, a: 10.0 * x,
            lambda x, a: np.ones(x.shape[0]), np.zeros((1, 1)), 1.0,
            np.array([[-1.0, 1.0]]), np.array([[-1.0, 1.0]]),
            allow_degenerate_sigma=True,
        )
        pol = PolicyHandle.constant(prob)
        res = rollout(prob, pol, np.ones(1), horizon=3.0, dt=1e-2, seed=0)
        assert res.truncated
        assert res.trajectory.shape[0] < int(3.0 / 1e-2) + 1

    def test_bad_steps_rejected(self):
        cc = make_constant_cost()
        with pytest.raises(ValueError):
            rollout(cc, PolicyHandle.constant(cc), np.zeros(2), 0.5, -1e-2)


class TestEstimateValueMC:
    def test_deterministic_problem_zero_stderr(self):
        cc = make_constant_cost(1.0, 1.0, 1, sigma_scale=0.0)
        pol = PolicyHandle.constant(cc)
        mean, stderr = estimate_value_mc(cc, pol, np.zeros(1), 16, 5.0, 1e-2)
        assert stderr == 0.0

    def test_constant_cost_matches_analytic_mean(self):
        cc = make_constant_cost(1.0, 1.0, 2, sigma_scale=0.1)
        pol = PolicyHandle.constant(cc)
        T, dt = 10.0, 1e-2
        mean, stderr = estimate_value_mc(cc, pol, np.zeros(2), 64, T, dt,
                                         seed=3)
        analytic = 1.0 - np.exp(-T)
        # reward is path-independent: only the quadrature bias remains
        assert stderr == 0.0
        assert abs(mean - analytic) < dt

    def test_truncation_bias_bound_constant_cost(self):
        cc = make_constant_cost(1.0, 1.0, 1, sigma_scale=0.1)
        pol = PolicyHandle.constant(cc)
        T, dt = 6.0, 1e-3
        mean, _ = estimate_value_mc(cc, pol, np.zeros(1), 8, T, dt, seed=0)
        v_inf = 1.0  # c / lambda
        assert abs(mean - v_inf) <= 1.0 * np.exp(-T) / 1.0 + 2.0 * dt

    def test_lqr_matches_riccati_value(self):
        prob = explicit_lqr([[0.0]], [[1.0]], [[1.0]], [[1.0]],
                            discount=2.0, u_max=50.0)
        ric = solve_riccati_discounted([[0.0]], [[1.0]], [[1.0]], [[1.0]],
                                       discount=2.0, sigma=[[0.1]])
        pol = PolicyHandle.from_function(prob, ric.policy)
        mean, stderr = estimate_value_mc(prob, pol, np.ones(1), 400, 10.0,
                                         1e-3, seed=5)
        target = ric.value(np.ones((1, 1)))[0]
        assert abs(mean - target) < 3.0 * stderr + 0.02

    def test_variance_shrinks_with_more_rollouts(self):
        prob = make_lqr(1, 1, seed=0, u_max=2.0)
        pol = PolicyHandle.constant(prob)
        _, se_small = estimate_value_mc(prob, pol, np.ones(1), 64, 5.0,
                                        1e-2, seed=1)
        _, se_big = estimate_value_mc(prob, pol, np.ones(1), 256, 5.0,
                                      1e-2, seed=1)
        assert se_big < se_small
        assert 1.2 < se_small / se_big < 3.5

    def test_requires_two_rollouts(self):
        cc = make_constant_cost()
        with pytest.raises(ValueError):
            estimate_value_mc(cc, PolicyHandle.constant(cc), np.zeros(2),
                              1, 1.0, 1e-2)


class TestMonotonicityReport:
    def test_increasing_snapshot_lists(self):
        assert monotonicity_report([[1.0], [2.0], [3.0]]) == 1.0

    def test_decreasing_with_zero_slack(self):
        assert monotonicity_report([[3.0], [2.0], [1.0]], slack=0.0) == 0.0

    def test_slack_rescues_small_dips(self):
        vals = [np.array([1.0, 1.0]), np.array([0.95, 1.2])]
        assert monotonicity_report(vals, slack=0.1) == 1.0
        assert monotonicity_report(vals, slack=0.01) == 0.5

    def test_trace_default_slack_uses_residuals(self):
        trace = IterationTrace()
        trace.append(0, residual_l2=0.5, value_snapshot=[1.0],
                     policy_sup_dist=1.0)
        trace.append(1, residual_l2=0.5, value_snapshot=[0.0],
                     policy_sup_dist=0.5)
        # dip of 1.0 is within the default slack 2 * (0.5 + 0.5)
        assert monotonicity_report(trace) == 1.0
        assert monotonicity_report(trace, slack=0.1) == 0.0

    def test_needs_two_iterations(self):
        with pytest.raises(ValueError):
            monotonicity_report([[1.0]])

    def test_trace_append_requires_increasing_n(self):
        trace = IterationTrace()
        trace.append(0, 0.1, [1.0], 1.0)
        with pytest.raises(ValueError):
            trace.append(0, 0.1, [1.0], 1.0)


class TestFitConvergenceRate:
    def test_exact_geometric(self):
        errors = 2.0 * 0.5 ** np.arange(10)
        fit = fit_convergence_rate(errors, floor_window=0)
        assert abs(fit.kappa_hat - 0.5) < 1e-10
        assert fit.floor_estimate == 0.0
        assert fit.contraction

    def test_geometric_with_floor(self):
        errors = 0.5 ** np.arange(12) + 0.01
        fit = fit_convergence_rate(errors, floor_window=3)
        assert abs(fit.floor_estimate - 0.01) < 3e-3
        assert abs(fit.kappa_hat - 0.5) < 0.05

    def test_constant_errors_flagged(self):
        fit = fit_convergence_rate(np.full(6, 0.3), floor_window=2)
        assert fit.kappa_hat == 1.0
        assert not fit.contraction

    def test_requires_four_points(self):
        with pytest.raises(ValueError):
            fit_convergence_rate([1.0, 0.5, 0.25])

    def test_floor_window_bounds(self):
        with pytest.raises(ValueError):
            fit_convergence_rate(np.ones(5), floor_window=5)
