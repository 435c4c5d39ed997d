import itertools

import numpy as np
import pytest

from pinnpi.errors import AssumptionError, NumericalError
from pinnpi.problems import (AffineQuadratic, ControlProblem, cost_eval,
                             drift_eval, make_cartpole, make_constant_cost,
                             make_lqr, make_pendulum, validate_assumptions)


def explicit_lqr(A, B, Q, R, discount=1.0, u_max=10.0, hw=3.0, sigma_scale=0.1):
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R))
    d, m = B.shape

    def drift(x, a):
        return x @ A.T + a @ B.T

    def cost(x, a):
        return -np.einsum("ni,ij,nj->n", x, Q, x) - np.einsum("ni,ij,nj->n", a, R, a)

    aff = AffineQuadratic(
        f=lambda x: x @ A.T,
        G=lambda x: np.broadcast_to(B, (x.shape[0], d, m)),
        R=R,
        state_reward=lambda x: -np.einsum("ni,ij,nj->n", x, Q, x),
        r_diagonal=bool(np.allclose(R, np.diag(np.diag(R)))),
    )
    return ControlProblem(
        name="explicit_lqr", state_dim=d, action_dim=m, drift=drift, cost=cost,
        sigma=sigma_scale * np.eye(d), discount=discount,
        action_box=np.tile([-u_max, u_max], (m, 1)),
        domain=np.tile([-hw, hw], (d, 1)), affine=aff,
        drift_divergence=lambda x, a: np.full(x.shape[0], np.trace(A)),
        meta={"A": A, "B": B, "Q": Q, "R": R, "u_max": u_max},
        allow_degenerate_sigma=(sigma_scale == 0.0),
    )


class TestDriftCostEval:
    def test_pure_control_drift(self):
        prob = explicit_lqr(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))
        out = drift_eval(prob, np.array([3.0, -1.0]), np.array([1.0, 2.0]))
        np.testing.assert_allclose(out, [1.0, 2.0])

    def test_pendulum_equilibrium(self):
        pend = make_pendulum()
        out = drift_eval(pend, np.zeros(2), np.zeros(1))
        np.testing.assert_allclose(out, [0.0, 0.0])

    def test_lqr_drift_is_matrix_multiply(self):
        prob = make_lqr(2, 2, seed=5)
        A = prob.meta["A"]
        e1 = np.array([1.0, 0.0])
        out = drift_eval(prob, e1, np.zeros(2))
        np.testing.assert_allclose(out, A[:, 0], rtol=1e-14)

    def test_quadratic_cost(self):
        prob = explicit_lqr(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))
        assert cost_eval(prob, np.array([1.0, 1.0]), np.array([2.0, 0.0])) == -6.0

    def test_constant_cost_value(self):
        cc = make_constant_cost(1.0, 1.0, 2)
        rng = np.random.default_rng(0)
        x = cc.sample_domain(50, rng)
        a = cc.sample_actions(50, rng)
        np.testing.assert_allclose(cost_eval(cc, x, a), 1.0)

    def test_pendulum_cost_zero_at_target(self):
        pend = make_pendulum()
        assert cost_eval(pend, np.zeros(2), np.zeros(1)) == 0.0

    def test_out_of_box_action_clamped_with_warning(self):
        prob = make_lqr(1, 1, seed=0, u_max=1.0)
        with pytest.warns(UserWarning, match="clamped"):
            out = drift_eval(prob, np.zeros(1), np.array([5.0]))
        expected = drift_eval(prob, np.zeros(1), np.array([1.0]))
        np.testing.assert_allclose(out, expected)

    def test_nonfinite_drift_raises(self):
        def bad_drift(x, a):
            return np.full((x.shape[0], 1), np.nan)

        prob = ControlProblem(
            "bad", 1, 1, bad_drift, lambda x, a: np.zeros(x.shape[0]),
            0.1 * np.eye(1), 1.0, np.array([[-1.0, 1.0]]),
            np.array([[-1.0, 1.0]]),
        )
        with pytest.raises(NumericalError):
            drift_eval(prob, np.zeros(1), np.zeros(1))


class TestCatalog:
    def test_lqr_5d_standard_settings(self):
        prob = make_lqr(5, 5, seed=0, u_max=10.0, sigma_scale=0.1, discount=1.0)
        assert prob.state_dim == 5 and prob.action_dim == 5
        assert np.max(np.linalg.eigvals(prob.meta["A"]).real) <= -0.1 + 1e-12
        np.testing.assert_allclose(prob.sigma, 0.1 * np.eye(5))
        np.testing.assert_allclose(prob.action_box[:, 1], 10.0)
        for M in (prob.meta["Q"], prob.meta["R"]):
            assert np.linalg.eigvalsh(M).min() > 0.0

    def test_lqr_10d(self):
        prob = make_lqr(10, 10, seed=1)
        assert prob.state_dim == 10
        assert np.max(np.linalg.eigvals(prob.meta["A"]).real) <= -0.1 + 1e-12

    def test_lqr_deterministic_from_seed(self):
        p1, p2 = make_lqr(3, 2, seed=9), make_lqr(3, 2, seed=9)
        for key in ("A", "B", "Q", "R"):
            assert np.array_equal(p1.meta[key], p2.meta[key])

    def test_pendulum_shape(self):
        pend = make_pendulum()
        assert pend.state_dim == 2 and pend.action_dim == 1
        np.testing.assert_allclose(pend.action_box, [[-2.0, 2.0]])
        np.testing.assert_allclose(pend.domain[0], [-np.pi, np.pi])

    def test_pendulum_dynamics_table(self):
        pend = make_pendulum()
        x = np.array([[0.3, -1.2]])
        a = np.array([[0.7]])
        out = pend.drift(x, a)
        np.testing.assert_allclose(out[0, 0], -1.2)
        np.testing.assert_allclose(out[0, 1], 15.0 * np.sin(0.3) + 3.0 * 0.7)

    def test_cartpole_shape(self):
        cp = make_cartpole()
        assert cp.state_dim == 4 and cp.action_dim == 1
        np.testing.assert_allclose(cp.action_box, [[-10.0, 10.0]])

    def test_constant_cost_exact_solution(self):
        cc = make_constant_cost(1.0, 1.0, 2)
        # V = c / lambda is the exact solution: lam*V - 0 - 0 - L = 0
        assert cc.discount * (cc.meta["c"] / cc.discount) - cc.meta["c"] == 0.0

    def test_control_structure_tags(self):
        assert make_lqr(2, 2, seed=0).control_structure == "affine_quadratic"
        assert make_pendulum().control_structure == "affine_quadratic"
        assert make_constant_cost().control_structure == "general"

    def test_degenerate_sigma_requires_opt_in(self):
        cc = make_constant_cost(1.0, 1.0, 1, sigma_scale=0.0)
        assert cc.allow_degenerate_sigma
        with pytest.raises(AssumptionError):
            ControlProblem(
                "deg", 1, 1, lambda x, a: np.zeros((x.shape[0], 1)),
                lambda x, a: np.zeros(x.shape[0]), np.zeros((1, 1)), 1.0,
                np.array([[-1.0, 1.0]]), np.array([[-1.0, 1.0]]),
            )

    def test_invalid_boxes_rejected(self):
        with pytest.raises(ValueError):
            make_lqr(2, 2, seed=0, u_max=-1.0)


class TestAffineStructure:
    @pytest.mark.parametrize("maker", [
        lambda: make_lqr(3, 2, seed=4),
        make_pendulum,
        make_cartpole,
    ])
    def test_drift_affine_in_action(self, maker):
        prob = maker()
        rng = np.random.default_rng(1)
        x = prob.sample_domain(64, rng)
        a1 = prob.sample_actions(64, rng)
        a2 = prob.sample_actions(64, rng)
        lhs = prob.drift(x, a1) + prob.drift(x, a2)
        rhs = prob.drift(x, a1 + a2 - prob.action_center * 0) + prob.drift(
            x, np.zeros_like(a1)
        )
        scale = np.max(np.abs(lhs)) + 1.0
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * scale)

    @pytest.mark.parametrize("maker", [
        lambda: make_lqr(3, 2, seed=4),
        make_pendulum,
        make_cartpole,
    ])
    def test_affine_record_matches_drift(self, maker):
        prob = maker()
        rng = np.random.default_rng(2)
        x = prob.sample_domain(64, rng)
        a = prob.sample_actions(64, rng)
        rebuilt = prob.affine.f(x) + np.einsum("ndm,nm->nd", prob.affine.G(x), a)
        np.testing.assert_allclose(rebuilt, prob.drift(x, a), atol=1e-12)

    @pytest.mark.parametrize("maker", [
        lambda: make_lqr(3, 3, seed=8),
        make_pendulum,
    ])
    def test_cost_strongly_concave_in_action(self, maker):
        prob = maker()
        mu = 2.0 * np.linalg.eigvalsh(prob.affine.R).min()
        rng = np.random.default_rng(3)
        x = prob.sample_domain(200, rng)
        a1 = prob.sample_actions(200, rng)
        a2 = prob.sample_actions(200, rng)
        t = rng.random((200, 1))
        mid = t * a1 + (1.0 - t) * a2
        lhs = prob.cost(x, mid)
        rhs = (
            t[:, 0] * prob.cost(x, a1)
            + (1.0 - t[:, 0]) * prob.cost(x, a2)
            + 0.5 * mu * t[:, 0] * (1.0 - t[:, 0])
            * np.sum((a1 - a2) ** 2, axis=1)
        )
        assert np.all(lhs >= rhs - 1e-9)


class TestValidateAssumptions:
    def test_constant_cost_constants(self):
        cc = make_constant_cost(1.0, 1.0, 2)
        tc = validate_assumptions(cc, n_samples=2000, seed=0)
        assert tc.B_hat == 0.0
        np.testing.assert_allclose([tc.nu, tc.Lam], [0.01, 0.01])
        assert tc.lambda_margin == 1.0
        np.testing.assert_allclose(tc.C_lambda, 10.0)
        assert tc.valid

    def test_synthetic_forced_constants(self):
        # constant drift of norm 2, zero divergence, sigma = I, lambda = 2
        def drift(x, a):
            return np.tile([2.0, 0.0], (x.shape[0], 1))

        prob = ControlProblem(
            "forced", 2, 1, drift,
            lambda x, a: -a[:, 0] ** 2, np.eye(2), 2.0,
            np.array([[-1.0, 1.0]]), np.tile([-1.0, 1.0], (2, 1)),
            drift_divergence=lambda x, a: np.zeros(x.shape[0]),
        )
        tc = validate_assumptions(prob, n_samples=2000, seed=0)
        np.testing.assert_allclose(tc.B_hat, 2.0)
        np.testing.assert_allclose(tc.C_lambda, 1.0)

    def test_c_lambda_formula_exact(self):
        prob = make_lqr(2, 2, seed=3, u_max=0.5, discount=60.0)
        tc = validate_assumptions(prob, n_samples=2000, seed=1)
        assert tc.lambda_margin > 0
        expected = max(
            1.0 / tc.lambda_margin, np.sqrt(1.0 / (tc.nu * tc.lambda_margin))
        )
        assert tc.C_lambda == expected

    def test_lqr5d_b_hat_vs_corner_sup(self):
        prob = make_lqr(5, 5, seed=7)
        with pytest.warns(UserWarning, match="hypotheses fail"):
            tc = validate_assumptions(prob, n_samples=20000, seed=0)
        A, B = prob.meta["A"], prob.meta["B"]
        corners_x = np.array(list(itertools.product(*prob.domain)))
        corners_a = np.array(list(itertools.product(*prob.action_box)))
        sup = 0.0
        for cx in corners_x:
            norms = np.linalg.norm(cx @ A.T + corners_a @ B.T, axis=1)
            sup = max(sup, float(norms.max()))
        analytic = sup + abs(np.trace(A))
        assert tc.B_hat <= analytic + 1e-9
        assert tc.B_hat >= 0.5 * analytic

    def test_mu_a_affine_is_spectral(self):
        prob = make_lqr(2, 2, seed=0)
        tc = validate_assumptions(prob, n_samples=2000, seed=0)
        np.testing.assert_allclose(
            tc.mu_a, 2.0 * np.linalg.eigvalsh(prob.meta["R"]).min()
        )

    def test_lambda_margin_warning(self):
        pend = make_pendulum()
        with pytest.warns(UserWarning, match="hypotheses fail"):
            tc = validate_assumptions(pend, n_samples=2000, seed=0)
        assert tc.lambda_margin < 0
        assert not tc.valid
        assert not np.isfinite(tc.C_lambda)

    def test_sample_floor_enforced(self):
        with pytest.raises(ValueError):
            validate_assumptions(make_constant_cost(), n_samples=10)
