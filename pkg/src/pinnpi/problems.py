"""Control problem abstraction, benchmark catalog, and hypothesis checking.

A problem bundles drift b(x, a), running reward rate L(x, a) (always
maximized), a constant diffusion matrix sigma, a discount rate, a compact
box action set, and the bounded box domain used for collocation and
evaluation.  Problems whose drift is f(x) + G(x) a and whose reward is
state_reward(x) - a' R a carry an `affine` structure record that unlocks
closed-form policy improvement and analytic constants.

All stored callables are vectorized: states are (n, d) arrays, actions
(n, m) arrays; drift returns (n, d) and reward (n,).  `drift_eval` /
`cost_eval` accept single points as well.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import AssumptionError, NumericalError


def _as_batch(x, dim, name):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"{name} has length {x.shape[0]}, expected {dim}")
        return x.reshape(1, dim), True
    if x.ndim == 2 and x.shape[1] == dim:
        return x, False
    raise ValueError(f"{name} has shape {x.shape}, expected (n, {dim})")


@dataclass(frozen=True)
class AffineQuadratic:
    """Control structure record: drift f(x) + G(x) a, reward s(x) - a' R a.

    f: (n, d) -> (n, d); G: (n, d) -> (n, d, m); state_reward: (n, d) -> (n,).
    """

    f: Callable[[np.ndarray], np.ndarray]
    G: Callable[[np.ndarray], np.ndarray]
    R: np.ndarray
    state_reward: Callable[[np.ndarray], np.ndarray]
    r_diagonal: bool


@dataclass(frozen=True)
class ControlProblem:
    name: str
    state_dim: int
    action_dim: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    cost: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sigma: np.ndarray
    discount: float
    action_box: np.ndarray  # (m, 2) rows [lo, hi]
    domain: np.ndarray      # (d, 2) rows [lo, hi]
    affine: Optional[AffineQuadratic] = None
    drift_divergence: Optional[Callable] = None  # analytic div_x b, (n,) output
    meta: dict = field(default_factory=dict)
    allow_degenerate_sigma: bool = False

    def __post_init__(self):
        box = np.asarray(self.action_box, dtype=float)
        dom = np.asarray(self.domain, dtype=float)
        if box.shape != (self.action_dim, 2) or np.any(box[:, 0] >= box[:, 1]):
            raise ValueError("action_box must be (m, 2) with lo < hi per coordinate")
        if dom.shape != (self.state_dim, 2) or np.any(dom[:, 0] >= dom[:, 1]):
            raise ValueError("domain must be (d, 2) with strictly positive volume")
        sig = np.asarray(self.sigma, dtype=float)
        if sig.shape != (self.state_dim, self.state_dim):
            raise ValueError("sigma must be d x d")
        ev = np.linalg.eigvalsh(sig @ sig.T)
        if ev.min() <= 0.0:
            if self.allow_degenerate_sigma:
                warnings.warn(
                    f"{self.name}: sigma sigma' is degenerate (min eigenvalue "
                    f"{ev.min():.3g}); nondegeneracy hypothesis does not hold"
                )
            else:
                raise AssumptionError(
                    f"{self.name}: sigma sigma' must be positive definite "
                    f"(min eigenvalue {ev.min():.3g})"
                )
        object.__setattr__(self, "action_box", box)
        object.__setattr__(self, "domain", dom)
        object.__setattr__(self, "sigma", sig)

    # -- geometry helpers -------------------------------------------------
    @property
    def control_structure(self) -> str:
        return "affine_quadratic" if self.affine is not None else "general"

    @property
    def sigma_sq(self) -> np.ndarray:
        return self.sigma @ self.sigma.T

    @property
    def domain_volume(self) -> float:
        return float(np.prod(self.domain[:, 1] - self.domain[:, 0]))

    @property
    def action_center(self) -> np.ndarray:
        return 0.5 * (self.action_box[:, 0] + self.action_box[:, 1])

    def clamp_actions(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.action_box[:, 0], self.action_box[:, 1])

    def sample_domain(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        return lo + (hi - lo) * rng.random((n, self.state_dim))

    def sample_actions(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.action_box[:, 0], self.action_box[:, 1]
        return lo + (hi - lo) * rng.random((n, self.action_dim))


def drift_eval(problem: ControlProblem, x, a) -> np.ndarray:
    """Evaluate the drift, clamping out-of-box actions with a warning."""
    xb, single = _as_batch(x, problem.state_dim, "x")
    ab, _ = _as_batch(a, problem.action_dim, "a")
    if xb.shape[0] != ab.shape[0]:
        raise ValueError("x and a batch sizes differ")
    clamped = problem.clamp_actions(ab)
    if not np.allclose(clamped, ab, rtol=0.0, atol=0.0):
        warnings.warn("action outside action_box; clamped before drift evaluation")
        ab = clamped
    out = problem.drift(xb, ab)
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out).all(axis=1))[0, 0])
        raise NumericalError(
            f"non-finite drift at x={xb[bad]}, a={ab[bad]}"
        )
    return out[0] if single else out


def cost_eval(problem: ControlProblem, x, a):
    """Evaluate the running reward rate (maximized by the solvers)."""
    xb, single = _as_batch(x, problem.state_dim, "x")
    ab, _ = _as_batch(a, problem.action_dim, "a")
    if xb.shape[0] != ab.shape[0]:
        raise ValueError("x and a batch sizes differ")
    out = problem.cost(xb, ab)
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out))[0, 0])
        raise NumericalError(f"non-finite reward at x={xb[bad]}, a={ab[bad]}")
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

def make_lqr(d, m=None, seed=0, u_max=10.0, sigma_scale=0.1, discount=1.0,
             diag_r=False, domain_halfwidth=3.0) -> ControlProblem:
    """Constrained stochastic linear-quadratic problem.

    dX = (A X + B u) dt + sigma dW with reward -x'Qx - u'Ru and box
    |u_i| <= u_max.  A is sampled dense then shifted so every eigenvalue
    has real part <= -0.1; Q and R are random-factor SPD (G'G + 0.1 I).
    Everything is reproducible from the seed.
    """
    if d < 1 or (m is not None and m < 1):
        raise ValueError("d and m must be >= 1")
    if m is None:
        m = d
    rng = np.random.default_rng(seed)
    A0 = rng.standard_normal((d, d)) / np.sqrt(d)
    shift = np.max(np.linalg.eigvals(A0).real)
    A = A0 - (shift + 0.1) * np.eye(d)
    B = rng.standard_normal((d, m)) / np.sqrt(m)
    Gq = rng.standard_normal((d, d)) / np.sqrt(d)
    Q = Gq.T @ Gq + 0.1 * np.eye(d)
    if diag_r:
        R = np.diag(rng.uniform(0.5, 1.5, m))
    else:
        Gr = rng.standard_normal((m, m)) / np.sqrt(m)
        R = Gr.T @ Gr + 0.1 * np.eye(m)

    def drift(x, a):
        return x @ A.T + a @ B.T

    def cost(x, a):
        return -np.einsum("ni,ij,nj->n", x, Q, x) - np.einsum(
            "ni,ij,nj->n", a, R, a
        )

    tr_A = float(np.trace(A))
    aff = AffineQuadratic(
        f=lambda x: x @ A.T,
        G=lambda x: np.broadcast_to(B, (x.shape[0], d, m)),
        R=R,
        state_reward=lambda x: -np.einsum("ni,ij,nj->n", x, Q, x),
        r_diagonal=bool(diag_r),
    )
    return ControlProblem(
        name=f"lqr{d}d",
        state_dim=d,
        action_dim=m,
        drift=drift,
        cost=cost,
        sigma=sigma_scale * np.eye(d),
        discount=float(discount),
        action_box=np.tile([-u_max, u_max], (m, 1)),
        domain=np.tile([-domain_halfwidth, domain_halfwidth], (d, 1)),
        affine=aff,
        drift_divergence=lambda x, a: np.full(x.shape[0], tr_A),
        meta={"A": A, "B": B, "Q": Q, "R": R, "seed": seed, "u_max": u_max},
        allow_degenerate_sigma=(sigma_scale == 0.0),
    )


_PEND_G, _PEND_M, _PEND_L = 10.0, 1.0, 1.0


def _wrap_angle(theta):
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


def make_pendulum(sigma_scale=0.1, discount=1.0) -> ControlProblem:
    """Torque-limited stochastic pendulum (upright target at the origin).

    theta' = omega, omega' = (3g/2l) sin(theta) + (3/(m l^2)) a with
    g=10, m=1, l=1 and |a| <= 2; reward -(theta^2 + 0.1 omega^2 + 0.001 a^2)
    with the angle wrapped to [-pi, pi].
    """
    k_grav = 3.0 * _PEND_G / (2.0 * _PEND_L)
    k_act = 3.0 / (_PEND_M * _PEND_L ** 2)

    def drift(x, a):
        return np.stack([x[:, 1], k_grav * np.sin(x[:, 0]) + k_act * a[:, 0]], axis=1)

    def state_reward(x):
        th = _wrap_angle(x[:, 0])
        return -(th ** 2 + 0.1 * x[:, 1] ** 2)

    def cost(x, a):
        return state_reward(x) - 0.001 * a[:, 0] ** 2

    aff = AffineQuadratic(
        f=lambda x: np.stack([x[:, 1], k_grav * np.sin(x[:, 0])], axis=1),
        G=lambda x: np.broadcast_to(
            np.array([[0.0], [k_act]]), (x.shape[0], 2, 1)
        ),
        R=np.array([[0.001]]),
        state_reward=state_reward,
        r_diagonal=True,
    )
    return ControlProblem(
        name="pendulum",
        state_dim=2,
        action_dim=1,
        drift=drift,
        cost=cost,
        sigma=sigma_scale * np.eye(2),
        discount=float(discount),
        action_box=np.array([[-2.0, 2.0]]),
        domain=np.array([[-np.pi, np.pi], [-8.0, 8.0]]),
        affine=aff,
        # d(theta')/dtheta + d(omega')/domega = 0
        drift_divergence=lambda x, a: np.zeros(x.shape[0]),
        allow_degenerate_sigma=(sigma_scale == 0.0),
    )


_CP_G, _CP_MCART, _CP_MPOLE, _CP_HALFLEN = 9.8, 1.0, 0.1, 0.5


def _cartpole_accels(x, force):
    # state (pos, vel, theta, theta_dot); classic continuous cart-pole ODEs
    total = _CP_MCART + _CP_MPOLE
    th, thd = x[:, 2], x[:, 3]
    sin, cos = np.sin(th), np.cos(th)
    temp = (force + _CP_MPOLE * _CP_HALFLEN * thd ** 2 * sin) / total
    denom = _CP_HALFLEN * (4.0 / 3.0 - _CP_MPOLE * cos ** 2 / total)
    th_acc = (_CP_G * sin - cos * temp) / denom
    x_acc = temp - _CP_MPOLE * _CP_HALFLEN * th_acc * cos / total
    return x_acc, th_acc


def make_cartpole(sigma_scale=0.1, discount=1.0) -> ControlProblem:
    """Stochastic continuous-force cart-pole balancing problem."""

    def drift(x, a):
        x_acc, th_acc = _cartpole_accels(x, a[:, 0])
        return np.stack([x[:, 1], x_acc, x[:, 3], th_acc], axis=1)

    def state_reward(x):
        return -(
            x[:, 0] ** 2
            + 10.0 * x[:, 2] ** 2
            + 0.1 * x[:, 1] ** 2
            + 0.1 * x[:, 3] ** 2
        )

    def cost(x, a):
        return state_reward(x) - 0.001 * a[:, 0] ** 2

    def f(x):
        x_acc, th_acc = _cartpole_accels(x, np.zeros(x.shape[0]))
        return np.stack([x[:, 1], x_acc, x[:, 3], th_acc], axis=1)

    def G(x):
        # drift is affine in the force; extract the per-state gain column
        total = _CP_MCART + _CP_MPOLE
        cos = np.cos(x[:, 2])
        denom = _CP_HALFLEN * (4.0 / 3.0 - _CP_MPOLE * cos ** 2 / total)
        dth_acc = -cos / (total * denom)
        dx_acc = 1.0 / total - _CP_MPOLE * _CP_HALFLEN * cos * dth_acc / total
        g = np.zeros((x.shape[0], 4, 1))
        g[:, 1, 0] = dx_acc
        g[:, 3, 0] = dth_acc
        return g

    aff = AffineQuadratic(
        f=f, G=G, R=np.array([[0.001]]), state_reward=state_reward,
        r_diagonal=True,
    )
    return ControlProblem(
        name="cartpole",
        state_dim=4,
        action_dim=1,
        drift=drift,
        cost=cost,
        sigma=sigma_scale * np.eye(4),
        discount=float(discount),
        action_box=np.array([[-10.0, 10.0]]),
        domain=np.array(
            [[-2.4, 2.4], [-3.0, 3.0], [-0.21, 0.21], [-3.0, 3.0]]
        ),
        affine=aff,
        allow_degenerate_sigma=(sigma_scale == 0.0),
    )


def make_constant_cost(c=1.0, discount=1.0, d=2, sigma_scale=0.1,
                       domain=None) -> ControlProblem:
    """Analytic fixture: zero drift, reward identically c.

    The exact value function is V(x) = c / discount for every policy, which
    pins down the whole pipeline end to end.
    """
    if domain is None:
        domain = np.tile([-1.0, 1.0], (d, 1))

    def drift(x, a):
        return np.zeros((x.shape[0], d))

    def cost(x, a):
        return np.full(x.shape[0], float(c))

    return ControlProblem(
        name="constant_cost",
        state_dim=d,
        action_dim=1,
        drift=drift,
        cost=cost,
        sigma=sigma_scale * np.eye(d),
        discount=float(discount),
        action_box=np.array([[-1.0, 1.0]]),
        domain=np.asarray(domain, dtype=float),
        drift_divergence=lambda x, a: np.zeros(x.shape[0]),
        meta={"c": float(c)},
        allow_degenerate_sigma=(sigma_scale == 0.0),
    )


CATALOG = {
    "lqr": make_lqr,
    "pendulum": make_pendulum,
    "cartpole": make_cartpole,
    "constant_cost": make_constant_cost,
}


# ---------------------------------------------------------------------------
# hypothesis checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TheoryConstants:
    """Empirical constants entering the stability and contraction bounds.

    B_hat is the sampled sup over Omega x A of |b| + |div_x b|; nu and Lam
    bound the spectrum of sigma sigma'; mu_a is the strong-concavity modulus
    of the reward in the action; C_lambda is the energy-estimate constant
    max{1/(lambda - B/2), sqrt(1/(nu (lambda - B/2)))}, finite only when
    lambda_margin = lambda - B_hat/2 is positive.
    """

    B_hat: float
    nu: float
    Lam: float
    mu_a: float
    C_lambda: float
    lambda_margin: float
    L_a_hat: float
    B_tilde_hat: float
    grad_bound: float
    theta_hat: float
    C_R_hat: float
    kappa_tilde_bound: float
    valid: bool
    notes: tuple = ()


def _divergence_fd(problem, x, a):
    # central differences with per-point step h = 1e-5 (1 + |x|)
    h = 1e-5 * (1.0 + np.linalg.norm(x, axis=1))
    div = np.zeros(x.shape[0])
    for k in range(problem.state_dim):
        xp = x.copy()
        xm = x.copy()
        xp[:, k] += h
        xm[:, k] -= h
        div += (problem.drift(xp, a)[:, k] - problem.drift(xm, a)[:, k]) / (2.0 * h)
    return div


def _action_jacobian_fd(problem, x, a):
    h = 1e-6
    jac = np.zeros((x.shape[0], problem.state_dim, problem.action_dim))
    for j in range(problem.action_dim):
        ap = a.copy()
        am = a.copy()
        ap[:, j] += h
        am[:, j] -= h
        jac[:, :, j] = (problem.drift(x, ap) - problem.drift(x, am)) / (2.0 * h)
    return jac


def validate_assumptions(problem: ControlProblem, n_samples=10000, seed=0,
                         grad_bound=None) -> TheoryConstants:
    """Estimate the hypothesis constants by sampling Omega x A.

    grad_bound is the bound M on |grad v| entering the selector-Lipschitz
    constant; when not supplied it is proxied by the energy estimate
    C_lambda * ||L(., a_center)||_2, which is only a coarse stand-in until a
    trained value gradient is available.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    ev = np.linalg.eigvalsh(problem.sigma_sq)
    nu, lam_max = float(ev.min()), float(ev.max())
    if nu <= 0.0:
        raise AssumptionError("sigma sigma' is degenerate (min eigenvalue <= 0)")

    rng = np.random.default_rng(seed)
    xs = problem.sample_domain(n_samples, rng)
    acts = problem.sample_actions(n_samples, rng)
    b = problem.drift(xs, acts)
    if problem.drift_divergence is not None:
        div = problem.drift_divergence(xs, acts)
    else:
        div = _divergence_fd(problem, xs, acts)
    B_hat = float(np.max(np.linalg.norm(b, axis=1) + np.abs(div)))

    notes = []
    lam = problem.discount
    margin = lam - 0.5 * B_hat
    if margin > 0.0:
        C_lambda = max(1.0 / margin, np.sqrt(1.0 / (nu * margin)))
        valid = True
    else:
        C_lambda = float("inf")
        valid = False
        notes.append("discount does not dominate B_hat/2 on the domain")
        warnings.warn(
            f"{problem.name}: lambda - B_hat/2 = {margin:.3g} <= 0; the "
            "energy-estimate hypotheses fail on this domain"
        )

    # strong concavity of the reward in the action
    if problem.affine is not None:
        mu_a = 2.0 * float(np.linalg.eigvalsh(problem.affine.R).min())
    else:
        m = problem.action_dim
        a0 = problem.sample_actions(n_samples, rng)
        a1 = problem.sample_actions(n_samples, rng)
        keep = np.linalg.norm(a1 - a0, axis=1) > 1e-8
        a0, a1 = a0[keep], a1[keep]
        xm = problem.sample_domain(a0.shape[0], rng)
        mid = 0.5 * (a0 + a1)
        second = (
            problem.cost(xm, a0) + problem.cost(xm, a1) - 2.0 * problem.cost(xm, mid)
        )
        # L(mid) >= (L(a0)+L(a1))/2 + mu/8 |a1-a0|^2 under mu-strong concavity
        mu_a = float(np.min(-4.0 * second / np.sum((a1 - a0) ** 2, axis=1)))
        mu_a = max(mu_a, 0.0)
    if mu_a <= 1e-12:
        notes.append("reward is not strongly concave in the action")

    # Lipschitz constant of the reward in the action (sampled sup gradient)
    h = 1e-6
    grad_a = np.zeros((n_samples, problem.action_dim))
    for j in range(problem.action_dim):
        ap = acts.copy()
        am = acts.copy()
        ap[:, j] += h
        am[:, j] -= h
        grad_a[:, j] = (problem.cost(xs, ap) - problem.cost(xs, am)) / (2.0 * h)
    L_a_hat = float(np.max(np.linalg.norm(grad_a, axis=1)))

    # bound on the action Jacobian of the drift plus its Lipschitz modulus
    if problem.affine is not None:
        jac = problem.affine.G(xs)
        B_tilde_hat = float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))
    else:
        acts2 = problem.sample_actions(n_samples, rng)
        jac = _action_jacobian_fd(problem, xs, acts)
        jac2 = _action_jacobian_fd(problem, xs, acts2)
        sup_jac = float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))
        gap = np.linalg.norm(acts - acts2, axis=1)
        keep = gap > 1e-8
        lips = np.linalg.norm((jac - jac2)[keep], ord=2, axis=(1, 2)) / gap[keep]
        B_tilde_hat = sup_jac + (float(np.max(lips)) if lips.size else 0.0)

    if grad_bound is None:
        a_c = np.tile(problem.action_center, (n_samples, 1))
        forcing_l2 = np.sqrt(
            problem.domain_volume * float(np.mean(problem.cost(xs, a_c) ** 2))
        )
        M = C_lambda * forcing_l2 if np.isfinite(C_lambda) else float("inf")
        notes.append("grad_bound proxied by C_lambda * ||L(., a_center)||_2")
    else:
        M = float(grad_bound)

    if np.isfinite(M) and mu_a > B_tilde_hat * M:
        theta_hat = B_tilde_hat / (mu_a - B_tilde_hat * M)
    else:
        theta_hat = float("inf")
        if B_tilde_hat > 0.0:
            notes.append("selector-Lipschitz hypothesis mu_a > B_tilde * M fails")
        else:
            theta_hat = 0.0  # drift does not depend on the action
    C_R_hat = theta_hat * (L_a_hat + B_tilde_hat * M) if np.isfinite(theta_hat) else float("inf")
    if margin > 0.0 and np.isfinite(C_R_hat):
        kappa_tilde = float(np.sqrt(C_R_hat ** 2 / (nu * margin)))
    else:
        kappa_tilde = float("inf")

    return TheoryConstants(
        B_hat=B_hat,
        nu=nu,
        Lam=lam_max,
        mu_a=mu_a,
        C_lambda=float(C_lambda),
        lambda_margin=float(margin),
        L_a_hat=L_a_hat,
        B_tilde_hat=B_tilde_hat,
        grad_bound=float(M),
        theta_hat=float(theta_hat),
        C_R_hat=float(C_R_hat),
        kappa_tilde_bound=kappa_tilde,
        valid=valid,
        notes=tuple(notes),
    )
