"""Stochastic rollouts and convergence diagnostics.

Rollouts integrate the controlled SDE with Euler-Maruyama and accumulate
the discounted reward with a left-endpoint sum, so the estimator carries an
O(dt) quadrature bias on top of the O(dt) weak integration error.  The
diagnostics summarize outer-iteration traces: monotone-improvement
fraction of probe values and a geometric fit of error sequences with a
floor (the residual-tolerance plateau).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

_BLOWUP_NORM = 1e6


@dataclass
class IterationTrace:
    """Per-outer-iteration diagnostics of a full solver run."""

    ns: list = field(default_factory=list)
    residual_l2: list = field(default_factory=list)
    value_snapshots: list = field(default_factory=list)   # arrays over probes
    policy_sup_dist: list = field(default_factory=list)
    oracle_gap: list = field(default_factory=list)        # grid reference, nan if off
    riccati_gap: list = field(default_factory=list)
    delta_l2: list = field(default_factory=list)          # vs exact frozen-policy solve
    improve_frac: list = field(default_factory=list)
    return_mean: list = field(default_factory=list)
    return_stderr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    CSV_COLUMNS = (
        "n", "residual_l2", "policy_sup_dist", "oracle_gap", "riccati_gap",
        "delta_l2", "improve_frac", "return_mean", "return_stderr",
        "value_probe_mean",
    )

    def append(self, n, residual_l2, value_snapshot, policy_sup_dist,
               oracle_gap=float("nan"), riccati_gap=float("nan"),
               delta_l2=float("nan"), improve_frac=float("nan"),
               return_mean=float("nan"), return_stderr=float("nan"),
               wall_time=0.0):
        if self.ns and n <= self.ns[-1]:
            raise ValueError("iteration indices must be strictly increasing")
        self.ns.append(int(n))
        self.residual_l2.append(float(residual_l2))
        self.value_snapshots.append(np.asarray(value_snapshot, dtype=float))
        self.policy_sup_dist.append(float(policy_sup_dist))
        self.oracle_gap.append(float(oracle_gap))
        self.riccati_gap.append(float(riccati_gap))
        self.delta_l2.append(float(delta_l2))
        self.improve_frac.append(float(improve_frac))
        self.return_mean.append(float(return_mean))
        self.return_stderr.append(float(return_stderr))
        self.wall_time.append(float(wall_time))

    def __len__(self):
        return len(self.ns)

    def csv_rows(self):
        """Deterministic quantities only; timings stay out of the trace file."""
        for i in range(len(self.ns)):
            yield (
                self.ns[i], self.residual_l2[i], self.policy_sup_dist[i],
                self.oracle_gap[i], self.riccati_gap[i], self.delta_l2[i],
                self.improve_frac[i], self.return_mean[i],
                self.return_stderr[i],
                float(np.mean(self.value_snapshots[i])),
            )


class RolloutResult(NamedTuple):
    trajectory: np.ndarray
    discounted_return: float
    truncated: bool


def _simulate_batch(problem, policy, X0, horizon, dt, rng, antithetic=False,
                    record_path=False):
    """Euler-Maruyama ensemble; returns discounted returns (left sum).

    With antithetic=True the ensemble is doubled: paths i and n+i share
    noise with opposite signs.
    """
    X = np.atleast_2d(np.asarray(X0, dtype=float)).copy()
    if antithetic:
        X = np.vstack([X, X])
    n, d = X.shape
    n_steps = int(round(horizon / dt))
    sig_t = problem.sigma.T
    lam = problem.discount
    sq_dt = np.sqrt(dt)
    returns = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    path = [X.copy()] if record_path else None

    for k in range(n_steps):
        a = problem.clamp_actions(np.atleast_2d(policy(X)))
        returns[alive] += (
            np.exp(-lam * k * dt) * problem.cost(X[alive], a[alive]) * dt
        )
        xi = rng.standard_normal((n // 2 if antithetic else n, d))
        if antithetic:
            xi = np.vstack([xi, -xi])
        X[alive] = (
            X[alive]
            + problem.drift(X[alive], a[alive]) * dt
            + (xi[alive] @ sig_t) * sq_dt
        )
        alive &= np.linalg.norm(X, axis=1) <= _BLOWUP_NORM
        if record_path:
            path.append(X.copy())
        if not np.any(alive):
            break
    traj = np.stack(path, axis=1) if record_path else None
    return returns, ~alive, traj


def rollout(problem, policy, x0, horizon, dt, seed=0) -> RolloutResult:
    """One trajectory and its discounted return, reproducible from the seed.

    States whose norm passes 1e6 stop accumulating reward and flag the
    result as truncated.
    """
    if dt <= 0.0 or horizon < dt:
        raise ValueError("need dt > 0 and horizon >= dt")
    rng = np.random.default_rng(seed)
    returns, truncated, traj = _simulate_batch(
        problem, policy, np.asarray(x0, float).reshape(1, -1),
        horizon, dt, rng, record_path=True,
    )
    return RolloutResult(traj[0], float(returns[0]), bool(truncated[0]))


def estimate_value_mc(problem, policy, x0, n_rollouts, horizon, dt, seed=0):
    """Sample mean and standard error of the discounted return from x0.

    Noise is antithetically paired; the stderr comes from the pair means.
    """
    if n_rollouts < 2:
        raise ValueError("n_rollouts must be >= 2")
    n_pairs = (n_rollouts + 1) // 2
    rng = np.random.default_rng(seed)
    X0 = np.tile(np.asarray(x0, dtype=float), (n_pairs, 1))
    returns, _, _ = _simulate_batch(
        problem, policy, X0, horizon, dt, rng, antithetic=True
    )
    pair_means = 0.5 * (returns[:n_pairs] + returns[n_pairs:])
    mean = float(np.mean(pair_means))
    stderr = (
        float(np.std(pair_means, ddof=1) / np.sqrt(n_pairs)) if n_pairs > 1 else 0.0
    )
    return mean, stderr


def monotonicity_report(trace, slack=None) -> float:
    """Fraction of (probe, transition) pairs with v_{n+1} >= v_n - slack.

    `trace` is an IterationTrace or a plain list of per-iteration value
    arrays.  When no slack is given it defaults per transition to twice the
    sum of the adjacent residual norms (zero for plain lists).
    """
    if isinstance(trace, IterationTrace):
        snapshots = trace.value_snapshots
        residuals = trace.residual_l2
    else:
        snapshots = [np.asarray(v, dtype=float) for v in trace]
        residuals = None
    if len(snapshots) < 2:
        raise ValueError("need at least two iterations")
    n_trans = len(snapshots) - 1
    if slack is None:
        if residuals is not None:
            slacks = [2.0 * (residuals[i] + residuals[i + 1]) for i in range(n_trans)]
        else:
            slacks = [0.0] * n_trans
    elif np.isscalar(slack):
        slacks = [float(slack)] * n_trans
    else:
        slacks = list(np.asarray(slack, dtype=float))
        if len(slacks) != n_trans:
            raise ValueError("slack length must match transitions")
    good = 0
    total = 0
    for i in range(n_trans):
        ok = snapshots[i + 1] >= snapshots[i] - slacks[i]
        good += int(np.sum(ok))
        total += ok.size
    return good / total


class RateFit(NamedTuple):
    kappa_hat: float
    floor_estimate: float
    contraction: bool
    n_fit: int


def fit_convergence_rate(errors, floor_window=0) -> RateFit:
    """Geometric-rate fit of an error sequence above an estimated floor.

    floor_window = 0 fits the raw sequence; otherwise the floor is the mean
    of the trailing floor_window values, those indices are excluded, and
    the fit runs on the longest prefix with positive adjusted errors.  A
    sequence with no usable prefix reports kappa_hat = 1 and no contraction.
    """
    errors = np.asarray(errors, dtype=float)
    if errors.size < 4:
        raise ValueError("need at least 4 iterations")
    if floor_window < 0 or floor_window >= errors.size:
        raise ValueError("floor_window must be in [0, len(errors))")
    floor = float(np.mean(errors[-floor_window:])) if floor_window > 0 else 0.0
    usable = errors.size - floor_window
    adjusted = errors[:usable] - floor
    n_fit = 0
    while n_fit < usable and adjusted[n_fit] > 0.0:
        n_fit += 1
    if n_fit < 2:
        return RateFit(1.0, floor, False, n_fit)
    ns = np.arange(n_fit)
    slope = np.polyfit(ns, np.log(adjusted[:n_fit]), 1)[0]
    kappa = float(np.exp(slope))
    return RateFit(kappa, floor, kappa < 1.0, n_fit)
