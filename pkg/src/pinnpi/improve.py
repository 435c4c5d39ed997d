"""Pointwise greedy policy improvement over the box action set.

The improved policy maximizes a |-> L(x, a) + b(x, a) . z over the box,
where z is the current value gradient.  Two routes:

* closed form for drift f(x) + G(x) a with diagonal R: the objective is
  separable per coordinate, so the unconstrained maximizer
  a = (1/2) R^-1 G(x)' z clamped coordinatewise is exact;
* projected gradient ascent with backtracking for everything else
  (non-diagonal R makes plain clamping inexact, so those problems are
  routed here automatically).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import StructureError


@dataclass
class SolverConfig:
    max_iter: int = 100
    tol: float = 1e-8
    backtrack_max: int = 40


def greedy_objective(problem, X, A, Z) -> np.ndarray:
    """L(x, a) + b(x, a) . z, rowwise."""
    return problem.cost(X, A) + np.sum(problem.drift(X, A) * Z, axis=1)


def greedy_action_closed_form(problem, x, grad_v) -> np.ndarray:
    """Exact boxed maximizer for affine drift and diagonal R."""
    if problem.affine is None or not problem.affine.r_diagonal:
        raise StructureError(
            "closed-form improvement needs affine drift and diagonal R"
        )
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Z = np.atleast_2d(np.asarray(grad_v, dtype=float))
    G = problem.affine.G(X)                      # (n, d, m)
    c = np.einsum("ndm,nd->nm", G, Z)            # G' z
    a = problem.clamp_actions(0.5 * c / np.diag(problem.affine.R))
    return a[0] if np.asarray(x).ndim == 1 else a


def _objective_grad(problem, X, A, Z):
    if problem.affine is not None:
        G = problem.affine.G(X)
        return -2.0 * A @ problem.affine.R.T + np.einsum("ndm,nd->nm", G, Z)
    # general problems: central differences in the action
    grad = np.zeros_like(A)
    for j in range(problem.action_dim):
        h = 1e-6 * (1.0 + np.abs(A[:, j]))
        Ap, Am = A.copy(), A.copy()
        Ap[:, j] += h
        Am[:, j] -= h
        grad[:, j] = (
            greedy_objective(problem, X, Ap, Z) - greedy_objective(problem, X, Am, Z)
        ) / (2.0 * h)
    return grad


def _smoothness_estimate(problem, X, A, Z):
    if problem.affine is not None:
        ev = np.linalg.eigvalsh(problem.affine.R)
        return 2.0 * float(ev.max()), 2.0 * float(ev.min())
    # coordinatewise curvature probe at the initial actions
    curv = 0.0
    f0 = greedy_objective(problem, X, A, Z)
    for j in range(problem.action_dim):
        h = 1e-4 * (problem.action_box[j, 1] - problem.action_box[j, 0])
        Ap, Am = A.copy(), A.copy()
        Ap[:, j] += h
        Am[:, j] -= h
        second = (
            greedy_objective(problem, X, Ap, Z) + greedy_objective(problem, X, Am, Z)
            - 2.0 * f0
        ) / h ** 2
        curv = max(curv, float(np.max(np.abs(second))))
    return max(curv, 1e-8), 0.0


def greedy_action_projected(problem, x, grad_v, cfg: Optional[SolverConfig] = None,
                            init=None) -> np.ndarray:
    """Projected gradient ascent on the greedy objective.

    Terminates when the projected-gradient norm drops below cfg.tol at
    every point or after cfg.max_iter sweeps; non-convergence returns the
    best iterates with a warning.  Ascent is monotone (backtracking), so
    starting from a previous policy's actions never loses objective value.
    """
    cfg = cfg or SolverConfig()
    single = np.asarray(x).ndim == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Z = np.atleast_2d(np.asarray(grad_v, dtype=float))
    n = X.shape[0]
    if init is None:
        A = np.tile(problem.action_center, (n, 1))
    else:
        A = problem.clamp_actions(np.atleast_2d(np.asarray(init, dtype=float)).copy())
        if A.shape[0] == 1 and n > 1:
            A = np.tile(A, (n, 1))

    smooth, mu = _smoothness_estimate(problem, X, A, Z)
    step = 1.0 / (mu + smooth)
    quadratic = problem.affine is not None  # exact gradient, step <= 1/L: monotone
    f = None if quadratic else greedy_objective(problem, X, A, Z)
    converged = np.zeros(n, dtype=bool)

    for _ in range(cfg.max_iter):
        g = _objective_grad(problem, X, A, Z)
        A_try = problem.clamp_actions(A + step * g)
        pg_norm = np.linalg.norm(A - A_try, axis=1) / step
        converged = pg_norm < cfg.tol
        if np.all(converged):
            break
        if quadratic:
            A = A_try
            continue
        f_try = greedy_objective(problem, X, A_try, Z)
        slack = 1e-12 * (1.0 + np.abs(f))  # roundoff-level acceptance
        worse = f_try < f - slack
        scale = np.ones(n)
        for _ in range(cfg.backtrack_max):
            if not np.any(worse):
                break
            scale[worse] *= 0.5
            A_try[worse] = problem.clamp_actions(
                A[worse] + (scale[worse, None] * step) * g[worse]
            )
            f_try[worse] = greedy_objective(problem, X[worse], A_try[worse], Z[worse])
            worse = f_try < f - slack
        keep = ~worse
        A[keep] = A_try[keep]
        f[keep] = np.maximum(f[keep], f_try[keep])
    else:
        if not np.all(converged):
            warnings.warn(
                f"projected ascent hit max_iter={cfg.max_iter} with "
                f"{int(np.sum(~converged))}/{n} points above tol"
            )
    return A[0] if single else A


def greedy_actions(problem, X, Z, cfg: Optional[SolverConfig] = None,
                   init=None) -> np.ndarray:
    """Route to the exact closed form when admissible, else ascend."""
    if problem.affine is not None and problem.affine.r_diagonal:
        return greedy_action_closed_form(problem, X, Z)
    return greedy_action_projected(problem, X, Z, cfg=cfg, init=init)


class PolicyHandle:
    """A policy x -> a, either an explicit function or a greedy selector.

    Output is always hard-projected into the action box.  Greedy handles
    snapshot the network parameters at construction so that later training
    of the same network object cannot silently change a frozen policy.
    """

    def __init__(self, fn: Callable, problem, label: str):
        self._fn = fn
        self._problem = problem
        self.label = label

    def __call__(self, x) -> np.ndarray:
        single = np.asarray(x).ndim == 1
        X = np.atleast_2d(np.asarray(x, dtype=float))
        a = self._problem.clamp_actions(np.atleast_2d(self._fn(X)))
        return a[0] if single else a

    def __repr__(self):
        return f"PolicyHandle({self.label!r})"

    @classmethod
    def constant(cls, problem, action=None, label="constant"):
        a0 = problem.action_center if action is None else np.asarray(action, float)

        def fn(X):
            return np.tile(a0, (X.shape[0], 1))

        return cls(fn, problem, label)

    @classmethod
    def from_function(cls, problem, fn, label="explicit"):
        return cls(fn, problem, label)

    @classmethod
    def greedy(cls, net, problem, cfg: Optional[SolverConfig] = None,
               label=None, init_policy=None):
        frozen = net.copy()

        def fn(X):
            _, grad = frozen.value_and_grad(X)
            init = init_policy(X) if init_policy is not None else None
            return greedy_actions(problem, X, grad, cfg=cfg, init=init)

        handle = cls(fn, problem, label or "greedy")
        handle.net = frozen
        return handle


def policy_sup_distance(p1, p2, probe_points) -> float:
    """Empirical sup over probes of the max-abs action difference."""
    probe_points = np.atleast_2d(np.asarray(probe_points, dtype=float))
    if probe_points.shape[0] == 0:
        raise ValueError("probe_points must be nonempty")
    a1 = np.atleast_2d(p1(probe_points))
    a2 = np.atleast_2d(p2(probe_points))
    return float(np.max(np.abs(a1 - a2)))


def selector_lipschitz_probe(problem, x, z_pairs,
                             cfg: Optional[SolverConfig] = None) -> float:
    """Empirical Lipschitz ratio of the greedy selector in the gradient.

    z_pairs is a (k, 2, d) array; each pair must have z != z'.
    """
    z_pairs = np.asarray(z_pairs, dtype=float)
    if z_pairs.ndim != 3 or z_pairs.shape[1] != 2:
        raise ValueError("z_pairs must have shape (k, 2, d)")
    gaps = np.linalg.norm(z_pairs[:, 0] - z_pairs[:, 1], axis=1)
    if np.any(gaps == 0.0):
        raise ValueError("z pairs must be distinct")
    x = np.asarray(x, dtype=float)
    k = z_pairs.shape[0]
    X = np.tile(x, (k, 1))
    cfg = cfg or SolverConfig(max_iter=2000, tol=1e-10)
    a0 = greedy_actions(problem, X, z_pairs[:, 0], cfg=cfg)
    a1 = greedy_actions(problem, X, z_pairs[:, 1], cfg=cfg)
    return float(np.max(np.linalg.norm(a0 - a1, axis=1) / gaps))
