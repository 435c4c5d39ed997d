"""Independent reference solvers and L2 comparison utilities.

Two oracles:

* a discounted algebraic Riccati solve for unconstrained LQR.  Plugging
  V(x) = -x'Px + c into the unconstrained equation gives the shifted ARE
      (A - (lam/2) I)' P + P (A - (lam/2) I) - P B R^-1 B' P + Q = 0,
  with c = -tr(sigma sigma' P) / lam and u*(x) = -R^-1 B' P x.  Solved by
  Newton-Kleinman iteration on Lyapunov equations.

* exact Howard iteration on 1D/2D grids: the policy-frozen equation is
  discretized with donor-cell upwind advection and centered diffusion,
  solved directly, and the nodal policy is improved against the *discrete*
  objective.  The upwind choice keeps the operator an M-matrix, and the old
  action is always among the improvement candidates, so nodal values are
  provably non-decreasing across sweeps (up to solve roundoff).

The grid lives on a box enlarged by `margin` per axis relative to the
problem domain; boundary closure drops the normal second difference (zero
second derivative, i.e. linear extrapolation) and zeroes outflow advection
(constant extrapolation), which localizes truncation error away from the
evaluation region.  Comparisons are meant to be made on the domain only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .errors import OracleError
from .improve import SolverConfig, greedy_actions

_DIRECT_SOLVE_LIMIT = 100_000


# ---------------------------------------------------------------------------
# discounted Riccati
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RiccatiSolution:
    """Unconstrained-LQR reference: V(x) = -x'Px + c, u*(x) = -R^-1 B'P x."""

    P: np.ndarray
    c: float
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    discount: float
    sigma: np.ndarray
    residual_trace: tuple = ()  # Frobenius ARE residual per Newton step

    def value(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return -np.einsum("ni,ij,nj->n", X, self.P, X) + self.c

    def grad(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return -2.0 * X @ self.P.T

    def policy(self, X) -> np.ndarray:
        K = np.linalg.solve(self.R, self.B.T @ self.P)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return -X @ K.T

    def forward_bundle(self, X, sigma_sq, need_full_hessian=False):
        """Derivative-bundle interface shared with the value network."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        out = {
            "value": self.value(X),
            "grad": self.grad(X),
            "wtrace": np.full(n, -2.0 * float(np.sum(sigma_sq * self.P))),
        }
        if need_full_hessian:
            out["hessian"] = np.broadcast_to(-2.0 * self.P, (n,) + self.P.shape)
        return out

    def hjb_residual(self, X) -> np.ndarray:
        """Residual of the unconstrained nonlinear equation at X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lam = self.discount
        sig_sq = self.sigma @ self.sigma.T
        grad = self.grad(X)
        trace = -2.0 * float(np.sum(sig_sq * self.P))
        drift_x = X @ self.A.T
        u = self.policy(X)
        hamil = (
            np.sum((drift_x + u @ self.B.T) * grad, axis=1)
            - np.einsum("ni,ij,nj->n", X, self.Q, X)
            - np.einsum("ni,ij,nj->n", u, self.R, u)
        )
        return lam * self.value(X) - 0.5 * trace - hamil


def _is_hurwitz(M) -> bool:
    return bool(np.max(np.linalg.eigvals(M).real) < 0.0)


def _stabilizing_gain(Abar, B) -> np.ndarray:
    """Bass-type gain: K = B' X^-1 with (Abar+beta I)X + X(Abar+beta I)' = 2BB'."""
    beta = float(np.linalg.norm(Abar, ord="fro")) + 0.5
    try:
        X = sla.solve_continuous_lyapunov(-(Abar + beta * np.eye(Abar.shape[0])),
                                          -2.0 * B @ B.T)
        K = np.linalg.solve(X, B).T
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"stabilizing gain construction failed: {exc}") from exc
    if not _is_hurwitz(Abar - B @ K):
        raise OracleError("system appears non-stabilizable after eigenvalue shift")
    return K


def solve_riccati_discounted(A, B, Q, R, discount, sigma,
                             tol=1e-10, max_iter=100) -> RiccatiSolution:
    """Newton-Kleinman solve of the shifted ARE to Frobenius residual < tol."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = A.shape[0]
    Abar = A - 0.5 * discount * np.eye(d)
    if np.linalg.eigvalsh(R).min() <= 0.0:
        raise OracleError("R must be positive definite")

    K = np.zeros((B.shape[1], d))
    if not _is_hurwitz(Abar):
        K = _stabilizing_gain(Abar, B)

    P = np.zeros((d, d))
    residuals = []
    for _ in range(max_iter):
        Acl = Abar - B @ K
        P = sla.solve_continuous_lyapunov(Acl.T, -(Q + K.T @ R @ K))
        P = 0.5 * (P + P.T)
        K = np.linalg.solve(R, B.T @ P)
        res = Abar.T @ P + P @ Abar - P @ B @ K + Q
        residuals.append(float(np.linalg.norm(res, ord="fro")))
        if residuals[-1] < tol:
            break
    else:
        raise OracleError(
            f"Newton-Kleinman failed to reach residual {tol:g}; "
            f"last residual {residuals[-1]:.3e}"
        )
    if np.linalg.eigvalsh(P).min() < -1e-10:
        raise OracleError("Riccati solution is not positive semidefinite")
    c = -float(np.sum((sigma @ sigma.T) * P)) / discount
    return RiccatiSolution(P=P, c=c, A=A, B=B, Q=Q, R=R,
                           discount=float(discount), sigma=sigma,
                           residual_trace=tuple(residuals))


# ---------------------------------------------------------------------------
# grid solver
# ---------------------------------------------------------------------------

@dataclass
class GridConfig:
    nodes_per_axis: int = 201
    margin: float = 0.5          # enlarge each half-width by this fraction
    tol: float = 1e-8            # sup-norm stopping for Howard sweeps
    max_sweeps: int = 60
    monotone_tol: float = 1e-9


@dataclass
class GridSolution:
    axes: list                   # per-axis node arrays
    values: np.ndarray           # nd nodal array
    policy_values: np.ndarray    # (n_nodes, m)
    domain: np.ndarray           # (d, 2) evaluation region
    sweep_values: list = field(default_factory=list)  # domain-restricted snapshots
    sup_changes: list = field(default_factory=list)
    monotone_ok: bool = True
    refined: bool = False

    @property
    def shape(self):
        return tuple(len(ax) for ax in self.axes)

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def domain_mask(self, pts=None) -> np.ndarray:
        pts = self.nodes() if pts is None else np.atleast_2d(pts)
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def value(self, X) -> np.ndarray:
        interp = RegularGridInterpolator(
            self.axes, self.values, method="linear",
            bounds_error=False, fill_value=None,
        )
        return np.asarray(interp(np.atleast_2d(np.asarray(X, dtype=float))))

    def save(self, path) -> None:
        arrays = {f"axis{k}": ax for k, ax in enumerate(self.axes)}
        np.savez(
            path,
            values=self.values,
            policy_values=self.policy_values,
            domain=self.domain,
            n_axes=np.array([len(self.axes)]),
            **arrays,
        )

    @classmethod
    def load(cls, path) -> "GridSolution":
        with np.load(path, allow_pickle=False) as data:
            n_axes = int(data["n_axes"][0])
            axes = [data[f"axis{k}"] for k in range(n_axes)]
            return cls(
                axes=axes,
                values=data["values"],
                policy_values=data["policy_values"],
                domain=data["domain"],
            )


def _grid_axes(problem, cfg: GridConfig):
    axes = []
    for k in range(problem.state_dim):
        lo, hi = problem.domain[k]
        center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        half *= 1.0 + cfg.margin
        axes.append(np.linspace(center - half, center + half, cfg.nodes_per_axis))
    return axes


def _assemble(problem, axes, actions):
    """Sparse operator and forcing of the frozen-policy equation.

    Row structure: lam on the diagonal plus nonnegative outflow rates, with
    nonpositive off-diagonal coupling; dropped boundary terms keep weak
    diagonal dominance, so the matrix is a nonsingular M-matrix whenever
    sigma sigma' is diagonal.
    """
    shape = tuple(len(ax) for ax in axes)
    d = len(axes)
    n_nodes = int(np.prod(shape))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    h = np.array([ax[1] - ax[0] for ax in axes])
    strides = np.array(
        [int(np.prod(shape[k + 1:])) for k in range(d)], dtype=np.int64
    )
    multi = np.unravel_index(np.arange(n_nodes), shape)
    sig = problem.sigma_sq

    rows, cols, vals = [], [], []
    diag = np.full(n_nodes, problem.discount)

    def add(rsel, csel, v):
        rows.append(rsel)
        cols.append(csel)
        vals.append(v)

    b = problem.drift(pts, actions)
    for k in range(d):
        idx_k = multi[k]
        ck = 0.5 * sig[k, k] / h[k] ** 2
        interior = (idx_k > 0) & (idx_k < shape[k] - 1)
        where = np.flatnonzero(interior)
        if ck > 0.0 and where.size:
            diag[where] += 2.0 * ck
            add(where, where + strides[k], np.full(where.size, -ck))
            add(where, where - strides[k], np.full(where.size, -ck))
        bp = np.maximum(b[:, k], 0.0)
        bm = np.maximum(-b[:, k], 0.0)
        up = np.flatnonzero((idx_k < shape[k] - 1) & (bp > 0.0))
        if up.size:
            diag[up] += bp[up] / h[k]
            add(up, up + strides[k], -bp[up] / h[k])
        dn = np.flatnonzero((idx_k > 0) & (bm > 0.0))
        if dn.size:
            diag[dn] += bm[dn] / h[k]
            add(dn, dn - strides[k], -bm[dn] / h[k])

    cross_terms = False
    for k in range(d):
        for l in range(k + 1, d):
            if sig[k, l] == 0.0:
                continue
            cross_terms = True
            coef = sig[k, l] / (4.0 * h[k] * h[l])
            both = np.flatnonzero(
                (multi[k] > 0) & (multi[k] < shape[k] - 1)
                & (multi[l] > 0) & (multi[l] < shape[l] - 1)
            )
            for sk, sl, sign in [(1, 1, -1.0), (-1, -1, -1.0),
                                 (1, -1, 1.0), (-1, 1, 1.0)]:
                add(both, both + sk * strides[k] + sl * strides[l],
                    np.full(both.size, sign * coef))

    rows.append(np.arange(n_nodes))
    cols.append(np.arange(n_nodes))
    vals.append(diag)
    op = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_nodes, n_nodes),
    )
    rhs = problem.cost(pts, actions)
    return op, rhs, pts, cross_terms


def _solve_sparse(op, rhs):
    n = op.shape[0]
    if n <= _DIRECT_SOLVE_LIMIT:
        v = spla.spsolve(op.tocsc(), rhs)
    else:
        v, info = spla.lgmres(op, rhs, rtol=1e-10, atol=0.0, maxiter=2000)
        if info != 0:
            raise OracleError(f"iterative grid solve failed (info={info})")
    if not np.all(np.isfinite(v)):
        raise OracleError("grid solve produced non-finite values")
    return v


def solve_frozen_policy(problem, policy, cfg: Optional[GridConfig] = None,
                        axes=None) -> GridSolution:
    """Direct grid solve of the linear equation for one frozen policy."""
    cfg = cfg or GridConfig()
    if problem.state_dim > 2:
        raise OracleError("grid solver supports state_dim <= 2")
    axes = axes if axes is not None else _grid_axes(problem, cfg)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    actions = problem.clamp_actions(np.atleast_2d(policy(pts)))
    op, rhs, _, _ = _assemble(problem, axes, actions)
    v = _solve_sparse(op, rhs)
    shape = tuple(len(ax) for ax in axes)
    return GridSolution(
        axes=axes,
        values=v.reshape(shape),
        policy_values=actions,
        domain=problem.domain.copy(),
    )


def _nodal_gradients(values_nd, axes):
    grads = np.gradient(values_nd, *axes, edge_order=2)
    if len(axes) == 1:
        grads = [grads]
    return np.stack([g.ravel() for g in grads], axis=1)


def _one_sided_diffs(values_nd, axes):
    """Forward/backward differences per axis, zero where the neighbor is missing."""
    d = len(axes)
    v = values_nd
    fwd, bwd = [], []
    for k in range(d):
        h = axes[k][1] - axes[k][0]
        dv = np.diff(v, axis=k) / h
        pad_hi = [(0, 0)] * d
        pad_hi[k] = (0, 1)
        fwd.append(np.pad(dv, pad_hi).ravel())
        pad_lo = [(0, 0)] * d
        pad_lo[k] = (1, 0)
        bwd.append(np.pad(dv, pad_lo).ravel())
    return np.stack(fwd, axis=1), np.stack(bwd, axis=1)


def _discrete_objective(problem, pts, actions, fwd, bwd):
    b = problem.drift(pts, actions)
    bp = np.maximum(b, 0.0)
    bm = np.maximum(-b, 0.0)
    return problem.cost(pts, actions) + np.sum(bp * fwd - bm * bwd, axis=1)


def _improve_nodal_policy(problem, pts, values_nd, axes, old_actions, solver_cfg):
    """Maximize the discrete upwind objective over a small candidate set.

    Candidates: the continuous greedy action for the centered gradient,
    for every upwind-consistent sign-pattern gradient, and the old action.
    Keeping the old action in the set guarantees nodal improvement of the
    discrete objective, which is what makes Howard sweeps monotone.
    """
    d = len(axes)
    fwd, bwd = _one_sided_diffs(values_nd, axes)
    cand = [old_actions, greedy_actions(problem, pts, _nodal_gradients(values_nd, axes),
                                        cfg=solver_cfg, init=old_actions)]
    for pattern in itertools.product((True, False), repeat=d):
        g = np.stack(
            [fwd[:, k] if up else bwd[:, k] for k, up in enumerate(pattern)],
            axis=1,
        )
        cand.append(greedy_actions(problem, pts, g, cfg=solver_cfg, init=old_actions))
    scores = np.stack(
        [_discrete_objective(problem, pts, a, fwd, bwd) for a in cand], axis=0
    )
    best = np.argmax(scores, axis=0)
    out = old_actions.copy()
    for i, a in enumerate(cand):
        sel = best == i
        out[sel] = a[sel]
    return out


def grid_howard_pi(problem, cfg: Optional[GridConfig] = None,
                   solver_cfg: Optional[SolverConfig] = None) -> GridSolution:
    """Exact Howard iteration on the grid: solve, improve, repeat.

    Stops when the sup change of nodal values drops below cfg.tol.  A
    monotonicity violation beyond cfg.monotone_tol on domain nodes flags
    the discretization (non-M-matrix, e.g. strong diffusion cross terms)
    and triggers a single automatic grid refinement.
    """
    cfg = cfg or GridConfig()
    if problem.state_dim > 2:
        raise OracleError("grid solver supports state_dim <= 2")
    solver_cfg = solver_cfg or SolverConfig(max_iter=500, tol=1e-10)

    def run(local_cfg):
        axes = _grid_axes(problem, local_cfg)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        shape = tuple(len(ax) for ax in axes)
        dom_mask = np.all(
            (pts >= problem.domain[:, 0]) & (pts <= problem.domain[:, 1]), axis=1
        )
        actions = np.tile(problem.action_center, (pts.shape[0], 1))
        values = None
        sweep_values, sup_changes = [], []
        monotone_ok = True
        for _ in range(local_cfg.max_sweeps):
            op, rhs, _, cross = _assemble(problem, axes, actions)
            v = _solve_sparse(op, rhs)
            if values is not None:
                change = v - values
                sup_changes.append(float(np.max(np.abs(change))))
                if np.min(change[dom_mask]) < -local_cfg.monotone_tol:
                    monotone_ok = False
                if sup_changes[-1] < local_cfg.tol:
                    values = v
                    sweep_values.append(v[dom_mask].copy())
                    break
            values = v
            sweep_values.append(v[dom_mask].copy())
            actions = _improve_nodal_policy(
                problem, pts, values.reshape(shape), axes, actions, solver_cfg
            )
        sol = GridSolution(
            axes=axes,
            values=values.reshape(shape),
            policy_values=actions,
            domain=problem.domain.copy(),
            sweep_values=sweep_values,
            sup_changes=sup_changes,
            monotone_ok=monotone_ok,
        )
        return sol

    sol = run(cfg)
    if not sol.monotone_ok:
        refined = GridConfig(
            nodes_per_axis=2 * cfg.nodes_per_axis - 1,
            margin=cfg.margin,
            tol=cfg.tol,
            max_sweeps=cfg.max_sweeps,
            monotone_tol=cfg.monotone_tol,
        )
        sol = run(refined)
        sol.refined = True
    return sol


# ---------------------------------------------------------------------------
# L2 comparison
# ---------------------------------------------------------------------------

class L2Distance(NamedTuple):
    value: float
    stderr: float


def l2_distance(f, g, domain, m=4096, seed=0) -> L2Distance:
    """Monte-Carlo domain L2 distance between two scalar fields.

    f and g map (n, d) arrays to (n,) arrays; returns the estimate of
    sqrt(vol * mean (f-g)^2) with its delta-method standard error.
    """
    if m < 1000:
        raise ValueError("m must be >= 1000")
    domain = np.atleast_2d(np.asarray(domain, dtype=float))
    rng = np.random.default_rng(seed)
    lo, hi = domain[:, 0], domain[:, 1]
    pts = lo + (hi - lo) * rng.random((m, domain.shape[0]))
    vol = float(np.prod(hi - lo))
    sq = (np.asarray(f(pts)) - np.asarray(g(pts))) ** 2
    mean = float(np.mean(sq))
    value = float(np.sqrt(vol * mean))
    if value == 0.0:
        return L2Distance(0.0, 0.0)
    se_mean = float(np.std(sq, ddof=1) / np.sqrt(m))
    return L2Distance(value, vol * se_mean / (2.0 * value))
