"""Smooth feedforward value approximator with exact derivative propagation.

The residual of the policy-frozen linear equation needs v, its spatial
gradient, and the sigma sigma'-weighted trace of its Hessian at every
collocation point, plus the gradient of the squared-residual loss with
respect to every network parameter.  All of it is computed in closed form:

* forward pass propagates, layer by layer, the triple
    z  (n, w)      activations,
    J  (d, n, w)   Jacobians d z / d x_k, one (n, w) slab per coordinate,
    S  (n, w)      the Sigma-weighted Hessian trace sum_kl Sigma_kl d2 z,
  which is closed under affine maps and C^2 elementwise activations;
* the loss gradient reverse-accumulates exact adjoints through the same
  recursions.  No finite differencing anywhere in the production path.

tanh is the only activation offered: the trace term requires two continuous
derivatives, which rules out piecewise-linear choices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericalError

_CHECKPOINT_VERSION = 1


def _tanh_derivs(u, order=2):
    t = np.tanh(u)
    p1 = 1.0 - t * t
    p2 = -2.0 * t * p1
    if order < 3:
        return t, p1, p2, None
    p3 = p1 * (6.0 * t * t - 2.0)
    return t, p1, p2, p3


@dataclass
class DerivativeBundle:
    value: float
    grad: np.ndarray
    weighted_trace: float
    hessian: Optional[np.ndarray] = None


class ValueNet:
    """Multilayer perceptron with tanh hidden layers and a linear output.

    `output_scale` multiplies the raw network output so that value
    functions far from unit scale stay trainable with standard step sizes.
    """

    def __init__(self, widths, weights, biases, activation="tanh",
                 output_scale=1.0):
        if activation != "tanh":
            raise ValueError("only the tanh activation is supported")
        if widths[-1] != 1:
            raise ValueError("output width must be 1")
        if any(w < 1 for w in widths):
            raise ValueError("all widths must be >= 1")
        self.widths = list(int(w) for w in widths)
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.activation = activation
        self.output_scale = float(output_scale)

    @property
    def state_dim(self):
        return self.widths[0]

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    # -- flat parameter vector --------------------------------------------
    def get_flat(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([w.ravel(), b.ravel()])
             for w, b in zip(self.weights, self.biases)]
        )

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError("parameter vector has wrong length")
        k = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[k:k + w.size].reshape(w.shape).copy()
            k += w.size
            self.biases[i] = theta[k:k + b.size].reshape(b.shape).copy()
            k += b.size

    def copy(self) -> "ValueNet":
        return ValueNet(
            self.widths,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.output_scale,
        )

    # -- forward passes -----------------------------------------------------
    def values(self, X) -> np.ndarray:
        z = np.asarray(X, dtype=float)
        last = self.n_layers - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = z @ W.T + b
            if i < last:
                z = np.tanh(z)
        return self.output_scale * z[:, 0]

    def value_and_grad(self, X):
        """Values and spatial gradients, skipping all second-order work."""
        X = np.asarray(X, dtype=float)
        n, d = X.shape
        z = X
        J = np.broadcast_to(np.eye(d)[:, None, :], (d, n, d)).copy()
        last = self.n_layers - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = z @ W.T + b
            J = J @ W.T
            if i < last:
                t = np.tanh(z)
                J = J * (1.0 - t * t)
                z = t
        s = self.output_scale
        return s * z[:, 0], s * J[:, :, 0].T

    def forward_bundle(self, X, sigma_sq, need_full_hessian=False):
        """Values, gradients, Sigma-weighted Hessian traces for a batch.

        Returns (value (n,), grad (n, d), wtrace (n,)) plus the full
        (n, d, d) Hessian when requested.
        """
        X = np.asarray(X, dtype=float)
        n, d = X.shape
        Sig = np.asarray(sigma_sq, dtype=float)
        diag_only = np.allclose(Sig, np.diag(np.diag(Sig)))
        sdiag = np.diag(Sig)

        z = X
        J = np.broadcast_to(np.eye(d)[:, None, :], (d, n, d)).copy()
        S = np.zeros((n, d))
        H = np.zeros((d, d, n, d)) if need_full_hessian else None
        last = self.n_layers - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = z @ W.T + b
            J = J @ W.T
            S = S @ W.T
            if H is not None:
                H = H @ W.T
            if i < last:
                t, p1, p2, _ = _tanh_derivs(z)
                if diag_only:
                    q = np.einsum("k,kno->no", sdiag, J * J)
                else:
                    JS = np.tensordot(Sig, J, axes=(1, 0))
                    q = np.einsum("kno,kno->no", J, JS)
                S = p2 * q + p1 * S
                if H is not None:
                    H = p2 * J[:, None] * J[None, :] + p1 * H
                J = J * p1
                z = t
        s = self.output_scale
        out = {
            "value": s * z[:, 0],
            "grad": s * J[:, :, 0].T,
            "wtrace": s * S[:, 0],
        }
        if H is not None:
            out["hessian"] = s * np.moveaxis(H[:, :, :, 0], 2, 0)
        return out


def init_network(widths, seed=0, output_scale=1.0) -> ValueNet:
    """Xavier-uniform weights, zero biases, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ValueNet(widths, weights, biases, output_scale=output_scale)


def default_widths(state_dim) -> list:
    hidden = 64 if state_dim <= 5 else 128
    return [state_dim, hidden, hidden, hidden, 1]


def eval_bundle(net, x, sigma_sq, need_full_hessian=False) -> DerivativeBundle:
    """Single-point derivative bundle (value, gradient, weighted trace)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    out = net.forward_bundle(x.reshape(1, -1), sigma_sq,
                             need_full_hessian=need_full_hessian)
    return DerivativeBundle(
        value=float(out["value"][0]),
        grad=out["grad"][0],
        weighted_trace=float(out["wtrace"][0]),
        hessian=out["hessian"][0] if need_full_hessian else None,
    )


# ---------------------------------------------------------------------------
# residuals and the loss gradient
# ---------------------------------------------------------------------------

def residual_batch(net, problem, X, A) -> np.ndarray:
    """r = lambda v - 1/2 tr(sigma sigma' D^2 v) - b . grad v - L, rowwise.

    `net` may be any object exposing forward_bundle (the Riccati reference
    solution does, which lets the same code check closed-form values).
    """
    out = net.forward_bundle(X, problem.sigma_sq)
    b = problem.drift(X, A)
    L = problem.cost(X, A)
    return (
        problem.discount * out["value"]
        - 0.5 * out["wtrace"]
        - np.sum(b * out["grad"], axis=1)
        - L
    )


def residual_at(net, problem, x, a) -> float:
    return float(
        residual_batch(net, problem, np.asarray(x, float).reshape(1, -1),
                       np.asarray(a, float).reshape(1, -1))[0]
    )


def loss_and_param_grad(net, problem, X, A, chunk=2048):
    """Mean squared residual over the batch and its exact parameter gradient.

    The gradient reverse-accumulates through the (z, J, S) propagation, i.e.
    it differentiates through the value, the spatial gradient, and the
    weighted Hessian trace.  Work is chunked with a fixed reduction order so
    results are independent of chunk size to machine precision ordering.
    """
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=float)
    n_total = X.shape[0]
    if n_total == 0:
        raise ValueError("batch must be nonempty")
    Sig = problem.sigma_sq
    diag_only = np.allclose(Sig, np.diag(np.diag(Sig)))
    sdiag = np.diag(Sig)
    lam = problem.discount
    s = net.output_scale

    gW = [np.zeros_like(w) for w in net.weights]
    gb = [np.zeros_like(b) for b in net.biases]
    sq_residuals = []

    last = net.n_layers - 1
    for start in range(0, n_total, chunk):
        Xc = X[start:start + chunk]
        Ac = A[start:start + chunk]
        n, d = Xc.shape

        # forward, caching what the adjoint recursions need
        z = Xc
        J = np.broadcast_to(np.eye(d)[:, None, :], (d, n, d)).copy()
        S = np.zeros((n, d))
        cache = []
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            z_in, J_in, S_in = z, J, S
            u = z @ W.T + b
            Ju = J @ W.T
            Su = S @ W.T
            if i < last:
                t, p1, p2, p3 = _tanh_derivs(u, order=3)
                if diag_only:
                    JS = sdiag[:, None, None] * Ju
                else:
                    JS = np.tensordot(Sig, Ju, axes=(1, 0))
                q = np.einsum("kno,kno->no", Ju, JS)
                z = t
                J = Ju * p1
                S = p2 * q + p1 * Su
                cache.append((z_in, J_in, S_in, Ju, Su, JS, q, p1, p2, p3))
            else:
                z, J, S = u, Ju, Su
                cache.append((z_in, J_in, S_in, None, None, None, None,
                              None, None, None))

        value = s * z[:, 0]
        grad = s * J[:, :, 0].T
        wtr = s * S[:, 0]
        bdrift = problem.drift(Xc, Ac)
        L = problem.cost(Xc, Ac)
        r = lam * value - 0.5 * wtr - np.sum(bdrift * grad, axis=1) - L
        if not np.all(np.isfinite(r)):
            bad = int(np.argwhere(~np.isfinite(r))[0, 0])
            raise NumericalError(f"non-finite residual at batch index {start + bad}")
        sq_residuals.append(r * r)

        # seeds: d loss / d r = 2 r / n_total, then through the linear map
        # r = lam*s*z - (s/2) S - sum_k b_k s J_k at the output layer
        rbar = (2.0 / n_total) * r
        zbar = (lam * s * rbar)[:, None]
        Jbar = np.empty((d, n, 1))
        Jbar[:, :, 0] = -(s * rbar) * bdrift.T
        Sbar = (-0.5 * s * rbar)[:, None]

        for i in range(last, -1, -1):
            W = net.weights[i]
            (z_in, J_in, S_in, Ju, Su, JS, q, p1, p2, p3) = cache[i]
            if i < last:
                # adjoint of the tanh stage: outputs were
                #   z = t, J = Ju p1, S = p2 q + p1 Su,  q = Ju . (Sig Ju)
                ubar = (
                    zbar * p1
                    + p2 * np.einsum("kno,kno->no", Jbar, Ju)
                    + Sbar * (p3 * q + p2 * Su)
                )
                Jubar = Jbar * p1 + 2.0 * (Sbar * p2) * JS
                Subar = Sbar * p1
            else:
                ubar, Jubar, Subar = zbar, Jbar, Sbar
            gW[i] += (
                ubar.T @ z_in
                + np.einsum("kno,kni->oi", Jubar, J_in)
                + Subar.T @ S_in
            )
            gb[i] += ubar.sum(axis=0)
            if i > 0:
                zbar = ubar @ W
                Jbar = Jubar @ W
                Sbar = Subar @ W

    # fsum keeps the loss exactly invariant under batch reordering
    loss = math.fsum(np.concatenate(sq_residuals).tolist()) / n_total
    grad_flat = np.concatenate(
        [np.concatenate([w.ravel(), b.ravel()]) for w, b in zip(gW, gb)]
    )
    return loss, grad_flat


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: ValueNet, path, extra=None) -> None:
    """Write the versioned tensor dump; `extra` arrays ride along untouched."""
    arrays = {
        "version": np.array([_CHECKPOINT_VERSION]),
        "widths": np.asarray(net.widths),
        "output_scale": np.array([net.output_scale]),
        "activation": np.array([net.activation]),
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    if extra:
        for key, val in extra.items():
            arrays[f"extra_{key}"] = np.asarray(val)
    np.savez(path, **arrays)


def load_checkpoint(path, with_extra=False):
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"][0])
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"unknown checkpoint version {version}")
        widths = [int(w) for w in data["widths"]]
        n_layers = len(widths) - 1
        weights = [data[f"W{i}"] for i in range(n_layers)]
        biases = [data[f"b{i}"] for i in range(n_layers)]
        loaded = ValueNet(
            widths, weights, biases,
            activation=str(data["activation"][0]),
            output_scale=float(data["output_scale"][0]),
        )
        if not with_extra:
            return loaded
        extra = {
            key[len("extra_"):]: data[key]
            for key in data.files
            if key.startswith("extra_")
        }
        return loaded, extra
