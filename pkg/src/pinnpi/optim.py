"""Adam on flat parameter vectors, plus the cosine step-size schedule."""

import numpy as np


class Adam:
    def __init__(self, n_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)

    def step(self, theta, grad, lr):
        """Update theta in place with one bias-corrected Adam step."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return theta


def cosine_lr(step, total_steps, lr0, lr_final):
    """Cosine decay from lr0 to lr_final over total_steps."""
    if total_steps <= 1:
        return lr0
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + np.cos(np.pi * frac))
