"""Policy evaluation: residual-loss training of the value network.

Given a frozen policy, the value network is trained by Adam to minimize the
mean squared residual of the linear policy-frozen equation over collocation
points sampled uniformly from the domain.  Training certifies itself
against a held-out probe set: the reported residual_l2_estimate is the
Monte-Carlo domain L2 norm of the residual, and training stops early once
it reaches the requested tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import TrainingDiverged
from .net import loss_and_param_grad, residual_batch
from .optim import Adam, cosine_lr


@dataclass(frozen=True)
class CollocationBatch:
    points: np.ndarray   # (n, d), inside the domain
    actions: np.ndarray  # (n, m), inside the action box
    seed: int


@dataclass
class TrainReport:
    final_loss: float
    residual_l2_estimate: float
    steps_taken: int
    wall_time: float
    tolerance_met: bool
    p_target: float
    loss_history: np.ndarray = field(default_factory=lambda: np.empty(0))
    probe_history: list = field(default_factory=list)  # (step, residual_l2)


@dataclass
class EvalConfig:
    n_collocation: int = 4096
    steps: int = 5000
    lr: float = 1e-3
    lr_final: float = 1e-4
    p_target: Optional[float] = None  # default 1e-2 * sqrt(vol(domain))
    resample_every: int = 200
    probe_points: int = 8192
    probe_every: int = 200
    chunk: int = 2048
    seed: int = 0

    def resolved_p_target(self, problem):
        if self.p_target is not None:
            return float(self.p_target)
        return 1e-2 * np.sqrt(problem.domain_volume)


def sample_collocation(problem, policy, n, seed) -> CollocationBatch:
    """n i.i.d. uniform domain points with the frozen policy's actions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    points = problem.sample_domain(n, rng)
    actions = problem.clamp_actions(np.atleast_2d(policy(points)))
    return CollocationBatch(points=points, actions=actions, seed=seed)


def residual_l2(net, problem, policy, m, seed) -> float:
    """Monte-Carlo estimate of the domain L2 norm of the residual."""
    if m < 1000:
        raise ValueError("m must be >= 1000")
    batch = sample_collocation(problem, policy, m, seed)
    return residual_l2_on(net, problem, batch.points, batch.actions)


def residual_l2_on(net, problem, points, actions) -> float:
    r = residual_batch(net, problem, points, actions)
    return float(np.sqrt(problem.domain_volume * np.mean(r * r)))


def policy_evaluation_train(net, problem, policy, cfg: EvalConfig,
                            probe_points=None) -> TrainReport:
    """Train `net` in place against the frozen policy's linear equation.

    The probe set is fixed for the whole call (pass one in to share it
    across outer iterations); collocation points are redrawn every
    `resample_every` steps from seeds derived from cfg.seed.  Raises
    TrainingDiverged when the loss exceeds 1e6 x its initial value for 100
    consecutive steps.  Wall time aside, the report is a deterministic
    function of (net, problem, policy, cfg, probe_points).
    """
    t0 = time.perf_counter()
    p_target = cfg.resolved_p_target(problem)
    if probe_points is None:
        rng = np.random.default_rng(_derived_seed(cfg.seed, 1))
        probe_points = problem.sample_domain(cfg.probe_points, rng)
    probe_actions = problem.clamp_actions(np.atleast_2d(policy(probe_points)))

    def probe_residual():
        return residual_l2_on(net, problem, probe_points, probe_actions)

    res = probe_residual()
    probe_history = [(0, res)]
    if res <= p_target:
        return TrainReport(
            final_loss=float(np.mean(residual_batch(
                net, problem, probe_points, probe_actions) ** 2)),
            residual_l2_estimate=res,
            steps_taken=0,
            wall_time=time.perf_counter() - t0,
            tolerance_met=True,
            p_target=p_target,
            probe_history=probe_history,
        )

    theta = net.get_flat()
    adam = Adam(theta.size)
    losses = np.empty(cfg.steps)
    initial_loss = None
    bad_streak = 0
    batch = None
    steps_taken = 0
    resample = cfg.resample_every if cfg.resample_every and cfg.resample_every > 0 else None

    for step in range(cfg.steps):
        if batch is None or (resample is not None and step % resample == 0):
            batch = sample_collocation(
                problem, policy, cfg.n_collocation,
                _derived_seed(cfg.seed, 100 + (step // resample if resample else 0)),
            )
        loss, grad = loss_and_param_grad(
            net, problem, batch.points, batch.actions, chunk=cfg.chunk
        )
        losses[step] = loss
        if initial_loss is None:
            initial_loss = max(loss, 1e-300)
        if loss > 1e6 * initial_loss:
            bad_streak += 1
            if bad_streak >= 100:
                raise TrainingDiverged(
                    f"loss {loss:.3e} exceeded 1e6 x initial for 100 steps",
                    loss_trace=losses[: step + 1],
                )
        else:
            bad_streak = 0
        adam.step(theta, grad, cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_final))
        net.set_flat(theta)
        steps_taken = step + 1
        if (step + 1) % cfg.probe_every == 0 or step + 1 == cfg.steps:
            res = probe_residual()
            probe_history.append((step + 1, res))
            if res <= p_target:
                break

    res = probe_history[-1][1]
    if probe_history[-1][0] != steps_taken:
        res = probe_residual()
        probe_history.append((steps_taken, res))
    return TrainReport(
        final_loss=float(losses[steps_taken - 1]),
        residual_l2_estimate=res,
        steps_taken=steps_taken,
        wall_time=time.perf_counter() - t0,
        tolerance_met=bool(res <= p_target),
        p_target=p_target,
        loss_history=losses[:steps_taken].copy(),
        probe_history=probe_history,
    )


def _derived_seed(seed, offset):
    return (int(seed) * 1000003 + offset) % (2 ** 63 - 1)
