"""Run driver: configuration, the outer solve loop, and oracle comparison.

A run alternates residual-training policy evaluation with greedy policy
improvement until the empirical policy sup-distance drops below stop_eps
or max_outer is reached, recording per-iteration diagnostics along the way.
Artifacts land in the output directory: trace.csv (deterministic columns
only; timings go to summary.json so byte-level reproducibility holds),
summary.json, per-iteration network checkpoints, and training curves.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import qmc

from . import net as netmod
from . import oracle as oraclemod
from .errors import ConfigError, UnsupportedComparison
from .evaluate import EvalConfig, policy_evaluation_train, _derived_seed
from .improve import (PolicyHandle, SolverConfig, greedy_objective,
                      policy_sup_distance)
from .problems import (CATALOG, make_cartpole, make_constant_cost, make_lqr,
                       make_pendulum, validate_assumptions)
from .sim import IterationTrace, estimate_value_mc, fit_convergence_rate, monotonicity_report


@dataclass
class ProblemConfig:
    name: str = "lqr"
    d: int = 5
    m: Optional[int] = None
    seed: int = 0
    u_max: float = 10.0
    sigma_scale: float = 0.1
    discount: float = 1.0
    c: float = 1.0
    diag_r: bool = False
    domain_halfwidth: float = 3.0


@dataclass
class NetConfig:
    hidden: Optional[list] = None      # default depends on the state dim
    output_scale: Optional[float] = None  # None: match the reward scale


@dataclass
class OuterConfig:
    max_outer: int = 30
    stop_eps: float = 1e-3
    monotone_residual: bool = False   # retrain until p_n <= p_{n-1}
    retry_steps: int = 0
    # optional geometric tolerance schedule p_n = max(p_target, p_start * p_decay^n);
    # p_start_rel scales p_start off the measured pre-training residual instead
    p_start: Optional[float] = None
    p_start_rel: Optional[float] = None
    p_decay: float = 0.5


@dataclass
class OracleCompareConfig:
    riccati: bool = False
    grid: bool = False
    grid_nodes: int = 201
    grid_margin: float = 0.5
    compare_points: int = 4096


@dataclass
class SimRunConfig:
    rollouts_per_iter: int = 0
    horizon: Optional[float] = None   # default 20 / discount
    dt: float = 1e-2
    x0: Optional[list] = None         # default: domain center


@dataclass
class RunConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    net: NetConfig = field(default_factory=NetConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    oracle: OracleCompareConfig = field(default_factory=OracleCompareConfig)
    sim: SimRunConfig = field(default_factory=SimRunConfig)
    seed: int = 0
    outdir: str = "run_out"
    n_value_probes: int = 256
    improve_max_iter: int = 1000
    improve_tol: float = 1e-9
    assumption_samples: int = 5000


_FLAT_PROBLEM_KEYS = {
    "problem": ("name", str),
    "d": ("d", int),
    "m": ("m", int),
    "problem_seed": ("seed", int),
    "u_max": ("u_max", float),
    "sigma_scale": ("sigma_scale", float),
    "lambda": ("discount", float),
    "c": ("c", float),
    "diag_r": ("diag_r", bool),
    "domain_halfwidth": ("domain_halfwidth", float),
}

_GROUP_FIELDS = {
    "net": NetConfig,
    "eval": EvalConfig,
    "outer": OuterConfig,
    "oracle": OracleCompareConfig,
    "sim": SimRunConfig,
}

_GROUP_ATTR = {"net": "net", "eval": "evaluate", "outer": "outer",
               "oracle": "oracle", "sim": "sim"}

_TOP_KEYS = {"seed": int, "outdir": str, "n_value_probes": int,
             "improve_max_iter": int, "improve_tol": float,
             "assumption_samples": int}


def config_from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from flat `key = value` pairs.

    Problem keys are bare (problem, d, m, problem_seed, u_max, sigma_scale,
    lambda, c, diag_r, domain_halfwidth); other groups use dotted prefixes
    (eval.steps, outer.max_outer, oracle.grid, sim.rollouts_per_iter,
    net.hidden).  Unknown keys raise ConfigError.
    """
    cfg = RunConfig()
    for key, value in raw.items():
        if key in _FLAT_PROBLEM_KEYS:
            attr, typ = _FLAT_PROBLEM_KEYS[key]
            setattr(cfg.problem, attr, _coerce(key, value, typ))
        elif key in _TOP_KEYS:
            setattr(cfg, key, _coerce(key, value, _TOP_KEYS[key]))
        elif "." in key:
            group, sub = key.split(".", 1)
            if group not in _GROUP_FIELDS:
                raise ConfigError(f"unknown config group {group!r}")
            target = getattr(cfg, _GROUP_ATTR[group])
            fields = {f.name: f for f in dataclasses.fields(target)}
            if sub not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(target, sub)
            if sub == "hidden":
                setattr(target, sub, [int(v) for v in value])
            elif isinstance(current, bool) or fields[sub].type == "bool":
                setattr(target, sub, _coerce(key, value, bool))
            elif current is None:
                setattr(target, sub, float(value))
            else:
                setattr(target, sub, type(current)(value))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "problem_seed" not in raw:
        cfg.problem.seed = cfg.seed  # problems are addressed by name + seed
    validate_config(cfg)
    return cfg


def _coerce(key, value, typ):
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        raise ConfigError(f"cannot interpret {key}={value!r} as a boolean")
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot interpret {key}={value!r} as {typ.__name__}") from exc


def validate_config(cfg: RunConfig) -> None:
    if cfg.problem.name not in CATALOG:
        raise ConfigError(
            f"unknown problem {cfg.problem.name!r}; catalog: {sorted(CATALOG)}"
        )
    positive = [
        ("d", cfg.problem.d), ("lambda", cfg.problem.discount),
        ("eval.n_collocation", cfg.evaluate.n_collocation),
        ("eval.steps", cfg.evaluate.steps), ("eval.lr", cfg.evaluate.lr),
        ("outer.max_outer", cfg.outer.max_outer),
        ("outer.stop_eps", cfg.outer.stop_eps),
        ("oracle.grid_nodes", cfg.oracle.grid_nodes),
        ("sim.dt", cfg.sim.dt),
    ]
    for name, val in positive:
        if val <= 0:
            raise ConfigError(f"{name} must be positive, got {val}")


def build_problem(cfg: ProblemConfig):
    if cfg.name == "lqr":
        return make_lqr(cfg.d, cfg.m, seed=cfg.seed, u_max=cfg.u_max,
                        sigma_scale=cfg.sigma_scale, discount=cfg.discount,
                        diag_r=cfg.diag_r,
                        domain_halfwidth=cfg.domain_halfwidth)
    if cfg.name == "pendulum":
        return make_pendulum(sigma_scale=cfg.sigma_scale, discount=cfg.discount)
    if cfg.name == "cartpole":
        return make_cartpole(sigma_scale=cfg.sigma_scale, discount=cfg.discount)
    if cfg.name == "constant_cost":
        return make_constant_cost(c=cfg.c, discount=cfg.discount, d=cfg.d,
                                  sigma_scale=cfg.sigma_scale)
    raise ConfigError(f"unknown problem {cfg.name!r}")


def riccati_reference(problem):
    meta = problem.meta
    if not {"A", "B", "Q", "R"} <= set(meta):
        raise UnsupportedComparison(
            f"{problem.name} has no linear-quadratic reference"
        )
    return oraclemod.solve_riccati_discounted(
        meta["A"], meta["B"], meta["Q"], meta["R"],
        problem.discount, problem.sigma,
    )


def inactivity_mask(ric, X, u_max) -> np.ndarray:
    """Points where the unconstrained reference policy respects the box."""
    return np.max(np.abs(ric.policy(X)), axis=1) <= u_max


def _value_probes(problem, n, seed):
    sampler = qmc.Sobol(d=problem.state_dim, scramble=True, seed=seed)
    unit = sampler.random(n)
    lo, hi = problem.domain[:, 0], problem.domain[:, 1]
    return lo + (hi - lo) * unit


def _auto_output_scale(problem, seed, n=4096):
    rng = np.random.default_rng(seed)
    xs = problem.sample_domain(n, rng)
    a0 = np.tile(problem.action_center, (n, 1))
    rms = float(np.sqrt(np.mean(problem.cost(xs, a0) ** 2)))
    return max(1.0, rms / problem.discount)


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_trace_csv(trace: IterationTrace, path) -> None:
    lines = [",".join(IterationTrace.CSV_COLUMNS)]
    for row in trace.csv_rows():
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_train_csv(report, path) -> None:
    probe_at = dict(report.probe_history)
    lines = ["step,loss,residual_l2"]
    for i, loss in enumerate(report.loss_history):
        step = i + 1
        res = _fmt(probe_at[step]) if step in probe_at else ""
        lines.append(f"{step},{_fmt(loss)},{res}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class RunResult:
    trace: IterationTrace
    problem: object
    net: object
    policy: object
    constants: object
    summary: dict
    outdir: Path
    grid_reference: object = None
    riccati: object = None


def run_pinn_pi(cfg: RunConfig) -> RunResult:
    """Execute the full outer loop described by the configuration."""
    validate_config(cfg)
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg.problem)
    constants = validate_assumptions(
        problem, n_samples=cfg.assumption_samples, seed=_derived_seed(cfg.seed, 5)
    )

    hidden = cfg.net.hidden
    widths = (
        [problem.state_dim] + list(hidden) + [1]
        if hidden
        else netmod.default_widths(problem.state_dim)
    )
    scale = (
        cfg.net.output_scale
        if cfg.net.output_scale is not None
        else _auto_output_scale(problem, _derived_seed(cfg.seed, 7))
    )
    value_net = netmod.init_network(widths, seed=_derived_seed(cfg.seed, 10),
                                    output_scale=scale)

    rng_probe = np.random.default_rng(_derived_seed(cfg.seed, 20))
    residual_probes = problem.sample_domain(cfg.evaluate.probe_points, rng_probe)
    value_probes = _value_probes(problem, cfg.n_value_probes,
                                 _derived_seed(cfg.seed, 21))
    rng_cmp = np.random.default_rng(_derived_seed(cfg.seed, 23))
    cmp_points = problem.sample_domain(cfg.oracle.compare_points, rng_cmp)

    grid_cfg = oraclemod.GridConfig(
        nodes_per_axis=cfg.oracle.grid_nodes, margin=cfg.oracle.grid_margin
    )
    grid_ref = None
    if cfg.oracle.grid and problem.state_dim <= 2:
        grid_ref = oraclemod.grid_howard_pi(problem, grid_cfg)
        grid_ref_cmp = grid_ref.value(cmp_points)
    ric = None
    if cfg.oracle.riccati:
        ric = riccati_reference(problem)
        ric_cmp = ric.value(cmp_points)

    solver_cfg = SolverConfig(max_iter=cfg.improve_max_iter, tol=cfg.improve_tol)
    policy = PolicyHandle.constant(problem, label="a0")
    trace = IterationTrace()
    vol = problem.domain_volume
    prev_residual = None
    horizon = cfg.sim.horizon if cfg.sim.horizon else 20.0 / problem.discount
    x0 = (
        np.asarray(cfg.sim.x0, dtype=float)
        if cfg.sim.x0 is not None
        else 0.5 * (problem.domain[:, 0] + problem.domain[:, 1])
    )
    stopped_at = None

    p_start = cfg.outer.p_start
    for n in range(cfg.outer.max_outer):
        t_iter = time.perf_counter()
        eval_cfg = dataclasses.replace(
            cfg.evaluate, seed=_derived_seed(cfg.seed, 1000 + n)
        )
        if n == 0 and cfg.outer.p_start_rel is not None:
            from .evaluate import residual_l2_on

            actions0 = problem.clamp_actions(np.atleast_2d(policy(residual_probes)))
            r_init = residual_l2_on(value_net, problem, residual_probes, actions0)
            p_start = cfg.outer.p_start_rel * r_init
        target = eval_cfg.resolved_p_target(problem)
        if p_start is not None:
            target = max(target, p_start * cfg.outer.p_decay ** n)
        if cfg.outer.monotone_residual and prev_residual is not None:
            target = min(target, prev_residual)
        eval_cfg.p_target = target
        report = policy_evaluation_train(
            value_net, problem, policy, eval_cfg, probe_points=residual_probes
        )
        retries = 0
        while (
            cfg.outer.monotone_residual
            and cfg.outer.retry_steps > 0
            and prev_residual is not None
            and report.residual_l2_estimate > prev_residual
            and retries < 3
        ):
            retries += 1
            extra_cfg = dataclasses.replace(
                eval_cfg,
                steps=cfg.outer.retry_steps,
                seed=_derived_seed(cfg.seed, 5000 + 10 * n + retries),
            )
            report = policy_evaluation_train(
                value_net, problem, policy, extra_cfg, probe_points=residual_probes
            )
        _write_train_csv(report, outdir / f"train_{n}.csv")

        snapshot = value_net.values(value_probes)
        new_policy = PolicyHandle.greedy(
            value_net, problem, cfg=solver_cfg, label=f"greedy_{n}",
            init_policy=policy,
        )

        _, grad_probe = value_net.value_and_grad(value_probes)
        a_old = policy(value_probes)
        a_new = new_policy(value_probes)
        obj_old = greedy_objective(problem, value_probes, a_old, grad_probe)
        obj_new = greedy_objective(problem, value_probes, a_new, grad_probe)
        improve_frac = float(np.mean(obj_new >= obj_old - 1e-9))

        sup_dist = policy_sup_distance(new_policy, policy, value_probes)

        oracle_gap = float("nan")
        delta_l2 = float("nan")
        if grid_ref is not None:
            diff = value_net.values(cmp_points) - grid_ref_cmp
            oracle_gap = float(np.sqrt(vol * np.mean(diff ** 2)))
            frozen = oraclemod.solve_frozen_policy(
                problem, policy, axes=grid_ref.axes
            )
            ddiff = value_net.values(cmp_points) - frozen.value(cmp_points)
            delta_l2 = float(np.sqrt(vol * np.mean(ddiff ** 2)))
        ric_gap = float("nan")
        if ric is not None:
            rdiff = value_net.values(cmp_points) - ric_cmp
            ric_gap = float(np.sqrt(vol * np.mean(rdiff ** 2)))

        ret_mean, ret_se = float("nan"), float("nan")
        if cfg.sim.rollouts_per_iter > 0:
            ret_mean, ret_se = estimate_value_mc(
                problem, new_policy, x0, cfg.sim.rollouts_per_iter,
                horizon, cfg.sim.dt, seed=_derived_seed(cfg.seed, 30 + n),
            )

        netmod.save_checkpoint(
            value_net, outdir / f"ckpt_{n}.npz",
            extra={"probe_points": value_probes, "probe_values": snapshot},
        )
        trace.append(
            n=n,
            residual_l2=report.residual_l2_estimate,
            value_snapshot=snapshot,
            policy_sup_dist=sup_dist,
            oracle_gap=oracle_gap,
            riccati_gap=ric_gap,
            delta_l2=delta_l2,
            improve_frac=improve_frac,
            return_mean=ret_mean,
            return_stderr=ret_se,
            wall_time=time.perf_counter() - t_iter,
        )
        prev_residual = report.residual_l2_estimate
        policy = new_policy
        if sup_dist < cfg.outer.stop_eps:
            stopped_at = n
            break

    write_trace_csv(trace, outdir / "trace.csv")

    grad_norms = np.linalg.norm(value_net.value_and_grad(value_probes)[1], axis=1)
    constants_emp = validate_assumptions(
        problem, n_samples=cfg.assumption_samples,
        seed=_derived_seed(cfg.seed, 5), grad_bound=float(np.max(grad_norms)),
    )
    summary = {
        "problem": cfg.problem.name,
        "state_dim": problem.state_dim,
        "iterations": len(trace),
        "stopped_at": stopped_at,
        "final_residual_l2": trace.residual_l2[-1] if len(trace) else None,
        "final_policy_sup_dist": trace.policy_sup_dist[-1] if len(trace) else None,
        "min_improve_frac": min(trace.improve_frac) if len(trace) else None,
        "constants": _constants_dict(constants),
        "constants_empirical_grad": _constants_dict(constants_emp),
        "output_scale": scale,
        "widths": widths,
        "wall_time_per_iter": trace.wall_time,
    }
    if len(trace) >= 2:
        summary["monotonicity_fraction"] = monotonicity_report(trace)
    gaps = [g for g in trace.oracle_gap if np.isfinite(g)]
    if len(gaps) >= 4:
        fit = fit_convergence_rate(gaps, floor_window=min(3, len(gaps) - 3))
        summary["kappa_hat"] = fit.kappa_hat
        summary["gap_floor_estimate"] = fit.floor_estimate
        summary["contraction"] = fit.contraction
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))

    return RunResult(
        trace=trace, problem=problem, net=value_net, policy=policy,
        constants=constants, summary=summary, outdir=outdir,
        grid_reference=grid_ref, riccati=ric,
    )


def _constants_dict(constants):
    out = dataclasses.asdict(constants)
    out["notes"] = list(out["notes"])
    return out


def compare_oracle(cfg: RunConfig, run_result: Optional[RunResult] = None) -> dict:
    """Final-value comparison against every applicable reference solver.

    Reads checkpoints from cfg.outdir when no in-memory result is supplied.
    Raises UnsupportedComparison when neither reference applies.
    """
    problem = build_problem(cfg.problem)
    outdir = Path(cfg.outdir)
    has_ricc = {"A", "B", "Q", "R"} <= set(problem.meta)
    can_grid = problem.state_dim <= 2
    if not has_ricc and not can_grid:
        raise UnsupportedComparison(
            f"{problem.name} in d={problem.state_dim} admits no reference solver"
        )
    if run_result is not None:
        final_net = run_result.net
        n_iters = len(run_result.trace)
    else:
        ckpts = sorted(outdir.glob("ckpt_*.npz"),
                       key=lambda p: int(p.stem.split("_")[1]))
        if not ckpts:
            raise ConfigError(f"no checkpoints under {outdir}")
        final_net = netmod.load_checkpoint(ckpts[-1])
        n_iters = len(ckpts)

    rng = np.random.default_rng(_derived_seed(cfg.seed, 23))
    pts = problem.sample_domain(cfg.oracle.compare_points, rng)
    vol = problem.domain_volume
    report = {"problem": cfg.problem.name, "n_iterations": n_iters}

    def gap_on(mask_pts, net_obj, ref_vals):
        diff = net_obj.values(mask_pts) - ref_vals
        return float(np.sqrt(vol * np.mean(diff ** 2)))

    series_ref = None
    if has_ricc:
        ric = riccati_reference(problem)
        ref_vals = ric.value(pts)
        mask = inactivity_mask(ric, pts, problem.meta.get("u_max", np.inf))
        report["riccati_gap_l2"] = gap_on(pts, final_net, ref_vals)
        ref_norm = float(np.sqrt(vol * np.mean(ref_vals ** 2)))
        report["riccati_gap_rel"] = report["riccati_gap_l2"] / max(ref_norm, 1e-300)
        report["inactive_fraction"] = float(np.mean(mask))
        if np.any(mask):
            diff = final_net.values(pts[mask]) - ref_vals[mask]
            report["riccati_gap_inactive"] = float(
                np.sqrt(vol * np.mean(diff ** 2))
            )
            u_ref = ric.policy(pts[mask])
            greedy_cfg = SolverConfig(max_iter=cfg.improve_max_iter,
                                      tol=cfg.improve_tol)
            u_net = PolicyHandle.greedy(final_net, problem, cfg=greedy_cfg)(pts[mask])
            u_range = float(np.max(u_ref) - np.min(u_ref))
            report["policy_mean_abs_err"] = float(np.mean(np.abs(u_net - u_ref)))
            report["policy_range"] = u_range
            report["policy_rel_err"] = report["policy_mean_abs_err"] / max(
                u_range, 1e-300
            )
        series_ref = ("riccati", ref_vals)

    if can_grid:
        grid_cfg = oraclemod.GridConfig(
            nodes_per_axis=cfg.oracle.grid_nodes, margin=cfg.oracle.grid_margin
        )
        grid = oraclemod.grid_howard_pi(problem, grid_cfg)
        gvals = grid.value(pts)
        report["grid_gap_l2"] = gap_on(pts, final_net, gvals)
        gnorm = float(np.sqrt(vol * np.mean(gvals ** 2)))
        report["grid_gap_rel"] = report["grid_gap_l2"] / max(gnorm, 1e-300)
        report["grid_monotone"] = bool(grid.monotone_ok)
        series_ref = ("grid", gvals)

    if series_ref is not None:
        name, ref_vals = series_ref
        if run_result is not None:
            gaps = [
                g
                for g in (run_result.trace.oracle_gap
                          if name == "grid" else run_result.trace.riccati_gap)
                if np.isfinite(g)
            ]
        else:
            gaps = []
            for ck in sorted(outdir.glob("ckpt_*.npz"),
                             key=lambda p: int(p.stem.split("_")[1])):
                net_n = netmod.load_checkpoint(ck)
                gaps.append(gap_on(pts, net_n, ref_vals))
        report["gap_series"] = gaps
        report["gap_series_reference"] = name
        if len(gaps) >= 4:
            fit = fit_convergence_rate(gaps, floor_window=min(3, len(gaps) - 3))
            report["kappa_hat"] = fit.kappa_hat
            report["floor_estimate"] = fit.floor_estimate

    (outdir / "compare.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
