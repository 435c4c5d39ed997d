"""Command-line front end.

Subcommands: solve, compare-oracle, rollout-eval, validate-assumptions,
grid-solve.  Configuration comes from a key = value text file (see
parse_config_text for the grammar) plus repeatable --set key=value
overrides; --seed derives every module seed by fixed offsets and
--threads pins the BLAS thread count before numpy is imported, which is
what makes --threads 1 runs byte-reproducible.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 reference-solver failure or unsupported comparison.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ORACLE = 4

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines.

    Supported values: double-quoted strings, booleans true/false, integers,
    floats (inf accepted), and flat [v1, v2, ...] lists.  '#' starts a
    comment.  Keys may contain dots (eval.steps = 2000).
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = _parse_value(value, lineno)
    return out


def _parse_value(token: str, lineno: int):
    if token.startswith("[") and token.endswith("]"):
        inner = token[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(part.strip(), lineno) for part in inner.split(",")]
    if token.startswith('"') and token.endswith('"') and len(token) >= 2:
        return token[1:-1]
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        raise ValueError(f"line {lineno}: cannot parse value {token!r}") from None


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="pinnpi",
        description="Physics-informed policy iteration for stochastic control",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="pin BLAS/OpenMP thread count (1 = reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed; module seeds derive by fixed offsets")
        p.add_argument("--outdir", default=None)

    p_solve = sub.add_parser("solve", help="run the outer policy-iteration loop")
    common(p_solve)

    p_cmp = sub.add_parser("compare-oracle",
                           help="compare the final value against reference solvers")
    common(p_cmp)

    p_roll = sub.add_parser("rollout-eval",
                            help="Monte-Carlo return of the greedy policy of a checkpoint")
    common(p_roll)
    p_roll.add_argument("--ckpt", required=True)
    p_roll.add_argument("--x0", default=None, help="comma-separated start state")
    p_roll.add_argument("--rollouts", type=int, default=256)
    p_roll.add_argument("--horizon", type=float, default=None)
    p_roll.add_argument("--dt", type=float, default=1e-2)

    p_val = sub.add_parser("validate-assumptions",
                           help="estimate the hypothesis constants of a problem")
    common(p_val)
    p_val.add_argument("--samples", type=int, default=20000)

    p_grid = sub.add_parser("grid-solve",
                            help="exact Howard iteration on a 1D/2D grid")
    common(p_grid)
    p_grid.add_argument("--out", default=None, help="save the grid solution (.npz)")
    return parser


def _load_config(args):
    from .errors import ConfigError
    from .runner import config_from_dict

    raw = {}
    if args.config:
        try:
            text = open(args.config).read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        try:
            raw.update(parse_config_text(text))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            raw[key.strip()] = _parse_value(value.strip(), 0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.outdir is not None:
        raw["outdir"] = args.outdir
    return config_from_dict(raw)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    # deferred so the thread pinning above precedes the first numpy import
    from .errors import (ConfigError, NumericalError, OracleError,
                         TrainingDiverged, UnsupportedComparison)

    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, TrainingDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OracleError, UnsupportedComparison) as exc:
        print(f"reference-solver failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE


def _dispatch(args) -> int:
    import numpy as np

    from . import net as netmod
    from . import oracle as oraclemod
    from . import runner
    from .improve import PolicyHandle, SolverConfig
    from .problems import validate_assumptions
    from .sim import estimate_value_mc

    cfg = _load_config(args)

    if args.command == "solve":
        result = runner.run_pinn_pi(cfg)
        final_res = result.summary.get("final_residual_l2")
        print(f"iterations: {result.summary['iterations']}")
        print(f"stopped_at: {result.summary['stopped_at']}")
        print(f"final_residual_l2: {final_res}")
        print(f"outputs: {result.outdir}")
        return EXIT_OK

    if args.command == "compare-oracle":
        report = runner.compare_oracle(cfg)
        for key in sorted(report):
            if key != "gap_series":
                print(f"{key}: {report[key]}")
        return EXIT_OK

    if args.command == "rollout-eval":
        problem = runner.build_problem(cfg.problem)
        value_net = netmod.load_checkpoint(args.ckpt)
        policy = PolicyHandle.greedy(
            value_net, problem,
            cfg=SolverConfig(max_iter=cfg.improve_max_iter, tol=cfg.improve_tol),
        )
        x0 = (
            np.array([float(v) for v in args.x0.split(",")])
            if args.x0
            else 0.5 * (problem.domain[:, 0] + problem.domain[:, 1])
        )
        horizon = args.horizon or 20.0 / problem.discount
        mean, stderr = estimate_value_mc(
            problem, policy, x0, args.rollouts, horizon, args.dt, seed=cfg.seed
        )
        print(f"return_mean: {mean}")
        print(f"return_stderr: {stderr}")
        return EXIT_OK

    if args.command == "validate-assumptions":
        problem = runner.build_problem(cfg.problem)
        constants = validate_assumptions(problem, n_samples=args.samples,
                                         seed=cfg.seed)
        for key, value in sorted(runner._constants_dict(constants).items()):
            print(f"{key}: {value}")
        return EXIT_OK

    if args.command == "grid-solve":
        problem = runner.build_problem(cfg.problem)
        grid_cfg = oraclemod.GridConfig(
            nodes_per_axis=cfg.oracle.grid_nodes, margin=cfg.oracle.grid_margin
        )
        sol = oraclemod.grid_howard_pi(problem, grid_cfg)
        print(f"sweeps: {len(sol.sweep_values)}")
        print(f"final_sup_change: {sol.sup_changes[-1] if sol.sup_changes else 0.0}")
        print(f"monotone: {sol.monotone_ok}")
        if args.out:
            sol.save(args.out)
            print(f"saved: {args.out}")
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
