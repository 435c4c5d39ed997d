"""Solvers for infinite-horizon discounted stochastic optimal control.

The outer algorithm alternates policy evaluation (training a smooth value
network to kill the residual of the policy-frozen linear HJB equation at
collocation points) with pointwise greedy policy improvement over a box
action set.  Independent reference solvers (a discounted Riccati solve for
unconstrained LQR and a finite-difference Howard iteration on 1D/2D grids)
back the diagnostics.

Heavy submodules are imported lazily so that the CLI can pin BLAS thread
counts before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "errors",
    "problems",
    "net",
    "optim",
    "evaluate",
    "improve",
    "oracle",
    "sim",
    "runner",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
