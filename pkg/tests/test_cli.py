import json
import subprocess
import sys

import numpy as np
import pytest

from pinnpi.cli import main, parse_config_text
from pinnpi.errors import ConfigError
from pinnpi.runner import config_from_dict


class TestConfigText:
    def test_basic_grammar(self):
        text = """
        # a comment
        problem = "lqr"
        d = 5
        u_max = 10.0          # trailing comment
        sigma_scale = 0.1
        lambda = 1.0
        oracle.riccati = true
        net.hidden = [32, 32]
        """
        raw = parse_config_text(text)
        assert raw["problem"] == "lqr"
        assert raw["d"] == 5 and isinstance(raw["d"], int)
        assert raw["u_max"] == 10.0
        assert raw["oracle.riccati"] is True
        assert raw["net.hidden"] == [32, 32]

    def test_bad_line_raises(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_config_text("just some words\n")

    def test_bad_value_raises(self):
        with pytest.raises(ValueError, match="cannot parse"):
            parse_config_text("x = @@\n")


class TestConfigFromDict:
    def test_round_trip_groups(self):
        cfg = config_from_dict({
            "problem": "lqr", "d": 2, "m": 2, "problem_seed": 3,
            "u_max": 4.0, "lambda": 0.8, "eval.steps": 100,
            "eval.n_collocation": 64, "outer.max_outer": 2,
            "oracle.riccati": True, "sim.rollouts_per_iter": 4,
            "net.hidden": [8, 8], "seed": 5, "outdir": "/tmp/x",
        })
        assert cfg.problem.d == 2 and cfg.problem.discount == 0.8
        assert cfg.evaluate.steps == 100
        assert cfg.outer.max_outer == 2
        assert cfg.oracle.riccati is True
        assert cfg.net.hidden == [8, 8]

    def test_master_seed_addresses_problem(self):
        cfg = config_from_dict({"problem": "lqr", "d": 5, "seed": 7})
        assert cfg.problem.seed == 7
        cfg = config_from_dict({"problem": "lqr", "d": 5, "seed": 7,
                                "problem_seed": 2})
        assert cfg.problem.seed == 2 and cfg.seed == 7

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"no_such_key": 1})

    def test_unknown_group_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"eval.nope": 1})

    def test_unknown_problem_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"problem": "tictactoe"})

    def test_nonpositive_field_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"eval.steps": 0})


def tiny_config(outdir, seed=3):
    return "\n".join([
        'problem = "constant_cost"',
        "d = 1",
        "c = 1.0",
        "lambda = 1.0",
        "net.hidden = [12, 12]",
        "eval.n_collocation = 128",
        "eval.steps = 150",
        "eval.lr = 0.01",
        "eval.probe_points = 1024",
        "eval.probe_every = 50",
        "outer.max_outer = 2",
        "outer.stop_eps = 0.001",
        "n_value_probes = 64",
        "assumption_samples = 1000",
        f"seed = {seed}",
        f'outdir = "{outdir}"',
    ]) + "\n"


class TestCliSolve:
    def test_solve_writes_artifacts(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        outdir = tmp_path / "out"
        cfg_file.write_text(tiny_config(outdir))
        rc = main(["solve", "--config", str(cfg_file)])
        assert rc == 0
        assert (outdir / "trace.csv").exists()
        assert (outdir / "summary.json").exists()
        assert (outdir / "ckpt_0.npz").exists()
        assert (outdir / "train_0.csv").exists()
        summary = json.loads((outdir / "summary.json").read_text())
        assert summary["iterations"] >= 1

    def test_checkpoints_reproduce_probe_values(self, tmp_path):
        from pinnpi.net import load_checkpoint

        cfg_file = tmp_path / "run.cfg"
        outdir = tmp_path / "out"
        cfg_file.write_text(tiny_config(outdir))
        assert main(["solve", "--config", str(cfg_file)]) == 0
        for ckpt in sorted(outdir.glob("ckpt_*.npz")):
            net, extra = load_checkpoint(ckpt, with_extra=True)
            values = net.values(extra["probe_points"])
            assert np.max(np.abs(values - extra["probe_values"])) <= 1e-12

    def test_set_overrides_config(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        outdir = tmp_path / "a"
        other = tmp_path / "b"
        cfg_file.write_text(tiny_config(outdir))
        rc = main(["solve", "--config", str(cfg_file),
                   "--set", "outer.max_outer = 1",
                   "--outdir", str(other)])
        assert rc == 0
        assert (other / "trace.csv").exists()
        assert len(list(other.glob("ckpt_*.npz"))) == 1

    def test_config_error_exit_code(self, tmp_path):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text('problem = "nope"\n')
        assert main(["solve", "--config", str(cfg_file)]) == 2

    def test_unsupported_comparison_exit_code(self, tmp_path):
        cfg_file = tmp_path / "cp.cfg"
        cfg_file.write_text('problem = "cartpole"\n'
                            f'outdir = "{tmp_path}"\n')
        assert main(["compare-oracle", "--config", str(cfg_file)]) == 4

    def test_validate_assumptions_subcommand(self, capsys):
        rc = main(["validate-assumptions", "--set", 'problem = "constant_cost"',
                   "--set", "d = 2", "--samples", "2000"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "C_lambda: 10.0" in out
        assert "B_hat: 0.0" in out

    def test_grid_solve_subcommand(self, tmp_path, capsys):
        out_file = tmp_path / "grid.npz"
        rc = main(["grid-solve", "--set", 'problem = "constant_cost"',
                   "--set", "d = 1", "--set", "oracle.grid_nodes = 51",
                   "--out", str(out_file)])
        assert rc == 0
        assert out_file.exists()
        assert "monotone: True" in capsys.readouterr().out

    def test_rollout_eval_subcommand(self, tmp_path, capsys):
        cfg_file = tmp_path / "run.cfg"
        outdir = tmp_path / "out"
        cfg_file.write_text(tiny_config(outdir))
        assert main(["solve", "--config", str(cfg_file)]) == 0
        rc = main(["rollout-eval", "--config", str(cfg_file),
                   "--ckpt", str(sorted(outdir.glob("ckpt_*.npz"))[-1]),
                   "--rollouts", "8", "--horizon", "4.0"])
        assert rc == 0
        out = capsys.readouterr().out
        mean = float(out.split("return_mean: ")[1].splitlines()[0])
        assert 0.8 < mean < 1.1  # return of the constant-reward fixture


class TestCliProcess:
    def test_runs_as_subprocess_with_threads_flag(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        outdir = tmp_path / "out"
        cfg_file.write_text(tiny_config(outdir))
        proc = subprocess.run(
            [sys.executable, "-m", "pinnpi.cli", "--threads", "1",
             "solve", "--config", str(cfg_file)],
            capture_output=True, text=True, timeout=600,
        )
        assert proc.returncode == 0, proc.stderr
        assert (outdir / "trace.csv").exists()
