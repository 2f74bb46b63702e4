import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from robustfed.cli import main


def run_cli(args):
    return main(args)


class TestExperimentCommands:
    def test_theorems_subcommand(self, tmp_path, capsys):
        code = run_cli(["theorems", "--out", str(tmp_path), "--no-plots",
                        "--config", _theorem_cfg(tmp_path)])
        out = capsys.readouterr().out
        assert code == 0
        assert "theorems: PASS" in out
        assert (tmp_path / "theorems.json").exists()

    def test_clutter_subcommand_with_overrides(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text(
            """
[clutter]
seeds = 1
rounds = 40
losses = ["nll", "beta"]

[data]
n = 30

[partition]
clients = 2
"""
        )
        code = run_cli(["clutter", "--config", str(cfg), "--out", str(tmp_path / "o"),
                        "--seed", "3", "--no-plots"])
        assert code == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["config"]["data"]["seed"] == 3
        assert manifest["config"]["run"]["plots"] is False

    def test_unknown_experiment_rejected(self):
        with pytest.raises(SystemExit):
            run_cli(["regress-the-moon"])


def _theorem_cfg(tmp_path):
    cfg = tmp_path / "theorems.toml"
    cfg.write_text('[theorems]\nwhich = ["pool", "cavity"]\n')
    return str(cfg)


class TestServeClient:
    def test_multiprocess_federation_over_sockets(self, tmp_path):
        port = _free_port()
        cfg = tmp_path / "cfg.toml"
        cfg.write_text(
            f"""
[run]
rounds = 45
transport = "socket:{port}"
out = "{tmp_path / 'served'}"

[data]
n = 24

[partition]
clients = 2
"""
        )
        serve = subprocess.Popen(
            [sys.executable, "-m", "robustfed.cli", "serve", "--config", str(cfg)],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
        )
        time.sleep(1.0)  # give the listener a moment
        clients = [
            subprocess.Popen(
                [sys.executable, "-m", "robustfed.cli", "client", "--config", str(cfg),
                 "--client-id", str(i)],
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                text=True,
            )
            for i in range(2)
        ]
        out, _ = serve.communicate(timeout=60)
        for c in clients:
            c.communicate(timeout=30)
        assert serve.returncode == 0, out
        manifest = json.loads((tmp_path / "served" / "manifest.json").read_text())
        assert manifest["converged"] is True

        # the posterior matches an identical in-process run bit for bit
        from robustfed.config import load_config
        from robustfed.cli import _single_run_setup, _client_state
        from robustfed.server import ServerState
        from robustfed.transport import InProcessTransport, drive

        loaded = load_config(str(cfg))
        prior, shards, *_ = _single_run_setup(loaded)
        states = [_client_state(loaded, i) for i in range(2)]
        result = drive(InProcessTransport(states), ServerState.initial(
            prior, tolerance=loaded["run"]["tolerance"]), loaded["run"]["rounds"])
        from robustfed.gaussians import to_moment

        mom = to_moment(result.server.posterior)
        np.testing.assert_array_equal(np.asarray(manifest["posterior_mean"]), mom.mean)
        np.testing.assert_array_equal(np.asarray(manifest["posterior_std"]), mom.std)


def _free_port():
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]
