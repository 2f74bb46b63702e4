import json
from pathlib import Path

import numpy as np
import pytest

from robustfed.config import load_config
from robustfed.experiments import run_clutter, run_influence, run_logreg, run_theorems


def small_clutter_cfg(outdir, **extra):
    overrides = {
        "run.out": str(outdir),
        "run.plots": False,
        "clutter.seeds": 2,
        "clutter.rounds": 60,
        "clutter.losses": ["nll", "beta", "sm_se"],
        "data.n": 40,
        "partition.clients": 3,
    }
    overrides.update(extra)
    return load_config(None, overrides)


class TestClutterDriver:
    def test_outputs_and_determinism(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        out_a.mkdir(), out_b.mkdir()
        run_clutter(small_clutter_cfg(out_a), out_a)
        run_clutter(small_clutter_cfg(out_b), out_b)
        for name in ("results.csv", "telemetry.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
        # manifests differ only by the timestamp line
        ma = json.loads((out_a / "manifest.json").read_text())
        mb = json.loads((out_b / "manifest.json").read_text())
        ma.pop("timestamp"), mb.pop("timestamp")
        ma["config"]["run"].pop("out"), mb["config"]["run"].pop("out")
        assert ma == mb

    def test_results_have_one_row_per_seed_and_loss(self, tmp_path):
        run_clutter(small_clutter_cfg(tmp_path), tmp_path)
        lines = (tmp_path / "results.csv").read_text().strip().splitlines()
        header, rows = lines[0], lines[1:]
        assert header.split(",")[:3] == ["seed", "loss", "posterior_mean"]
        assert len(rows) == 2 * 3

    def test_figure_rendering(self, tmp_path):
        cfg = small_clutter_cfg(tmp_path).override("run", "plots", True)
        outcome = run_clutter(cfg, tmp_path)
        assert (tmp_path / "fig_clutter.png").exists()
        assert str(tmp_path / "fig_clutter.png") in outcome.files


class TestInfluenceDriver:
    def test_small_curve_files(self, tmp_path):
        cfg = load_config(
            None,
            {
                "run.out": str(tmp_path),
                "run.plots": True,
                "influence.z_steps": 3,
                "influence.z_max": 10.0,
                "influence.n": 28,
                "influence.clients": 4,
                "influence.losses": ["nll", "sm_se"],
                "influence.rounds": 200,
            },
        )
        outcome = run_influence(cfg, tmp_path)
        assert (tmp_path / "influence_nll.csv").exists()
        assert (tmp_path / "influence_sm_se.csv").exists()
        assert (tmp_path / "fig_influence.png").exists()
        header = (tmp_path / "influence_nll.csv").read_text().splitlines()[0]
        assert header == "outlier_position_z,fisher_rao_to_reference"
        assert outcome.assertions["per_loss"]["nll"]["kind"] == "growth"
        assert outcome.assertions["per_loss"]["sm_se"]["kind"] == "plateau"


class TestLogregDriver:
    def test_single_seed_outputs(self, tmp_path):
        cfg = load_config(
            None,
            {
                "run.out": str(tmp_path),
                "run.plots": True,
                "logreg.seeds": 1,
                "logreg.rounds": 8,
                "logreg.grid_steps": 8,
                "data.n": 60,
                "data.outliers": 12,
            },
        )
        outcome = run_logreg(cfg, tmp_path)
        assert (tmp_path / "results.csv").exists()
        assert (tmp_path / "boundary_grid.csv").exists()
        assert (tmp_path / "fig_logreg.png").exists()
        assert len(outcome.assertions["ratios"]) == 1
        # manifest echoes the section-local knobs it applied
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["run"]["rounds"] == 8
        assert manifest["config"]["prior"]["variance"] == [10.0]


class TestTheoremsDriver:
    def test_report_emission(self, tmp_path):
        cfg = load_config(
            None,
            {"run.out": str(tmp_path), "run.plots": False,
             "theorems.which": ["pool", "cavity"]},
        )
        outcome = run_theorems(cfg, tmp_path)
        assert outcome.passed
        report = json.loads((tmp_path / "theorems.json").read_text())
        names = {r["name"] for r in report}
        assert names == {"opinion_pool", "opinion_pool_robust", "cavity_necessity"}
        assert all(r["passed"] for r in report)
