import json
import hashlib
from pathlib import Path

import numpy as np
import pytest

from dynmatch.cli import main, run_estimate, RunConfig, subgroup_mask, load_scenario
from dynmatch import load_panel, PanelSchema, SimConfig, ACSelection, EffectSpec, simulate_panel


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = run(["simulate", "--n", 4000, "--window", 2, "--pre-lags", 2,
                "--alpha", 500, "--d1-share", 0.10, "--later-share", 0.12,
                "--level", 8000, "--t-max", 4, "--seed", 7, "--out", out])
    assert code == 0
    return out


class TestSimulate:
    def test_artifacts_exist(self, sim_dir):
        assert (sim_dir / "panel.csv").exists()
        assert (sim_dir / "truth.json").exists()
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        for name, digest in manifest["outputs"].items():
            got = hashlib.sha256((sim_dir / name).read_bytes()).hexdigest()
            assert got == digest

    def test_emitted_panel_loads(self, sim_dir):
        data = load_panel(sim_dir / "panel.csv", PanelSchema(window=2, pre_lags=2))
        assert data.n == 4000
        truth = json.loads((sim_dir / "truth.json").read_text())
        assert abs(sum(truth["pi"].values()) - 1.0) < 1e-12


class TestEstimate:
    def test_end_to_end_and_determinism(self, sim_dir, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        base = ["estimate", "--input", sim_dir / "panel.csv", "--window", 2,
                "--pre-lags", 2, "--estimands", "lb,ub,nvl,lechner,ipw",
                "--tau-min", 0, "--tau-max", 1, "--seed", 5]
        assert run(base + ["--out", out1]) == 0
        assert run(base + ["--out", out2]) == 0
        assert (out1 / "estimates.csv").read_bytes() == \
            (out2 / "estimates.csv").read_bytes()
        text = (out1 / "estimates.csv").read_text().splitlines()
        assert text[0] == "estimand,cohort,tau,value,se,n_treated,pct_of_control_mean"
        kinds = {line.split(",")[0] for line in text[1:]}
        assert kinds == {"lower_bound", "upper_bound", "now_vs_later",
                         "lechner_point", "ipw"}

    def test_bounds_bracket_point_estimates(self, sim_dir, tmp_path):
        out = tmp_path / "c"
        run(["estimate", "--input", sim_dir / "panel.csv", "--window", 2,
             "--pre-lags", 2, "--estimands", "lb,ub,lechner", "--tau-min", 1,
             "--tau-max", 1, "--seed", 5, "--out", out])
        rows = json.loads((out / "estimates.json").read_text())["estimates"]
        by = {(r["estimand"], str(r["cohort"]), r["tau"]): r["value"] for r in rows}
        lb = by[("lower_bound", "1", 1)]
        ub = by[("upper_bound", "1", 1)]
        lech = by[("lechner_point", "1", 1)]
        assert lb <= lech <= ub

    def test_missing_input_exits_2(self, tmp_path, capsys):
        code = run(["estimate", "--input", tmp_path / "nope.csv", "--window", 2,
                    "--out", tmp_path / "x"])
        assert code == 2
        assert "nope.csv" in capsys.readouterr().err

    def test_subgroup_filters_sample(self, tmp_path):
        cfg = SimConfig(n_workers=3000, S=2, K=1, rho=0.6, level=8000.0,
                        sigma_omega=1200.0, sigma_eps=1200.0, sigma_upsilon=1200.0,
                        selection=ACSelection(k=1, target_share=0.1),
                        effect=EffectSpec(alpha=400.0), d1_target_share=0.1,
                        t_max=3, demo_cells=2, seed=9)
        data, _ = simulate_panel(cfg)
        mask = subgroup_mask(data, "cell==1")
        assert 0 < mask.sum() < data.n
        cfgrun = RunConfig(command="estimate", window=2, estimands=("lower_bound",),
                           tau_min=1, tau_max=1, out=str(tmp_path / "sg"),
                           subgroup="cell==1")
        bundle = run_estimate(cfgrun, data=data)
        n_sub = sum(r["n_treated"] for r in bundle["estimates"]
                    if r["cohort"] != "all")
        cfgfull = RunConfig(command="estimate", window=2, estimands=("lower_bound",),
                            tau_min=1, tau_max=1, out=str(tmp_path / "full"))
        full = run_estimate(cfgfull, data=data)
        n_full = sum(r["n_treated"] for r in full["estimates"]
                     if r["cohort"] != "all")
        assert 0 < n_sub < n_full

    def test_exact_cells_partition_estimation(self, tmp_path):
        cfg = SimConfig(n_workers=4000, S=2, K=1, rho=0.6, level=8000.0,
                        sigma_omega=1200.0, sigma_eps=1200.0, sigma_upsilon=1200.0,
                        selection=ACSelection(k=1, target_share=0.1),
                        effect=EffectSpec(alpha=400.0), d1_target_share=0.1,
                        t_max=3, demo_cells=2, seed=10)
        data, _ = simulate_panel(cfg)
        cfgrun = RunConfig(command="estimate", window=2, estimands=("lower_bound",),
                           exact_keys=("cell",), tau_min=1, tau_max=1,
                           out=str(tmp_path / "cells"), write_matches=True)
        bundle = run_estimate(cfgrun, data=data)
        assert (tmp_path / "cells" / "matches.csv").exists()
        values = [r["value"] for r in bundle["estimates"] if r["cohort"] == "all"]
        assert len(values) == 1 and 100.0 < values[0] < 900.0


class TestBootstrap:
    def test_bootstrap_attaches_variances(self, tmp_path):
        cfg = SimConfig(n_workers=1500, S=2, K=1, rho=0.6, level=8000.0,
                        sigma_omega=1200.0, sigma_eps=1200.0, sigma_upsilon=1200.0,
                        selection=ACSelection(k=1, target_share=0.15),
                        effect=EffectSpec(alpha=400.0), d1_target_share=0.1,
                        t_max=3, seed=77)
        data, _ = simulate_panel(cfg)
        cfgrun = RunConfig(command="estimate", window=2,
                           estimands=("lechner_point", "ipw"), tau_min=1, tau_max=1,
                           seed=3, bootstrap=25, out=str(tmp_path / "boot"))
        bundle = run_estimate(cfgrun, data=data)
        rows = [r for r in bundle["estimates"] if r["cohort"] != "all"]
        assert rows
        for r in rows:
            assert r["se"] is not None and r["se"] > 0
        # same root seed reproduces the bootstrap variances exactly
        cfgrun2 = RunConfig(command="estimate", window=2,
                            estimands=("lechner_point", "ipw"), tau_min=1, tau_max=1,
                            seed=3, bootstrap=25, out=str(tmp_path / "boot2"))
        again = run_estimate(cfgrun2, data=data)
        assert [r["se"] for r in again["estimates"]] == \
            [r["se"] for r in bundle["estimates"]]


class TestDiagnose:
    def test_writes_reports(self, sim_dir, tmp_path):
        out = tmp_path / "diag"
        code = run(["diagnose", "--input", sim_dir / "panel.csv", "--window", 2,
                    "--pre-lags", 2, "--out", out])
        assert code == 0
        assert (out / "balance.csv").exists()
        assert (out / "overlap.csv").exists()
        assert (out / "assumption2.csv").exists()
        traj = (out / "trajectory.csv").read_text().splitlines()
        assert traj[0].startswith("tau,enrollee_mean")
        assert len(traj) > 3
        summary = json.loads((out / "diagnose.json").read_text())
        for s, stats in summary["cohorts"].items():
            if "skipped" in stats:
                continue
            assert stats["mean_abs_nd_matched"] < stats["mean_abs_nd_raw"]
        # negative-selection differentials under the lagged-earnings rule
        lines = (out / "assumption2.csv").read_text().splitlines()[1:]
        assert lines
        for line in lines:
            assert float(line.split(",")[2]) < 0


class TestCostBenefit:
    def test_scenario_file_round_trip(self, tmp_path, capsys):
        scenario = tmp_path / "s.cfg"
        scenario.write_text(
            "[scenario]\n"
            "impact_stream = -2327, -1671.5, -1016, -360.5, 295, 950.5, 1606, 2261.5, 2915, 2824\n"
            "private_cost = 6121\n"
            "social_cost = 20217\n"
            "discount_rate = 0.02\n"
            "tax_rate = 0.25\n"
            "horizon_years = 30\n")
        out = tmp_path / "cb"
        assert run(["costbenefit", "--scenario", scenario, "--out", out]) == 0
        res = json.loads((out / "costbenefit.json").read_text())
        assert res["bcr_private"] > res["bcr_social"] > 1.0
        assert res["irr_private"] > res["irr_social"]

    def test_missing_scenario_exits_2(self, tmp_path):
        assert run(["costbenefit", "--scenario", tmp_path / "none.cfg",
                    "--out", tmp_path]) == 2

    def test_loan_section_parsed(self, tmp_path):
        scenario = tmp_path / "loan.cfg"
        scenario.write_text(
            "[scenario]\nimpact_stream = -100, 400, 600\n"
            "private_cost = 500\nsocial_cost = 900\n"
            "[loan]\nprincipal = 500\n")
        sc = load_scenario(str(scenario))
        assert sc.loan is not None and sc.loan.principal == 500.0


class TestValidate:
    def test_validate_passes(self, capsys):
        assert run(["validate"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
