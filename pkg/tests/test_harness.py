import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from brwre import cli, harness
from brwre.config import PRESET, ConfigError, ExperimentConfig, apply_overrides, parse_override

SMALL = ["T=4", "replicas.simulate=5", "replicas.estimate=60", "replicas.sigma=400",
         "replicas.diagnose=100", "replicas.verify=60", "sigma.z=[1,2,3,4]", "verify_times=[1,2]",
         "mode=\"quenched\""]


def small_args(*extra):
    out = []
    for item in SMALL + list(extra):
        out += ["--set", item]
    return out


def run_cli(argv, capsys):
    code = cli.main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


# --- config ----------------------------------------------------------------------------

def test_preset_values():
    cfg = ExperimentConfig.load()
    assert cfg.env_spec.family == "two_point" and cfg.env_spec.lo == 0.5 and cfg.env_spec.hi == 1.5
    assert (cfg.sim.L, cfg.sim.eta, cfg.sim.T, cfg.sim.x0) == (1, 0.0, 10.0, 0)
    assert cfg["delta"] == 0.5


def test_overrides():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("mode=quenched") == (["mode"], "quenched")
    doc = apply_overrides(PRESET, ["seeds.env_seed=7", "sigma.z=[1,2]"])
    assert doc["seeds"]["env_seed"] == 7 and doc["sigma"]["z"] == [1, 2]
    for bad in ["nokey", "=3", "nope=1", "seeds.nope=1", "T.x=1"]:
        with pytest.raises(ConfigError):
            apply_overrides(PRESET, [bad])


@pytest.mark.parametrize("item", ["seeds.diagnose_seed=11", "delta=1.5", "mode=\"both\"", "L=0",
                                  "environment.lo=-1", "replicas.estimate=0", "sigma.y=2", "eta=1"])
def test_invalid_config_exit_2(item, capsys, tmp_path):
    code, out, err = run_cli(["estimate-means", "--out", str(tmp_path), "--set", item], capsys)
    assert code == 2
    doc = json.loads(err)
    assert doc["error"] == "config" and doc["message"]


def test_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"T": 3, "seeds": {"env_seed": 5}}))
    cfg = ExperimentConfig.load(p, ["L=2"])
    assert cfg.sim.T == 3 and cfg.sim.L == 2 and cfg.seed("env_seed") == 5 and cfg.seed("estimate_seed") == 11
    p.write_text("[1]")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_output_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("BRWRE_OUTPUT_DIR", str(tmp_path / "x"))
    assert ExperimentConfig.load().output_dir() == tmp_path / "x"
    assert ExperimentConfig.load(None, [f"output_dir=\"{tmp_path}\""]).output_dir() == tmp_path


# --- simulate -------------------------------------------------------------------------

def test_simulate_single_zero_horizon(capsys, tmp_path):
    code, out, _ = run_cli(["simulate", "--out", str(tmp_path), "--set", "T=0", "--set", "x0=2",
                            "--set", "replicas.simulate=1"], capsys)
    assert code == 0
    lines = (tmp_path / "records.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["M"] == [2]


def test_simulate_byte_identical(capsys, tmp_path):
    for d in ("a", "b"):
        assert run_cli(["simulate", "--out", str(tmp_path / d)] + small_args(), capsys)[0] == 0
    a = (tmp_path / "a" / "records.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "records.jsonl").read_bytes()
    assert len(a.splitlines()) == 5


def test_simulate_population_column(capsys, tmp_path):
    code, _, _ = run_cli(["simulate", "--out", str(tmp_path), "--set", "environment={\"family\": \"constant\", "
                          "\"lo\": 0.5, \"hi\": 0.5, \"p_lo\": 1.0}", "--set", "T=4",
                          "--set", "replicas.simulate=2000", "--set", "mode=\"quenched\""], capsys)
    assert code == 0
    pop = np.array([json.loads(l)["pop"] for l in (tmp_path / "records.jsonl").read_text().splitlines()])
    assert abs(pop.mean() - np.exp(2)) <= 3 * pop.std(ddof=1) / np.sqrt(pop.size)


def test_cap_exceeded_reports_json(capsys, tmp_path):
    code, _, err = run_cli(["simulate", "--out", str(tmp_path), "--set", "population_cap=20",
                            "--set", "replicas.simulate=50"], capsys)
    assert code == 3
    doc = json.loads(err)
    assert doc["error"] == "population_cap" and isinstance(doc["replica"], int)
    assert len((tmp_path / "records.jsonl").read_text().splitlines()) == doc["replica"] + 1


def test_stage_error_names_stage(capsys, tmp_path):
    code, _, err = run_cli(["estimate-means", "--out", str(tmp_path), "--set", "population_cap=20"], capsys)
    assert code == 3
    doc = json.loads(err)
    assert doc["error"] == "population_cap" and doc["stage"] == "estimate-means"


def test_cli_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "brwre.cli", "verify", "counting_inequality",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["pass"] is True
    res = subprocess.run([sys.executable, "-m", "brwre.cli", "verify", "bogus"], capture_output=True, text=True)
    assert res.returncode == 2


# --- pipeline ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    assert cli.main(["pipeline", "--out", str(out)] + small_args()) == 0
    return out


ARTIFACTS = ["config.json", "means.csv", "means.json", "survival.csv", "survival.json", "selection.json",
             "selection.csv", "selection_oben.json", "selection_B.json", "tightness.csv", "tightness.json",
             "summary.json"]


def test_pipeline_artifacts(small_pipeline):
    for name in ARTIFACTS:
        assert (small_pipeline / name).exists(), name
    s = json.loads((small_pipeline / "summary.json").read_text())
    assert s["schema"] == 1 and s["mode"] == "quenched" and s["family"] == "two_point"
    assert len(s["main_inequality"]) == 2
    assert (small_pipeline / "tightness.csv").read_text().startswith("t,q05,q25,q50,q75,q95,spread")
    assert "workers" not in json.loads((small_pipeline / "config.json").read_text())


def test_pipeline_rerun_identical(small_pipeline, tmp_path):
    assert cli.main(["pipeline", "--out", str(tmp_path), "--workers", "2"] + small_args()) == 0
    for name in ARTIFACTS:
        assert (tmp_path / name).read_bytes() == (small_pipeline / name).read_bytes(), name


def test_stage_isolation(small_pipeline, tmp_path, capsys):
    for name in ("means.json", "means.csv", "survival.json", "survival.csv"):
        shutil.copy(small_pipeline / name, tmp_path / name)
    code, out, _ = run_cli(["select", "--out", str(tmp_path)] + small_args(), capsys)
    assert code == 0
    for name in ("selection.json", "selection.csv", "selection_B.json", "selection_oben.json"):
        assert (tmp_path / name).read_bytes() == (small_pipeline / name).read_bytes(), name
    code, out, _ = run_cli(["tightness", "--out", str(tmp_path)] + small_args(), capsys)
    assert code == 0
    assert (tmp_path / "tightness.csv").read_bytes() == (small_pipeline / "tightness.csv").read_bytes()


def test_tightness_without_cache(capsys, tmp_path):
    code, _, err = run_cli(["tightness", "--out", str(tmp_path)] + small_args(), capsys)
    assert code == 3 and json.loads(err)["error"] == "missing_artifact"


def test_constant_env_selection_full_grid(tmp_path):
    # homogeneous rates give a near-linear mean; only t = 0 (below lag 1) and the censored end drop out
    cfg = ExperimentConfig.load(None, ["mode=\"quenched\"", "T=8", "environment={\"family\": \"constant\", "
                                       "\"lo\": 1.0, \"hi\": 1.0, \"p_lo\": 1.0}", "replicas.estimate=400"])
    series = harness.stage_means(cfg, tmp_path)
    sel = harness.stage_select(cfg, series, 5.0, tmp_path)
    assert sel.final.selected.tolist() == series.grid[1:-1].tolist()
    assert sel.oben.selected.tolist() == series.grid[:-1].tolist()


# --- verify ----------------------------------------------------------------------------

def test_verify_outputs_contract(capsys, tmp_path):
    code, out, _ = run_cli(["verify", "c_formula", "--out", str(tmp_path), "--set",
                            "environment={\"family\": \"constant\", \"lo\": 1.0, \"hi\": 1.0, \"p_lo\": 1.0}",
                            "--set", "mode=\"quenched\""], capsys)
    doc = json.loads(out)
    assert {"check", "pass", "observed", "expected", "band"} <= set(doc)
    assert doc["expected"] == pytest.approx(0.4323324, abs=1e-7)
    assert code == (0 if doc["pass"] else 1)
    assert (tmp_path / "verify_c_formula.json").exists()


def test_verify_failure_exit_1(capsys, tmp_path, monkeypatch):
    monkeypatch.setattr(harness, "run_check", lambda name, cfg: {"check": name, "pass": False})
    code, out, _ = run_cli(["verify", "monotone_mean", "--out", str(tmp_path)], capsys)
    assert code == 1 and json.loads(out)["pass"] is False


def test_verify_counting(capsys, tmp_path):
    code, out, _ = run_cli(["verify", "counting_inequality", "--out", str(tmp_path)], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["membership_exact"] and doc["observed"] <= 0
