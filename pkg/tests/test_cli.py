import copy
import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from macrogrid.cli import main


def write_scenario(path, raw):
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    return str(path)


@pytest.fixture(scope="module")
def short_scenario(tmp_path_factory, reference_config):
    raw = copy.deepcopy(reference_config.raw)
    raw["solver"].update(duration=8.0, output_rate=20.0)
    raw["channels"] = raw["channels"][:4]
    return write_scenario(tmp_path_factory.mktemp("cfg") / "short.yaml", raw)


@pytest.fixture(scope="module")
def sim_dirs(tmp_path_factory, short_scenario):
    dirs = []
    for k in range(2):
        d = tmp_path_factory.mktemp(f"sim{k}")
        assert main(["simulate", "--config", short_scenario, "--out-dir", str(d)]) == 0
        dirs.append(d)
    return dirs


def test_help_and_unknown_verb(capsys):
    assert main(["--help"]) == 0
    assert main(["frobnicate"]) == 2
    assert main([]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "macrogrid", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for verb in ("powerflow", "simulate", "analyze", "freqscan", "design", "validate"):
        assert verb in r.stdout


def test_malformed_config_exits_2_without_output(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nsolver: {dtt: 1}\nwi: {name: w, buses: [{id: '1', kind: slack}]}\n")
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(bad), "--out-dir", str(out)]) == 2
    assert not out.exists()
    assert capsys.readouterr().err.startswith("error:")
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml"), "--out-dir", str(out)]) == 2
    assert main(["simulate", "--jobs", "0", "--out-dir", str(out)]) == 2
    assert not out.exists()


def test_missing_upstream_artifact_exits_2(tmp_path):
    assert main(["design", "--out-dir", str(tmp_path)]) == 2
    assert main(["validate", "--out-dir", str(tmp_path)]) == 2
    assert main(["analyze", "--out-dir", str(tmp_path)]) == 2


def test_simulate_byte_identical(sim_dirs):
    a, b = (d / "timeseries.csv" for d in sim_dirs)
    assert a.read_bytes() == b.read_bytes()


def test_analyze_batch_parallel(sim_dirs, short_scenario, tmp_path):
    inputs = [str(d / "timeseries.csv") for d in sim_dirs]
    assert main(["analyze", "--config", short_scenario, "--out-dir", str(tmp_path), "--jobs", "2",
                 "--input", *inputs]) == 0
    reps = [json.loads((tmp_path / f"modes_{k}.json").read_text()) for k in range(2)]
    assert reps[0]["modes"] == reps[1]["modes"]
    assert reps[0]["config_hash"] and reps[0]["command"] == "analyze"
    assert (tmp_path / "mode_shapes_0.csv").is_file()
    serial = tmp_path / "serial"
    assert main(["analyze", "--config", short_scenario, "--out-dir", str(serial),
                 "--input", inputs[0]]) == 0
    assert json.loads((serial / "modes.json").read_text())["modes"] == reps[0]["modes"]


def test_powerflow_outputs(tmp_path):
    assert main(["powerflow", "--out-dir", str(tmp_path)]) == 0
    summ = json.loads((tmp_path / "powerflow.json").read_text())["summary"]
    assert summ["outer_iterations"] <= 20
    for f in summ["files"]:
        assert (tmp_path / f).is_file()


def test_zero_setpoints_flat_dc_profile(tmp_path, reference_config):
    raw = copy.deepcopy(reference_config.raw)
    for c in raw["mtdc"]["converters"]:
        if c.get("mode", "pq") != "slack":
            c["p_ref"] = 0.0
    cfg = write_scenario(tmp_path / "zero.yaml", raw)
    assert main(["powerflow", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    with open(tmp_path / "mtdc_dc_node.csv") as fh:
        rows = list(csv.DictReader(fh))
    v = np.array([float(r["v_pu"]) for r in rows])
    v_ref = next(c for c in raw["mtdc"]["converters"] if c.get("mode") == "slack").get("v_dc_ref", 1.0)
    np.testing.assert_allclose(v, v_ref, atol=1e-9)


def test_numerical_failure_exits_1(tmp_path, short_scenario, reference_config):
    raw = copy.deepcopy(reference_config.raw)
    raw["solver"].update(max_outer=1, outer_tol=1e-14)
    cfg = write_scenario(tmp_path / "tight.yaml", raw)
    assert main(["powerflow", "--config", cfg, "--out-dir", str(tmp_path)]) == 1
