import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from icebhm.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, main
from icebhm.results import INCOMPLETE, MANIFEST, verify_manifest


def write_cfg(tmp_path, data, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


TRANSPORT = {
    "mode": "transport",
    "seed": 0,
    "out": "res",
    "transport": {"nx": 16, "ny": 16, "dx": 1 / 16, "dt": 0.01, "n_steps": 50},
}

SIMULATE = {"mode": "simulate", "seed": 3, "out": "sim", "simulate": {"n_sites": 20, "mesh_edge": 0.1}}


def test_transport_run_and_manifest(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TRANSPORT)
    assert main(["--config", cfg]) == EXIT_OK
    out = tmp_path / "res"
    manifest = json.loads((out / MANIFEST).read_text())
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {MANIFEST}
    assert set(manifest["files"]) == on_disk
    assert not (out / INCOMPLETE).exists()
    assert manifest["seed"] == 0 and manifest["mode"] == "transport"
    summary = json.loads((out / "summary.json").read_text())
    assert abs(summary["relative_budget_residual"]) < 1e-12
    assert verify_manifest(out) == []
    (out / "summary.json").write_text("{}\n")
    assert verify_manifest(out) == ["summary.json"]
    assert "wrote" in capsys.readouterr().out


def test_missing_seed_is_config_error(tmp_path, capsys):
    data = {k: v for k, v in TRANSPORT.items() if k != "seed"}
    assert main(["--config", write_cfg(tmp_path, data)]) == EXIT_CONFIG
    assert "seed" in capsys.readouterr().err


def test_all_config_errors_reported_together(tmp_path, capsys):
    data = dict(TRANSPORT, seed=-1, transport={**TRANSPORT["transport"], "nx": 0, "bogus": 1})
    assert main(["--config", write_cfg(tmp_path, data)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "seed" in err and "nx" in err and "bogus" in err


def test_unknown_mode_and_wrong_type(tmp_path, capsys):
    assert main(["--config", write_cfg(tmp_path, dict(TRANSPORT, mode="dance"))]) == EXIT_CONFIG
    assert main(["--config", write_cfg(tmp_path, dict(TRANSPORT, seed="zero"))]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "absent.yaml")]) == EXIT_IO


def test_seed_override_on_command_line(tmp_path):
    data = {k: v for k, v in TRANSPORT.items() if k != "seed"}
    assert main(["--config", write_cfg(tmp_path, data), "--seed", "5"]) == EXIT_OK
    assert json.loads((tmp_path / "res" / MANIFEST).read_text())["seed"] == 5


def test_cfl_violation_exits_numerical(tmp_path, capsys):
    data = dict(TRANSPORT, transport={**TRANSPORT["transport"], "dt": 0.1})
    assert main(["--config", write_cfg(tmp_path, data)]) == EXIT_NUMERICAL
    assert "CFL" in capsys.readouterr().err
    out = tmp_path / "res"
    assert not (out / MANIFEST).exists()
    if out.exists():
        assert (out / INCOMPLETE).exists()


def test_simulate_then_fit(tmp_path):
    assert main(["--config", write_cfg(tmp_path, SIMULATE, "sim.yaml")]) == EXIT_OK
    fit = {
        "mode": "fit",
        "seed": 1,
        "out": "fit",
        "fit": {
            "observations": "sim/observations.csv",
            "vertices": "sim/mesh_vertices.csv",
            "triangles": "sim/mesh_triangles.csv",
            "method": "map",
        },
    }
    assert main(["--config", write_cfg(tmp_path, fit, "fit.yaml")]) == EXIT_OK
    assert verify_manifest(tmp_path / "fit") == []
    summary = json.loads((tmp_path / "fit/summary.json").read_text())
    assert summary["n_obs"] == 20


def test_missing_input_file_named(tmp_path, capsys):
    fit = {"mode": "fit", "seed": 1, "fit": {"observations": "nope.csv", "polygon": "nope2.csv"}}
    assert main(["--config", write_cfg(tmp_path, fit)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "nope.csv" in err and "nope2.csv" in err


def test_malformed_observations_exit_io(tmp_path, capsys):
    assert main(["--config", write_cfg(tmp_path, SIMULATE, "sim.yaml")]) == EXIT_OK
    bad = tmp_path / "bad.csv"
    bad.write_text("s1,s2,value\n0.1,0.2,abc\n")
    fit = {"mode": "fit", "seed": 1, "fit": {"observations": "bad.csv", "polygon": "sim/polygon.csv"}}
    assert main(["--config", write_cfg(tmp_path, fit)]) == EXIT_IO
    assert "input error" in capsys.readouterr().err


def test_repeat_runs_identical(tmp_path):
    cfg = write_cfg(tmp_path, SIMULATE)
    hashes = []
    for _ in range(2):
        assert main(["--config", cfg, "--threads", "1"]) == EXIT_OK
        hashes.append(json.loads((tmp_path / "sim" / MANIFEST).read_text())["files"])
    assert hashes[0] == hashes[1]


def test_console_script_runs():
    r = subprocess.run([sys.executable, "-m", "icebhm.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--config" in r.stdout
