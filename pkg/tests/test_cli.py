import json

import numpy as np
import pytest

from abreuflow import cli
from abreuflow.errors import ConfigError
from abreuflow.field import read_snapshot, write_snapshot
from abreuflow.monitor import read_diagnostics

from conftest import write_config


def base_config(tmp_path, poly, **kw):
    cfg = dict(polygon=poly.name, h=0.0625, epsilon0=0.2, t_end=2e-5, dt_initial=1e-6, output_dir="out")
    cfg.update(kw)
    return write_config(tmp_path / "run.cfg", **cfg)


def test_validate(poly_files, tmp_path, capsys):
    sq, sx = poly_files
    assert cli.main(["validate", str(sq)]) == 0
    assert cli.main(["validate", str(sx)]) == 0
    bad = tmp_path / "bad.poly"
    bad.write_text("1 0 0\n1 2 0\n-1 -1 -3\n")
    assert cli.main(["validate", str(bad)]) == 1
    assert "vertex determinant 2 ≠ ±1" in capsys.readouterr().out
    assert cli.main(["validate", str(tmp_path / "none.poly")]) == 2


def test_parse_config_roundtrip():
    text = "# c\npolygon = p.poly\nh = 0.03125  # grid\nepsilon0 = 0.2\nt_end = 1e-3\n" \
           "dt_initial = 1e-7\noutput_dir = out\nperturbation = sine\namplitude = 1e-2\n"
    cfg = cli.parse_config(text)
    canon = cfg.to_text()
    assert cli.parse_config(canon).to_text() == canon
    assert "amplitude = 0.01\n" in canon and "c_cfl = 0.15\n" in canon


@pytest.mark.parametrize("text, line, col", [
    ("polygon = p\nh = abc\n", 2, 5),
    ("polygon = p\nbogus = 1\n", 2, 1),
    ("polygon = p\nh 0.1\n", 2, 6),
    ("polygon = p\npolygon = q\n", 2, 1),
    ("polygon = p\n  h = -1\nepsilon0 = 1\nt_end = 1\ndt_initial = 1\noutput_dir = o\n", 2, 7),
    ("polygon = p\nh = 0.1\nepsilon0 = 1\nt_end = 1\ndt_initial = 1\n", 6, 1),
    ("polygon = p\nh = 0.1\nepsilon0 = 1\nt_end = 1\ndt_initial = 1\noutput_dir = o\nperturbation = x\n", 7, 16),
])
def test_config_errors(text, line, col):
    with pytest.raises(ConfigError) as err:
        cli.parse_config(text)
    assert (err.value.line, err.value.column) == (line, col)
    assert str(err.value).startswith(f"line {line}, column {col}: ")


def test_config_epsilon_check(tmp_path, poly_files, capsys):
    path = base_config(tmp_path, poly_files[0], epsilon0=0.3)
    assert cli.main(["run", str(path)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_run_zero(tmp_path, poly_files):
    path = base_config(tmp_path, poly_files[0], cadence=4)
    assert cli.main(["run", str(path)]) == 0
    out = tmp_path / "out"
    ledger = (out / "ledger.csv").read_text().splitlines()
    n = sum(1 for ln in ledger[1:] if ln.endswith(",1")) - 1
    rows = read_diagnostics(out / "diagnostics.csv")
    assert len(rows) == -(-n // 4) + 1
    field, t = read_snapshot(out / "final.snap")
    assert t == pytest.approx(2e-5) and np.max(np.abs(field.v)) < 1e-6


def test_run_snapshots(tmp_path, poly_files):
    path = base_config(tmp_path, poly_files[0], snapshot_every=5, perturbation="sine", amplitude=1e-3)
    assert cli.main(["run", str(path)]) == 0
    snaps = sorted((tmp_path / "out" / "snapshots").iterdir())
    assert snaps and snaps[0].name == "snap_00000005.txt"


def test_run_degenerate(tmp_path, poly_files, capsys):
    path = base_config(tmp_path, poly_files[0], perturbation="sine", amplitude=50)
    assert cli.main(["run", str(path)]) == 4
    assert "initial metric degenerate" in capsys.readouterr().err


def test_run_stall(tmp_path, poly_files, monkeypatch, capsys):
    from abreuflow import flow
    path = base_config(tmp_path, poly_files[0])
    monkeypatch.setattr(flow, "step_rk4", lambda s, dt: flow.Candidate(None, False, None))
    assert cli.main(["run", str(path)]) == 3
    assert "flow stalled" in capsys.readouterr().err
    field, t = read_snapshot(tmp_path / "out" / "final.snap")
    assert t == 0.0
    assert (tmp_path / "out" / "ledger.csv").exists()


def test_diag_matches_run(tmp_path, poly_files, capsys):
    path = base_config(tmp_path, poly_files[0], cadence=1000)
    assert cli.main(["run", str(path)]) == 0
    cfg = cli.load_config(path)
    snap = tmp_path / "init.snap"
    write_snapshot(cli.initial_field(cfg), snap, 0.0)
    capsys.readouterr()
    assert cli.main(["diag", str(snap), "0.2"]) == 0
    printed = capsys.readouterr().out.splitlines()[1]
    first = (tmp_path / "out" / "diagnostics.csv").read_text().splitlines()[2]
    assert printed == first
    assert (tmp_path / "init.snap.geometry.csv").exists()
    assert (tmp_path / "init.snap.diagnostics.csv").read_text().splitlines()[2] == first


def test_diag_errors(tmp_path, poly_files, capsys):
    path = base_config(tmp_path, poly_files[0])
    snap = tmp_path / "s.snap"
    write_snapshot(cli.initial_field(cli.load_config(path)), snap)
    assert cli.main(["diag", str(snap), "0.5"]) == 2
    assert "epsilon too large" in capsys.readouterr().err
    text = snap.read_text()
    (tmp_path / "t.snap").write_text(text[: len(text) // 2])
    assert cli.main(["diag", str(tmp_path / "t.snap"), "0.2"]) == 2
    assert "snapshot malformed" in capsys.readouterr().err
    (tmp_path / "v.snap").write_text(text.replace("v1", "v2", 1))
    assert cli.main(["diag", str(tmp_path / "v.snap"), "0.2"]) == 2
    assert cli.main(["diag", str(tmp_path / "none.snap"), "0.2"]) == 2


def test_oracle_command(tmp_path, poly_files, capsys):
    path = base_config(tmp_path, poly_files[0], base="flat")
    assert cli.main(["oracle", str(path)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] and all(o["passed"] for o in report["oracles"])
    assert json.loads((tmp_path / "out" / "oracle_report.json").read_text()) == report


def test_oracle_failure_exit(tmp_path, poly_files, monkeypatch, capsys):
    from abreuflow import oracles
    path = base_config(tmp_path, poly_files[0], base="flat")
    monkeypatch.setattr(oracles, "run_suite", lambda f, seed=0: [oracles.OracleResult("x", False, 1.0, 0.1)])
    assert cli.main(["oracle", str(path)]) == 1


def test_module_entry():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "abreuflow", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "validate" in r.stdout
