"""Regenerate ``baseline_monitors.json`` from the blessed perturbed-square run.

Run from the repository root: ``python tests/data/bless_baseline.py``.
"""
import json
import sys
import tempfile
from pathlib import Path

from abreuflow import cli

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))
from conftest import SQUARE_TEXT  # noqa: E402

CONFIG = {
    "polygon": "square.poly", "h": 0.03125, "epsilon0": 0.2, "t_end": 1e-3, "dt_initial": 1e-7,
    "output_dir": "out", "perturbation": "sine", "amplitude": 0.01, "cadence": 1000,
}

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    (tmp / "square.poly").write_text(SQUARE_TEXT)
    (tmp / "run.cfg").write_text("".join(f"{k} = {v}\n" for k, v in CONFIG.items()))
    res = cli.simulate(cli.load_config(tmp / "run.cfg"))
rows = res.records
extremes = {
    "eig_min": min(r.eig_min for r in rows),
    "dist_eps": min(r.dist_eps for r in rows),
    "trace_int": max(r.trace_int for r in rows),
    "Qd2_max": max(r.Qd2_max for r in rows),
}
out = {"config": CONFIG, "steps": res.state.steps, "rows": len(rows), "extremes": extremes}
(HERE / "baseline_monitors.json").write_text(json.dumps(out, indent=2) + "\n")
print(json.dumps(out, indent=2))
