"""Command line: ``validate``, ``run``, ``oracle`` and ``diag``.

Exit codes: 0 success; 1 invalid polygon (``validate``) or failed oracle;
2 unreadable input, configuration error, bad snapshot or epsilon too large;
3 flow stalled (last state persisted); 4 initial metric degenerate.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import MISSING, dataclass, fields
from pathlib import Path

import numpy as np

from . import flow, geometry, monitor, oracles
from .errors import (ConfigError, EpsilonTooLarge, FlowStalled, GridError, MetricDegenerate, PolygonError,
                     SnapshotError)
from .field import BASES, build_grid, field_from_function, perturbation, read_snapshot, write_snapshot
from .io import atomic_write
from .polytope import parse_polygon, read_polygon

PERTURBATIONS = ("zero", "sine", "cubic", "quartic", "trig")


@dataclass
class RunConfig:
    polygon: str
    h: float
    epsilon0: float
    t_end: float
    dt_initial: float
    output_dir: str
    collar_width: int = 3
    c_cfl: float = 0.15
    perturbation: str = "zero"
    amplitude: float = 0.0
    modes: int = 1
    seed: int = 0
    base: str = "guillemin"
    cadence: int = 100
    snapshot_every: int = 0
    neighbor_radius: int = 2
    m_R: float = 0.05
    m_directions: int = 8
    threads: int = 1
    energy_rtol: float = 1e-10
    energy_atol: float = 1e-20
    source: str = ""  # path of the file the config came from; not serialised

    def to_text(self) -> str:
        """Canonical form: every key in declaration order, floats in shortest round-trip form."""
        lines = []
        for f in fields(self):
            if f.name == "source":
                continue
            val = getattr(self, f.name)
            lines.append(f"{f.name} = {_fmt_value(val)}")
        return "\n".join(lines) + "\n"

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.source:
            p = Path(self.source).resolve().parent / p
        return p


def _fmt_value(val):
    if isinstance(val, float):
        return repr(val)
    return str(val)


_POSITIVE = {"h", "epsilon0", "t_end", "dt_initial", "c_cfl", "cadence", "m_R", "m_directions", "threads"}
_NONNEG = {"amplitude", "snapshot_every", "energy_rtol", "energy_atol", "seed"}


def parse_config(text: str, source: str = "") -> RunConfig:
    """Parse ``key = value`` lines with ``#`` comments. Errors carry line and column."""
    known = {f.name: f for f in fields(RunConfig) if f.name != "source"}
    values, where = {}, {}
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, 1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", lineno, len(body.rstrip()) + 1)
        key_part, val_part = body.split("=", 1)
        key = key_part.strip()
        kcol = len(key_part) - len(key_part.lstrip()) + 1
        vcol = len(key_part) + 2 + (len(val_part) - len(val_part.lstrip()))
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", lineno, kcol)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, kcol)
        sval = val_part.strip()
        if not sval:
            raise ConfigError(f"missing value for {key!r}", lineno, vcol)
        typ = known[key].type
        try:
            if typ in ("float", float):
                val = float(sval)
                if not math.isfinite(val):
                    raise ValueError
            elif typ in ("int", int):
                val = int(sval)
            else:
                val = sval
        except ValueError:
            raise ConfigError(f"invalid value {sval!r} for {key!r}", lineno, vcol) from None
        values[key] = val
        where[key] = (lineno, vcol)
    end = (len(lines) + 1, 1)
    for name, f in known.items():
        if name not in values and f.default is MISSING:
            raise ConfigError(f"missing required key {name!r}", *end)
    for k in _POSITIVE & values.keys():
        if not values[k] > 0:
            raise ConfigError(f"{k} must be positive", *where[k])
    for k in _NONNEG & values.keys():
        if values[k] < 0:
            raise ConfigError(f"{k} must be non-negative", *where[k])
    if values.get("collar_width", 3) < 2:
        raise ConfigError("collar_width must be at least 2", *where.get("collar_width", end))
    if values.get("neighbor_radius", 2) != 2:
        raise ConfigError("only neighbor_radius = 2 (16 neighbours) is supported", *where["neighbor_radius"])
    if values.get("perturbation", "zero") not in PERTURBATIONS:
        raise ConfigError(f"perturbation must be one of {', '.join(PERTURBATIONS)}", *where["perturbation"])
    if values.get("base", "guillemin") not in BASES:
        raise ConfigError(f"base must be one of {', '.join(BASES)}", *where["base"])
    cfg = RunConfig(source=source, **values)
    cfg._where = where  # for error positions in later checks
    return cfg


def load_config(path) -> RunConfig:
    """Parse the file and check it against its polygon; raises :class:`ConfigError`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}") from None
    cfg = parse_config(text, os.fspath(path))
    where = cfg._where
    try:
        poly = read_polygon(cfg.resolve(cfg.polygon))
    except OSError as exc:
        raise ConfigError(f"cannot read polygon: {exc.strerror}", *where["polygon"]) from None
    except PolygonError as exc:
        raise ConfigError(f"invalid polygon: {exc}", *where["polygon"]) from None
    if not cfg.epsilon0 < poly.inradius / 2:
        raise ConfigError("epsilon0 must be below half the inradius", *where["epsilon0"])
    if cfg.h > poly.inradius:
        raise ConfigError("grid too coarse", *where["h"])
    out = cfg.resolve(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError:
        raise ConfigError("output_dir is not writable", *where["output_dir"]) from None
    if not os.access(out, os.W_OK):
        raise ConfigError("output_dir is not writable", *where["output_dir"])
    cfg.polygon_obj = poly
    return cfg


def initial_field(cfg: RunConfig):
    poly = getattr(cfg, "polygon_obj", None) or read_polygon(cfg.resolve(cfg.polygon))
    grid = build_grid(poly, cfg.h, collar_width=cfg.collar_width)
    v0 = perturbation(cfg.perturbation, cfg.amplitude, cfg.seed, cfg.modes)
    return field_from_function(grid, v0, cfg.base)


# ---------------------------------------------------------------------------
# run


@dataclass
class RunResult:
    state: flow.FlowState
    ledger: flow.EnergyLedger
    records: list
    stalled: bool = False


def simulate(cfg: RunConfig, out_dir: Path | None = None) -> RunResult:
    """Advance the configured flow and write ledger, diagnostics and snapshots to ``out_dir``."""
    out = cfg.resolve(cfg.output_dir) if out_dir is None else Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    field0 = initial_field(cfg)
    field0.check_spd(field0.grid.inside)
    dt_max = flow.dt_limit(field0, cfg.c_cfl)
    state = flow.FlowState(0.0, field0, min(cfg.dt_initial, dt_max))
    records = []
    snapdir = out / "snapshots"
    if cfg.snapshot_every:
        snapdir.mkdir(exist_ok=True)

    with flow.ledger_csv(out / "ledger.csv") as lcsv, monitor.DiagnosticsWriter(out / "diagnostics.csv") as dcsv:
        ledger = flow.EnergyLedger(sink=lcsv)

        def record(s: flow.FlowState):
            osc = 0.0
            if s.steps:
                osc = monitor.hessian_oscillation_check(field0, s.field, ledger.integral, s.t).exceed_area
            rec = monitor.theorem_monitors(None, s.field, cfg.epsilon0, cfg.m_R, cfg.m_directions, osc, t=s.t)
            records.append(rec)
            dcsv.write(rec)
            s._cache["recorded"] = True

        def on_accept(s: flow.FlowState):
            if s.steps % cfg.cadence == 0:
                record(s)
            if cfg.snapshot_every and s.steps % cfg.snapshot_every == 0:
                write_snapshot(s.field, snapdir / f"snap_{s.steps:08d}.txt", s.t)

        record(state)
        stalled = False
        try:
            state, ledger = flow.advance(state, cfg.t_end, dt_max, ledger, cfg.energy_rtol, cfg.energy_atol,
                                         on_accept=on_accept)
        except FlowStalled as exc:
            state = exc.state
            stalled = True
        if not state._cache.get("recorded"):
            record(state)
    write_snapshot(state.field, out / "final.snap", state.t)
    return RunResult(state, ledger, records, stalled)


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    try:
        text = Path(args.polygon).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {args.polygon}: {exc.strerror}", file=sys.stderr)
        return 2
    try:
        poly = parse_polygon(text)
    except PolygonError as exc:
        for v in getattr(exc, "violations", None) or [str(exc)]:
            print(f"violation: {v}")
        return 1
    print(f"valid Delzant polygon with {poly.n_edges} edges, area {poly.area:.12g}")
    return 0


def _config_or_exit(path):
    try:
        return load_config(path), 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return None, 2


def cmd_run(args) -> int:
    cfg, code = _config_or_exit(args.config)
    if cfg is None:
        return code
    try:
        res = simulate(cfg)
    except MetricDegenerate as exc:
        print(f"initial metric degenerate: {exc}", file=sys.stderr)
        return 4
    except (GridError, EpsilonTooLarge) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    s = res.state
    if res.stalled:
        print(f"{flow.STALL_MESSAGE} at t = {s.t:.17g}; last state saved", file=sys.stderr)
        return 3
    print(f"t = {s.t:.17g}  steps = {s.steps}  rejections = {s.rejections}  E = {s.energy:.6e}")
    return 0


def cmd_oracle(args) -> int:
    cfg, code = _config_or_exit(args.config)
    if cfg is None:
        return code
    try:
        field = initial_field(cfg)
        field.check_spd(field.grid.inside)
    except MetricDegenerate as exc:
        print(f"initial metric degenerate: {exc}", file=sys.stderr)
        return 4
    results = oracles.run_suite(field, seed=cfg.seed)
    report = {"passed": all(r.passed for r in results), "oracles": [r.as_dict() for r in results]}
    text = json.dumps(report, indent=2)
    atomic_write(cfg.resolve(cfg.output_dir) / "oracle_report.json", text + "\n")
    print(text)
    return 0 if report["passed"] else 1


def cmd_diag(args) -> int:
    try:
        field, t = read_snapshot(args.snapshot)
    except OSError as exc:
        print(f"error: cannot read {args.snapshot}: {exc.strerror}", file=sys.stderr)
        return 2
    except SnapshotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(args.snapshot).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.snapshot).name
    try:
        snap = geometry.geometry_snapshot(field, t)
        rec = monitor.theorem_monitors(snap, field, args.epsilon0, args.m_R, args.m_directions, 0.0, t=t)
    except EpsilonTooLarge:
        print("error: epsilon too large", file=sys.stderr)
        return 2
    except MetricDegenerate as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    monitor.emit([rec], out / f"{stem}.diagnostics.csv")
    snap.write_csv(out / f"{stem}.geometry.csv")
    print(",".join(monitor.DIAGNOSTICS_COLUMNS))
    print(",".join(rec.csv_fields()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abreuflow", description="Calabi flow on toric surfaces.")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("validate", help="check that a polygon file is Delzant")
    v.add_argument("polygon")
    v.set_defaults(func=cmd_validate)
    r = sub.add_parser("run", help="integrate the flow described by a config file")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)
    o = sub.add_parser("oracle", help="run the cross-check suite on the configured initial field")
    o.add_argument("config")
    o.set_defaults(func=cmd_oracle)
    d = sub.add_parser("diag", help="diagnostics of a stored snapshot")
    d.add_argument("snapshot")
    d.add_argument("epsilon0", type=float)
    d.add_argument("--m-R", dest="m_R", type=float, default=RunConfig.m_R)
    d.add_argument("--m-directions", dest="m_directions", type=int, default=RunConfig.m_directions)
    d.add_argument("--out", help="output directory (default: next to the snapshot)")
    d.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
