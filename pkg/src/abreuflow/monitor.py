"""Interior-estimate diagnostics along a run.

Each record collects the quantities the interior estimates control: the
Hessian eigenvalue range and the inverse-Hessian trace on ``P_eps``, the
M-condition value, ``Q d^2`` and the distance between ``P_eps`` and ``P_2eps``,
plus the log-Hessian oscillation against the run's initial state.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import EpsilonTooLarge, IncompatibleFields
from .field import PotentialField, base_eval, inverse_and_cofactor
from .flow import _evaluate, _kernel
from .geometry import (GeometrySnapshot, area_quadrature, bilinear, distance_field, geometry_snapshot,
                       m_condition_estimate, node_graph, segment_trace_integral)
from .io import AtomicCSV, fmt
from .polytope import inset

DIAGNOSTICS_SCHEMA = "# abreuflow diagnostics v1"
DIAGNOSTICS_COLUMNS = ("t", "E", "D", "Abar", "eig_min", "eig_max", "trace_int", "M_hat", "Qd2_max",
                       "dist_eps", "osc_exceed_area")
OSC_DIRECTIONS = 8


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    E: float
    D: float
    Abar: float
    eig_min: float
    eig_max: float
    trace_int: float
    M_hat: float
    Qd2_max: float
    dist_eps: float
    osc_exceed_area: float

    def csv_fields(self):
        return [fmt(x) for x in astuple(self)]

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def region_nodes(field: PotentialField, eps: float):
    """Active nodes lying in ``P_eps``."""
    g = field.grid
    return g.active & (g.margin >= eps - 1e-9 * g.h)


def boundary_nodes(mask):
    """Nodes of ``mask`` with a 4-neighbour outside it."""
    m = np.pad(mask, 1, constant_values=False)
    interior = m[2:, 1:-1] & m[:-2, 1:-1] & m[1:-1, 2:] & m[1:-1, :-2]
    return mask & ~interior


def _check_eps(field, eps):
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    if inset(field.polygon, 2 * eps).is_empty:
        raise EpsilonTooLarge("epsilon too large")
    m2 = region_nodes(field, 2 * eps)
    if not np.any(m2):
        raise EpsilonTooLarge("epsilon too large")
    return region_nodes(field, eps), m2


def trace_integral(field: PotentialField, region) -> float:
    """``int_region Tr(u^ij)`` by the cell midpoint rule."""
    q = area_quadrature(field.grid, region)
    H = base_eval(field.base, field.polygon, q.points, 2)[2] + bilinear(field.v_jets.d2, q)
    W, _, _ = inverse_and_cofactor(H)
    return float(np.sum(q.weights * (W[:, 0, 0] + W[:, 1, 1])))


def theorem_monitors(snapshot: GeometrySnapshot | None, field: PotentialField, eps0: float, m_R: float = 0.05,
                     m_directions: int = 8, osc_area: float = 0.0, t: float | None = None) -> DiagnosticsRecord:
    """One :class:`DiagnosticsRecord` for ``field``.

    ``d(x, dP_eps)`` comes from a multi-source Dijkstra seeded at the boundary
    nodes of ``P_eps``; ``dist_eps`` is the graph distance between the
    boundary nodes of ``P_eps`` and those of ``P_2eps``.
    """
    m1, m2 = _check_eps(field, eps0)
    snap = geometry_snapshot(field, 0.0 if t is None else t) if snapshot is None else snapshot
    t = snap.t if t is None else t
    g = field.grid
    _, A, abar, W = _evaluate(field)
    kern = _kernel(field)
    E = float(kern.energy(A, abar))
    D = float(kern.dissipation(A, abar, W))

    eig = np.linalg.eigvalsh(field.hessian[m1])
    tr = trace_integral(field, inset(field.polygon, eps0))
    M = m_condition_estimate(field, m_R, m_directions)

    graph = node_graph(field)
    d_edge = distance_field(field, boundary_nodes(m1), graph=graph)
    Q = np.full(g.shape, np.nan)
    Q[snap.nodes[:, 0], snap.nodes[:, 1]] = snap.Q
    qd2 = Q * d_edge**2
    sel = m1 & np.isfinite(qd2)
    qd2_max = float(np.max(qd2[sel])) if np.any(sel) else math.nan
    dist_eps = float(np.min(d_edge[boundary_nodes(m2)]))
    return DiagnosticsRecord(float(t), E, D, float(abar), float(eig[:, 0].min()), float(eig[:, 1].max()), tr,
                             float(M), qd2_max, dist_eps, float(osc_area))


# ---------------------------------------------------------------------------


@dataclass
class OscillationReport:
    oscillation: np.ndarray  # max over directions, per active node (NaN elsewhere)
    threshold: float
    exceed_area: float
    bound: float  # Chebyshev bound on the exceedance area
    passed: bool


def hessian_oscillation_check(field_a: PotentialField, field_b: PotentialField, dissipation_integral: float,
                              duration: float, slack: float = 0.0) -> OscillationReport:
    """Oscillation of ``log(nu^T D2u nu)`` between two states of one run.

    ``d/dt log(nu^T D2u nu)`` is bounded pointwise by ``sqrt(tr(W D2A W D2A))``,
    so by Cauchy-Schwarz and Chebyshev the set where the oscillation exceeds
    ``tau = sqrt(int D dt) + slack`` has area at most
    ``duration * int D dt / (2 tau^2)``.
    """
    if not field_a.grid.same_as(field_b.grid) or field_a.base != field_b.base:
        raise IncompatibleFields("incomparable states")
    g = field_a.grid
    m = g.active
    Ha, Hb = field_a.hessian[m], field_b.hessian[m]
    th = np.pi * np.arange(OSC_DIRECTIONS) / OSC_DIRECTIONS
    nus = np.stack([np.cos(th), np.sin(th)], axis=1)
    qa = np.einsum("di,nij,dj->nd", nus, Ha, nus)
    qb = np.einsum("di,nij,dj->nd", nus, Hb, nus)
    osc = np.max(np.abs(np.log(qb) - np.log(qa)), axis=1)
    out = np.full(g.shape, np.nan)
    out[m] = osc
    tau = math.sqrt(max(dissipation_integral, 0.0)) + slack
    area = g.h**2 * int(np.count_nonzero(osc > tau))
    total = float(np.count_nonzero(m)) * g.h**2
    if tau > 0:
        bound = min(total, duration * dissipation_integral / (2 * tau * tau))
    else:
        bound = 0.0 if np.all(osc == 0) else total
    return OscillationReport(out, tau, area, bound, bool(area <= bound + 1e-12 * total))


@dataclass
class BadLineReport:
    nodes: np.ndarray
    eig_min: np.ndarray
    integral: np.ndarray
    ratio: np.ndarray  # integral * threshold
    clipped: int

    @property
    def min_ratio(self) -> float:
        return float(np.min(self.ratio)) if len(self.ratio) else math.nan


def bad_line_monitor(field: PotentialField, threshold: float, R: float, eps0: float = 0.0) -> BadLineReport:
    """Trace integrals through nodes whose smallest Hessian eigenvalue is below ``threshold``.

    The segment of half-length ``R`` runs along the eigenvector of the larger
    eigenvalue. Segments leaving the polygon are counted in ``clipped``.
    """
    g = field.grid
    mask = region_nodes(field, eps0) if eps0 > 0 else g.active
    idx = np.argwhere(mask)
    H = field.hessian[mask]
    lam, vec = np.linalg.eigh(H)
    pick = np.flatnonzero(lam[:, 0] < threshold)
    nodes, eigs, ints = [], [], []
    clipped = 0
    for n in pick:
        p = g.points[tuple(idx[n])]
        try:
            val, _ = segment_trace_integral(field, p, vec[n, :, 1], R)
        except ValueError:
            clipped += 1
            continue
        nodes.append(idx[n])
        eigs.append(lam[n, 0])
        ints.append(val)
    ints = np.array(ints)
    return BadLineReport(np.array(nodes).reshape(-1, 2), np.array(eigs), ints, ints * threshold, clipped)


# ---------------------------------------------------------------------------


class DiagnosticsWriter:
    """Streams records to CSV (flushed per row, renamed into place on close)."""

    def __init__(self, path):
        self._out = AtomicCSV(path, [DIAGNOSTICS_SCHEMA, ",".join(DIAGNOSTICS_COLUMNS)])

    def write(self, record: DiagnosticsRecord):
        self._out.write(record.csv_fields())

    @property
    def rows(self) -> int:
        return self._out.rows

    def close(self):
        self._out.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def emit(records, destination):
    """Write a stream of records to ``destination``; returns the row count."""
    with DiagnosticsWriter(destination) as w:
        for r in records:
            w.write(r)
        return w.rows


def read_diagnostics(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    if not lines or tuple(lines[0].split(",")) != DIAGNOSTICS_COLUMNS:
        raise ValueError("not a diagnostics file")
    for ln in lines[1:]:
        rows.append(DiagnosticsRecord(*(float(x) for x in ln.split(","))))
    return rows
