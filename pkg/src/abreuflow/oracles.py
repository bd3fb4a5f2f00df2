"""Independent cross-checks of the geometry and flow operators.

Each oracle returns an :class:`OracleResult` with the measured error and the
tolerance it is held to. The suite is what ``abreuflow oracle`` runs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import flow, geometry
from .field import PotentialField, build_grid, field_from_function, rescale_potential
from .monitor import region_nodes
from .polytope import DelzantPolygon, boundary_sigma_length, transform_polygon

TOLERANCES = {
    "dual_abreu": 1e-6,  # relative to 1 + |A|
    "christoffel_rm": 1e-4,  # relative
    "straight_chord": 1e-2,  # Dijkstra may exceed the best straight chord by this fraction
    "scaling": 1e-3,
    "scaling_q": 1e-2,
    "boundary_measure": 1e-2,
    "affine_pointwise": 1e-8,
    "affine_q": 5e-2,  # Q carries O(h^2) stencil error that does not transform
    "affine_distance": 1e-2,
}


@dataclass
class OracleResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    detail: str = ""

    def as_dict(self):
        d = asdict(self)
        d["error"] = None if not math.isfinite(self.error) else self.error
        return d


def _rel(a, b, floor=0.0):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def dual_abreu(field: PotentialField) -> OracleResult:
    m = field.grid.active
    A = geometry.abreu_scalar(field)[m]
    B = geometry.abreu_scalar_cofactor(field)[m]
    err = float(np.max(np.abs(A - B) / (1 + np.abs(A))))
    tol = TOLERANCES["dual_abreu"]
    return OracleResult("dual_abreu", err <= tol, err, tol, "primary vs cofactor form, active nodes")


def christoffel_rm(field: PotentialField) -> OracleResult:
    m = field.grid.active
    a = geometry.curvature_norm(field)[m]
    b = geometry.curvature_norm_oracle(field)[m]
    scale = max(float(np.max(np.abs(b))), 1e-300)
    err = float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12 * scale))) if scale > 1e-300 else float(
        np.max(np.abs(a)))
    tol = TOLERANCES["christoffel_rm"]
    ok = err <= tol if scale > 1e-300 else err <= 1e-10
    return OracleResult("christoffel_rm", ok, err, tol, "contraction vs Christoffel |Rm|")


def straight_chord(field: PotentialField) -> OracleResult:
    """Distance from the node nearest the Chebyshev centre to the boundary nodes of ``P_eps``."""
    poly = field.polygon
    g = field.grid
    eps = 0.5 * poly.inradius
    region = region_nodes(field, eps)
    m = np.pad(region, 1)
    edge = region & ~(m[2:, 1:-1] & m[:-2, 1:-1] & m[1:-1, 2:] & m[1:-1, :-2])
    node = g.nearest_node(poly.chebyshev_center)
    p = g.points[node]
    graph = geometry.node_graph(field)
    d = geometry.distance_field(field, _single(g, node), graph=graph)
    dij = float(np.min(d[edge]))
    chord = geometry.straight_chord_bound(field, p, edge)
    err = (dij - chord) / chord
    tol = TOLERANCES["straight_chord"]
    return OracleResult("straight_chord", err <= tol, err, tol, f"dijkstra {dij:.6g} vs chord {chord:.6g}")


def _single(g, node):
    m = np.zeros(g.shape, dtype=bool)
    m[node] = True
    return m


def scaling_laws(field: PotentialField, lam: float = 2.0) -> list[OracleResult]:
    poly = field.polygon
    c = poly.chebyshev_center
    fr = rescale_potential(field, lam, c)
    m = field.grid.active
    out = []
    tol, tol_q = TOLERANCES["scaling"], TOLERANCES["scaling_q"]
    A0, A1 = geometry.abreu_scalar(field)[m], geometry.abreu_scalar(fr)[m]
    scale = 1 + np.max(np.abs(A0))
    out.append(_result("scaling_A", float(np.max(np.abs(A1 * lam - A0)) / scale), tol, "A -> A / lam"))
    r0, r1 = geometry.curvature_norm(field)[m], geometry.curvature_norm(fr)[m]
    out.append(_result("scaling_rm", float(np.max(np.abs(r1 * lam - r0)) / (1 + np.max(r0))), tol,
                       "|Rm| -> |Rm| / lam"))
    q0, q1 = geometry.q_quantity(field).q, geometry.q_quantity(fr).q
    ok = np.isfinite(q0) & np.isfinite(q1)
    out.append(_result("scaling_Q", float(np.max(np.abs(q1[ok] * lam - q0[ok])) / (1 + np.max(q0[ok]))), tol_q,
                       "Q -> Q / lam"))
    e0, e1 = flow.calabi_energy(field), flow.calabi_energy(fr)
    out.append(_result("scaling_energy", abs(e1 - e0) / max(abs(e0), 1e-12), tol, "energy invariant"))
    R = 0.1 * poly.inradius
    m0 = geometry.m_condition_estimate(field, R)
    m1 = geometry.m_condition_estimate(fr, lam * R)
    out.append(_result("scaling_M", abs(m1 - m0) / max(abs(m0), 1e-12), tol, "M-condition invariant"))
    return out


def _result(name, err, tol, detail=""):
    return OracleResult(name, bool(err <= tol), float(err), float(tol), detail)


def boundary_measure(field: PotentialField) -> OracleResult:
    tol = TOLERANCES["boundary_measure"]
    if field.base != "guillemin":
        return OracleResult("boundary_measure", True, 0.0, tol, "not applicable to the flat base")
    avg = geometry.average_scalar(field)
    poly = field.polygon
    target = 2 * sum(boundary_sigma_length(poly, k) for k in range(poly.n_edges))
    err = abs(avg.integral - target)
    return OracleResult("boundary_measure", err <= tol, err, tol, f"quadrature {avg.integral:.8g} vs {target:.8g}")


def random_unimodular(rng, steps: int = 3):
    """Product of elementary shears and a possible reflection; entries stay small."""
    S = np.eye(2, dtype=int)
    for _ in range(steps):
        E = np.eye(2, dtype=int)
        i = rng.integers(2)
        E[i, 1 - i] = rng.choice([-1, 1])
        S = E @ S
    if rng.integers(2):
        S = np.array([[0, 1], [1, 0]]) @ S
    return S


def affine_invariance(polygon: DelzantPolygon, h: float, cubic, n_maps: int = 5, seed: int = 0,
                      n_points: int = 3) -> list[OracleResult]:
    """A, |Rm|, Q and geodesic distance at corresponding points of ``P`` and ``S P + b``.

    ``cubic`` is a cubic polynomial perturbation, so finite-difference jets are
    exact and pointwise quantities must agree to rounding. Each transformed
    grid is anchored at the image of a node so points correspond exactly.
    """
    rng = np.random.default_rng(seed)
    g = build_grid(polygon, h)
    f = field_from_function(g, cubic)
    A = geometry.abreu_scalar(f)
    rm = geometry.curvature_norm(f)
    Q = geometry.q_quantity(f).q
    cand = np.argwhere(region_nodes(f, 0.6 * polygon.inradius))
    errs = {"affine_A": 0.0, "affine_rm": 0.0, "affine_Q": 0.0, "affine_distance": 0.0}
    for _ in range(n_maps):
        S = random_unimodular(rng)
        b = rng.normal(size=2)
        Sinv = np.linalg.inv(S)
        poly2 = transform_polygon(polygon, S, b)
        if h > 0.5 * poly2.inradius:
            continue
        picks = cand[rng.choice(len(cand), size=min(n_points, len(cand)), replace=False)]
        for node in picks:
            x = g.points[tuple(node)]
            y = S @ x + b
            g2 = build_grid(poly2, h, anchor=y)
            f2 = field_from_function(g2, lambda z: cubic((z - b) @ Sinv.T))
            n2 = g2.nearest_node(y)
            if not g2.active[n2]:
                continue
            a2 = geometry.abreu_scalar(f2, n2)
            errs["affine_A"] = max(errs["affine_A"], abs(a2 - A[tuple(node)]) / (1 + abs(A[tuple(node)])))
            r2 = geometry.curvature_norm(f2, n2)
            errs["affine_rm"] = max(errs["affine_rm"], abs(r2 - rm[tuple(node)]) / (1 + rm[tuple(node)]))
            if poly2.margin(y) < 8 * h or polygon.margin(x) < 8 * h:
                continue
            q2 = geometry.q_quantity(f2).q[n2]
            if np.isfinite(q2) and np.isfinite(Q[tuple(node)]):
                errs["affine_Q"] = max(errs["affine_Q"], abs(q2 - Q[tuple(node)]) / (1 + Q[tuple(node)]))
        # geodesic distance between two interior points deep inside both polygons
        pn = g.nearest_node(polygon.chebyshev_center)
        qn = (pn[0] + max(1, int(0.3 * polygon.inradius / h)), pn[1])
        p, q = g.points[pn], g.points[qn]
        ends = np.array([S @ p + b, S @ q + b])
        if np.min(poly2.margin(ends)) < 4 * h or not (g.active[pn] and g.active[qn]):
            continue
        d1 = geometry.geodesic_distance(f, p, q)
        g2 = build_grid(poly2, h, anchor=ends[0])
        f2 = field_from_function(g2, lambda z: cubic((z - b) @ Sinv.T))
        d2 = geometry.geodesic_distance(f2, ends[0], ends[1])
        errs["affine_distance"] = max(errs["affine_distance"], abs(d2 - d1) / d1)
    return [
        _result("affine_A", errs["affine_A"], TOLERANCES["affine_pointwise"], "A at corresponding nodes"),
        _result("affine_rm", errs["affine_rm"], TOLERANCES["affine_pointwise"], "|Rm| at corresponding nodes"),
        _result("affine_Q", errs["affine_Q"], TOLERANCES["affine_q"], "Q at corresponding nodes"),
        _result("affine_distance", errs["affine_distance"], TOLERANCES["affine_distance"],
                "geodesic distance between corresponding points"),
    ]


def cubic_perturbation(amplitude: float = 1e-3, seed: int = 0, center=(0.5, 0.5)):
    rng = np.random.default_rng(seed)
    terms = [(p, q) for p in range(4) for q in range(4 - p) if p + q >= 2]
    coef = rng.normal(size=len(terms))
    coef *= amplitude / np.abs(coef).sum()
    cx, cy = center

    def v(x):
        X, Y = x[..., 0] - cx, x[..., 1] - cy
        return sum(c * X**p * Y**q for c, (p, q) in zip(coef, terms))

    return v


def run_suite(field: PotentialField, seed: int = 0) -> list[OracleResult]:
    """All oracles on ``field``; affine checks use a cubic perturbation of its polygon."""
    results = [dual_abreu(field), christoffel_rm(field), boundary_measure(field), straight_chord(field)]
    results += scaling_laws(field)
    if field.base == "guillemin":
        h = max(field.grid.h, field.polygon.inradius / 16)
        results += affine_invariance(field.polygon, h, cubic_perturbation(1e-3, seed, field.polygon.centroid),
                                     seed=seed)
    return results
