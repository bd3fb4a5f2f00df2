"""Delzant polygons, Euclidean insets and point classification.

A polygon is stored as a list of edges ``(normal, offset)`` describing the
affine functions ``l_k(x) = <x, normal_k> - offset_k``, positive inside.
Edge indices follow input order; vertices are kept counterclockwise.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import PolygonError

# relative tolerance for on-line / on-boundary decisions
_TOL = 1e-12


def _scale(vertices):
    return max(1.0, float(np.max(np.abs(vertices)))) if len(vertices) else 1.0


def _line_intersection(n1, c1, n2, c2):
    m = np.array([n1, n2], dtype=float)
    return np.linalg.solve(m, np.array([c1, c2], dtype=float))


def clip_halfplanes(vertices, normals, offsets):
    """Clip a convex counterclockwise polygon by half-planes <x, n> >= c.

    Sutherland-Hodgman; returns an ``(m, 2)`` array, possibly empty.
    """
    poly = [np.asarray(p, dtype=float) for p in vertices]
    for n, c in zip(np.asarray(normals, dtype=float), np.asarray(offsets, dtype=float)):
        if not poly:
            break
        out = []
        k = len(poly)
        for i in range(k):
            p, q = poly[i], poly[(i + 1) % k]
            fp, fq = p @ n - c, q @ n - c
            if fp >= 0:
                out.append(p)
            if (fp >= 0) != (fq >= 0):
                s = fp / (fp - fq)
                out.append(p + s * (q - p))
        poly = out
    if len(poly) < 3:
        return np.zeros((0, 2))
    return np.array(poly)


def polygon_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


class PointClass(NamedTuple):
    kind: str  # "interior", "boundary" or "exterior"
    margin: float  # signed Euclidean distance to the nearest edge line


@dataclass(frozen=True, eq=False)
class ConvexRegion:
    """Bounded intersection of half-planes ``<x, n_k> - c_k >= 0``."""

    normals: np.ndarray
    offsets: np.ndarray
    vertices: np.ndarray

    @property
    def unit_normals(self):
        return self.normals / np.linalg.norm(self.normals, axis=1)[:, None]

    @property
    def unit_offsets(self):
        return self.offsets / np.linalg.norm(self.normals, axis=1)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3

    @cached_property
    def area(self) -> float:
        return polygon_area(self.vertices)

    @cached_property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        cross = x * np.roll(y, -1) - np.roll(x, -1) * y
        a = 0.5 * cross.sum()
        cx = ((x + np.roll(x, -1)) * cross).sum() / (6 * a)
        cy = ((y + np.roll(y, -1)) * cross).sum() / (6 * a)
        return np.array([cx, cy])

    def edge_values(self, x) -> np.ndarray:
        """``l_k(x)`` for every edge; ``x`` has shape ``(..., 2)``."""
        x = np.asarray(x, dtype=float)
        return x @ self.normals.T.astype(float) - self.offsets

    def margin(self, x) -> np.ndarray:
        """Signed Euclidean distance to the nearest edge line (positive inside)."""
        x = np.asarray(x, dtype=float)
        return np.min(x @ self.unit_normals.T - self.unit_offsets, axis=-1)

    def classify(self, x) -> PointClass:
        m = float(self.margin(x))
        tol = _TOL * _scale(self.vertices)
        if m > tol:
            return PointClass("interior", m)
        if m >= -tol:
            return PointClass("boundary", m)
        return PointClass("exterior", m)

    @cached_property
    def inradius(self) -> float:
        return self._chebyshev[1]

    @property
    def chebyshev_center(self) -> np.ndarray:
        return self._chebyshev[0]

    @cached_property
    def _chebyshev(self):
        # maximise r subject to <x, n_hat> - c_hat >= r
        un, uc = self.unit_normals, self.unit_offsets
        a_ub = np.hstack([-un, np.ones((len(un), 1))])
        res = linprog(c=[0, 0, -1], A_ub=a_ub, b_ub=-uc, bounds=[(None, None)] * 3)
        if not res.success:
            return np.full(2, np.nan), 0.0
        return res.x[:2], float(res.x[2])

    @cached_property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.max(np.linalg.norm(v[:, None, :] - v[None, :, :], axis=-1)))


@dataclass(frozen=True, eq=False)
class DelzantPolygon(ConvexRegion):
    order: np.ndarray = field(default=None)  # edge indices in counterclockwise order

    @property
    def n_edges(self) -> int:
        return len(self.offsets)

    def edge_endpoints(self, k: int):
        """Endpoints of edge ``k`` in counterclockwise order."""
        pos = int(np.flatnonzero(self.order == k)[0])
        # vertex i joins order[i] and order[i+1]
        return self.vertices[pos - 1], self.vertices[pos]

    def to_text(self) -> str:
        lines = [f"{int(n[0])} {int(n[1])} {float(c)!r}" for n, c in zip(self.normals, self.offsets)]
        return "\n".join(lines) + "\n"

    @cached_property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @property
    def edges(self):
        return [((int(n[0]), int(n[1])), float(c)) for n, c in zip(self.normals, self.offsets)]


@dataclass(frozen=True, eq=False)
class InsetRegion(ConvexRegion):
    parent: DelzantPolygon = field(default=None)
    epsilon: float = 0.0


def delzant_violations(edges) -> list[str]:
    """Every broken invariant of a candidate edge list; empty if valid."""
    try:
        _build(edges)
    except PolygonError as err:
        return err.violations
    return []


def validate_delzant(edges: Sequence) -> DelzantPolygon:
    """Validate ``[(normal, offset), ...]`` and return a :class:`DelzantPolygon`.

    Raises :class:`PolygonError` whose ``violations`` names each failed check.
    """
    return _build(edges)


def _build(edges) -> DelzantPolygon:
    if edges is None or len(edges) < 3:
        raise PolygonError("degenerate polygon")
    normals = np.array([e[0] for e in edges], dtype=np.int64)
    offsets = np.array([e[1] for e in edges], dtype=float)
    if normals.shape != (len(edges), 2) or np.any(np.all(normals == 0, axis=1)):
        raise PolygonError("degenerate polygon")
    if not np.all(np.isfinite(offsets)):
        raise PolygonError("degenerate polygon")
    for e in edges:
        if any(float(a) != int(a) for a in e[0]):
            raise PolygonError("degenerate polygon", ["non-integer normal " + str(tuple(e[0]))])

    violations = []
    for k, n in enumerate(normals):
        g = math.gcd(int(n[0]), int(n[1]))
        if g != 1:
            violations.append(f"non-primitive normal {k}: ({n[0]}, {n[1]}) has gcd {g}")

    angles = np.arctan2(normals[:, 1], normals[:, 0]) % (2 * np.pi)
    order = np.argsort(angles, kind="stable")
    gaps = np.diff(np.concatenate([angles[order], [angles[order[0]] + 2 * np.pi]]))
    if np.any(gaps >= np.pi - 1e-12):
        violations.append("unbounded: normals do not positively span the plane")
        raise PolygonError("; ".join(violations), violations)
    if np.any(gaps < 1e-12):
        violations.append("parallel duplicate normals")
        raise PolygonError("; ".join(violations), violations)

    m = len(order)
    verts = []
    for i in range(m):
        a, b = order[i], order[(i + 1) % m]
        verts.append(_line_intersection(normals[a], offsets[a], normals[b], offsets[b]))
    verts = np.array(verts)
    tol = 1e-9 * _scale(verts)
    vals = verts @ normals.T.astype(float) - offsets
    if np.any(vals < -tol):
        bad = sorted(set(np.nonzero(vals < -tol)[1].tolist()))
        violations.append(f"non-convex: vertex sequence violates edges {bad} (redundant or empty edges)")
    else:
        # every edge must have positive length
        for i in range(m):
            if np.linalg.norm(verts[i] - verts[i - 1]) <= tol:
                violations.append(f"non-convex: edge {int(order[i])} has zero length")
        if polygon_area(verts) <= tol * tol:
            violations.append("degenerate polygon")

    for i in range(m):
        a, b = order[i], order[(i + 1) % m]
        det = int(normals[a][0] * normals[b][1] - normals[a][1] * normals[b][0])
        if abs(det) != 1:
            violations.append(f"vertex determinant {abs(det)} ≠ ±1 at edges ({a}, {b})")

    if violations:
        raise PolygonError("; ".join(violations), violations)
    return DelzantPolygon(normals=normals, offsets=offsets, vertices=verts, order=order)


def inset(polygon: ConvexRegion, epsilon: float) -> InsetRegion:
    """Points of ``polygon`` at Euclidean distance at least ``epsilon`` from its boundary.

    The result is empty (``is_empty``) when the shifted half-planes do not meet.
    """
    if not np.isfinite(epsilon) or epsilon < 0:
        raise ValueError("invalid inset")
    norms = np.linalg.norm(polygon.normals, axis=1)
    shifted = polygon.offsets + epsilon * norms
    verts = clip_halfplanes(polygon.vertices, polygon.normals, shifted)
    if len(verts):
        verts = _dedupe(verts, 1e-12 * _scale(verts))
    if len(verts) < 3 or polygon_area(verts) <= 1e-24:
        verts = np.zeros((0, 2))
    parent = polygon if isinstance(polygon, DelzantPolygon) else getattr(polygon, "parent", None)
    return InsetRegion(normals=polygon.normals, offsets=shifted, vertices=verts,
                       parent=parent, epsilon=float(epsilon))


def _dedupe(verts, tol):
    keep = [verts[0]]
    for p in verts[1:]:
        if np.linalg.norm(p - keep[-1]) > tol:
            keep.append(p)
    if len(keep) > 1 and np.linalg.norm(keep[0] - keep[-1]) <= tol:
        keep.pop()
    return np.array(keep)


def boundary_sigma_length(polygon: DelzantPolygon, k: int) -> float:
    """Lattice boundary measure of edge ``k``: Euclidean length over ``|normal_k|``."""
    if not 0 <= k < polygon.n_edges:
        raise IndexError(f"edge index {k} out of range")
    p, q = polygon.edge_endpoints(k)
    return float(np.linalg.norm(q - p) / np.linalg.norm(polygon.normals[k]))


def classify_point(region: ConvexRegion, x) -> PointClass:
    return region.classify(np.asarray(x, dtype=float))


def parse_polygon(text: str) -> DelzantPolygon:
    """Parse ``nu_x nu_y c`` lines (``#`` comments allowed)."""
    edges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise PolygonError(f"line {lineno}: expected 'nu_x nu_y c'")
        try:
            nu = (int(parts[0]), int(parts[1]))
            c = float(parts[2])
        except ValueError:
            raise PolygonError(f"line {lineno}: malformed edge '{line}'") from None
        edges.append((nu, c))
    return validate_delzant(edges)


def read_polygon(path) -> DelzantPolygon:
    with open(path, encoding="utf-8") as fh:
        return parse_polygon(fh.read())


def unit_square() -> DelzantPolygon:
    return validate_delzant([((1, 0), 0.0), ((0, 1), 0.0), ((-1, 0), -1.0), ((0, -1), -1.0)])


def unit_simplex() -> DelzantPolygon:
    return validate_delzant([((1, 0), 0.0), ((0, 1), 0.0), ((-1, -1), -1.0)])


def transform_polygon(polygon: DelzantPolygon, S, b) -> DelzantPolygon:
    """Image of ``polygon`` under ``x -> S x + b`` for integer unimodular ``S``."""
    S = np.asarray(S, dtype=np.int64)
    if abs(round(np.linalg.det(S))) != 1:
        raise ValueError("S must be unimodular")
    sinv_t = np.round(np.linalg.inv(S).T).astype(np.int64)
    normals = polygon.normals @ sinv_t.T
    offsets = polygon.offsets + normals @ np.asarray(b, dtype=float)
    return validate_delzant([((int(n[0]), int(n[1])), float(c)) for n, c in zip(normals, offsets)])


def scale_polygon(polygon: DelzantPolygon, lam: float, center) -> DelzantPolygon:
    """The polygon ``lam * (P - center)``."""
    center = np.asarray(center, dtype=float)
    offsets = lam * (polygon.offsets - polygon.normals @ center)
    return validate_delzant([((int(n[0]), int(n[1])), float(c)) for n, c in zip(polygon.normals, offsets)])
