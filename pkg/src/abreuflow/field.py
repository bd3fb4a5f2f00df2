"""Symplectic potentials ``u = u0 + v`` on a masked uniform grid.

``u0`` is the Guillemin potential ``1/2 sum_k l_k log l_k`` of the polygon and
is differentiated analytically. ``v`` is sampled on a padded rectangular grid
covering the polygon; its derivatives come from centered finite differences.
Values of ``v`` outside the active region are frozen, so the padding simply
holds a smooth extension that lets every node strictly inside the polygon
use centered stencils.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .errors import BoundarySingularity, GridError, MetricDegenerate, SnapshotError
from .polytope import DelzantPolygon, parse_polygon, scale_polygon

SNAPSHOT_HEADER = "ABREUFLOW-SNAP v1"
BASES = ("guillemin", "flat")

# index of each independent component in the symmetric tensors
_D2 = ((0, 0), (0, 1), (1, 1))
_D3 = ((0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1))
_D4 = ((0, 0, 0, 0), (0, 0, 0, 1), (0, 0, 1, 1), (0, 1, 1, 1), (1, 1, 1, 1))


class Jets(NamedTuple):
    """Second, third and fourth derivative tensors, shapes ``(..., 2, ..., 2)``."""

    d2: np.ndarray
    d3: np.ndarray
    d4: np.ndarray


def _outer_power(nu, m):
    t = nu
    for _ in range(m - 1):
        t = np.multiply.outer(t, nu)
    return t


def guillemin_eval(polygon: DelzantPolygon, x, order: int = 2):
    """Value and derivatives of ``u0`` at ``x`` (shape ``(..., 2)``) up to ``order``.

    Returns a list ``[u0, Du0, D2u0, ...]``; the ``m``-th entry has shape
    ``x.shape[:-1] + (2,) * m``.
    """
    x = np.asarray(x, dtype=float)
    lvals = polygon.edge_values(x)
    if np.any(~(lvals > 0)):
        raise BoundarySingularity("boundary singularity")
    nus = polygon.normals.astype(float)
    out = [0.5 * np.sum(lvals * np.log(lvals), axis=-1)]
    if order >= 1:
        out.append(0.5 * (np.log(lvals) + 1.0) @ nus)
    for m in range(2, order + 1):
        coef = 0.5 * (-1) ** m * math.factorial(m - 2)
        w = coef / lvals ** (m - 1)
        tens = np.stack([_outer_power(n, m) for n in nus])  # (K, 2, ..., 2)
        out.append(np.tensordot(w, tens, axes=([-1], [0])))
    return out


def flat_eval(x, order: int = 2):
    """``u0 = |x|^2 / 2``: the flat operator-test base (no boundary behaviour)."""
    x = np.asarray(x, dtype=float)
    out = [0.5 * np.sum(x * x, axis=-1)]
    if order >= 1:
        out.append(x.copy())
    lead = x.shape[:-1]
    for m in range(2, order + 1):
        t = np.zeros(lead + (2,) * m)
        if m == 2:
            t[..., 0, 0] = 1.0
            t[..., 1, 1] = 1.0
        out.append(t)
    return out


def base_eval(base: str, polygon, x, order: int = 2):
    if base == "guillemin":
        return guillemin_eval(polygon, x, order)
    if base == "flat":
        return flat_eval(x, order)
    raise ValueError(f"unknown base potential {base!r}")


@dataclass(frozen=True, eq=False)
class Grid:
    """Padded uniform grid over the polygon's bounding box.

    Node ``(i, j)`` sits at ``origin + h * (i, j)``. Nodes are masked by their
    Euclidean margin to the boundary: ``active`` when the margin is at least
    ``collar_width * h``, ``collar`` when strictly inside but closer, and
    ``outside`` otherwise (boundary nodes count as outside).
    """

    polygon: DelzantPolygon
    origin: np.ndarray
    h: float
    dims: tuple
    collar_width: int = 3
    pad: int = 3

    @cached_property
    def xs(self):
        return self.origin[0] + self.h * np.arange(self.dims[0])

    @cached_property
    def ys(self):
        return self.origin[1] + self.h * np.arange(self.dims[1])

    @cached_property
    def points(self):
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([X, Y], axis=-1)

    @cached_property
    def margin(self):
        return self.polygon.margin(self.points)

    @property
    def _tol(self):
        return 1e-9 * self.h

    @cached_property
    def inside(self):
        return self.margin > self._tol

    @cached_property
    def in_polygon(self):
        return self.margin >= -self._tol

    @cached_property
    def active(self):
        return self.margin >= self.collar_width * self.h - self._tol

    @cached_property
    def collar(self):
        return self.inside & ~self.active

    @cached_property
    def outside(self):
        return ~self.inside

    @property
    def shape(self):
        return tuple(self.dims)

    def nearest_node(self, x):
        x = np.asarray(x, dtype=float)
        i = int(np.rint((x[0] - self.origin[0]) / self.h))
        j = int(np.rint((x[1] - self.origin[1]) / self.h))
        return i, j

    @cached_property
    def _base_cache(self):
        return {}

    def base_jets(self, base: str) -> Jets:
        """Analytic jets of the base potential at inside nodes (NaN elsewhere)."""
        if base not in self._base_cache:
            pts = self.points[self.inside]
            d = base_eval(base, self.polygon, pts, 4)
            jets = []
            for m in (2, 3, 4):
                arr = np.full(self.shape + (2,) * m, np.nan)
                arr[self.inside] = d[m]
                jets.append(arr)
            self._base_cache[base] = Jets(*jets)
        return self._base_cache[base]

    def same_as(self, other: "Grid") -> bool:
        return (self.polygon.digest == other.polygon.digest and tuple(self.dims) == tuple(other.dims)
                and self.h == other.h and np.array_equal(self.origin, other.origin)
                and self.collar_width == other.collar_width)


def build_grid(polygon: DelzantPolygon, h: float, collar_width: int = 3, pad: int = 3,
               anchor=None) -> Grid:
    """Grid of spacing ``h`` covering ``polygon``; ``anchor`` (optional) becomes a node."""
    if not h > 0:
        raise GridError("grid spacing must be positive")
    if collar_width < 2:
        raise GridError("collar_width must be at least 2")
    if h > polygon.inradius:
        raise GridError("grid too coarse")
    lo = polygon.vertices.min(axis=0)
    hi = polygon.vertices.max(axis=0)
    if anchor is None:
        start = lo
    else:
        anchor = np.asarray(anchor, dtype=float)
        start = anchor - h * np.floor((anchor - lo) / h + 1e-9)
    counts = np.floor((hi - start) / h + 1e-9).astype(int) + 1
    origin = start - pad * h
    dims = tuple(int(c) + 2 * pad for c in counts)
    return Grid(polygon=polygon, origin=origin, h=float(h), dims=dims,
                collar_width=int(collar_width), pad=int(pad))


def _sh(v, di, dj):
    """``v[i + di, j + dj]`` over the interior block that excludes a 2-node frame."""
    nx, ny = v.shape
    return v[2 + di:nx - 2 + di, 2 + dj:ny - 2 + dj]


def fd_jets(v: np.ndarray, h: float) -> Jets:
    """Centered second-order finite-difference jets of a grid function.

    Fourth derivatives use the 5-point stencil per axis; mixed derivatives are
    tensor products of 1-D centered stencils. Nodes within two of the grid edge
    get NaN.
    """
    v = np.asarray(v, dtype=float)

    def dx1(di, dj):  # first derivative in x at offset (di, dj)
        return (_sh(v, di + 1, dj) - _sh(v, di - 1, dj)) / (2 * h)

    def dxx(di, dj):
        return (_sh(v, di + 1, dj) - 2 * _sh(v, di, dj) + _sh(v, di - 1, dj)) / h**2

    def dxxx(di, dj):
        return (_sh(v, di + 2, dj) - 2 * _sh(v, di + 1, dj) + 2 * _sh(v, di - 1, dj)
                - _sh(v, di - 2, dj)) / (2 * h**3)

    def one_y(f):  # apply centered first difference in y to an x-stencil
        return (f(0, 1) - f(0, -1)) / (2 * h)

    def two_y(f):
        return (f(0, 1) - 2 * f(0, 0) + f(0, -1)) / h**2

    c = _sh(v, 0, 0)
    vyy = (_sh(v, 0, 1) - 2 * c + _sh(v, 0, -1)) / h**2
    vyyy = (_sh(v, 0, 2) - 2 * _sh(v, 0, 1) + 2 * _sh(v, 0, -1) - _sh(v, 0, -2)) / (2 * h**3)
    vyyyy = (_sh(v, 0, 2) - 4 * _sh(v, 0, 1) + 6 * c - 4 * _sh(v, 0, -1) + _sh(v, 0, -2)) / h**4
    vxxxx = (_sh(v, 2, 0) - 4 * _sh(v, 1, 0) + 6 * c - 4 * _sh(v, -1, 0) + _sh(v, -2, 0)) / h**4

    def dyy(di, dj):
        return (_sh(v, di, dj + 1) - 2 * _sh(v, di, dj) + _sh(v, di, dj - 1)) / h**2

    def dyyy(di, dj):
        return (_sh(v, di, dj + 2) - 2 * _sh(v, di, dj + 1) + 2 * _sh(v, di, dj - 1)
                - _sh(v, di, dj - 2)) / (2 * h**3)

    comps2 = [dxx(0, 0), one_y(dx1), vyy]
    comps3 = [dxxx(0, 0), one_y(dxx), (dyy(1, 0) - dyy(-1, 0)) / (2 * h), vyyy]
    comps4 = [vxxxx, one_y(dxxx), two_y(dxx), (dyyy(1, 0) - dyyy(-1, 0)) / (2 * h), vyyyy]
    return Jets(_assemble(comps2, _D2, v.shape), _assemble(comps3, _D3, v.shape),
                _assemble(comps4, _D4, v.shape))


def _assemble(comps, index, shape):
    m = len(index[0])
    out = np.full(tuple(shape) + (2,) * m, np.nan)
    for comp, idx in zip(comps, index):
        for perm in set(itertools.permutations(idx)):
            out[(slice(2, shape[0] - 2), slice(2, shape[1] - 2)) + perm] = comp
    return out


def inverse_and_cofactor(m):
    """Inverse, cofactor matrix and determinant of SPD 2x2 matrices ``(..., 2, 2)``.

    Raises :class:`MetricDegenerate` carrying the smallest eigenvalue when any
    input is not positive definite.
    """
    m = np.asarray(m, dtype=float)
    a, b, c = m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1]
    det = a * c - b * b
    ok = (a > 0) & (det > 0)
    if not np.all(ok):
        eig = np.linalg.eigvalsh(np.where(np.isfinite(m), m, 0.0).reshape(-1, 2, 2))
        raise MetricDegenerate("metric degenerate", float(eig.min()))
    cof = np.empty_like(m)
    cof[..., 0, 0] = c
    cof[..., 1, 1] = a
    cof[..., 0, 1] = -b
    cof[..., 1, 0] = -b
    inv = cof / det[..., None, None]
    return inv, cof, det


@dataclass(frozen=True, eq=False)
class PotentialField:
    """``u = base + v`` with ``v`` sampled on every node of ``grid``."""

    grid: Grid
    v: np.ndarray
    base: str = "guillemin"

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"unknown base potential {self.base!r}")
        v = np.asarray(self.v, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"v has shape {v.shape}, grid is {self.grid.shape}")
        if not np.all(np.isfinite(v[self.grid.in_polygon])):
            raise ValueError("v must be finite at every in-polygon node")
        object.__setattr__(self, "v", v)

    @property
    def polygon(self) -> DelzantPolygon:
        return self.grid.polygon

    @property
    def h(self) -> float:
        return self.grid.h

    def with_v(self, v) -> "PotentialField":
        return PotentialField(self.grid, v, self.base)

    @cached_property
    def v_jets(self) -> Jets:
        return fd_jets(self.v, self.grid.h)

    @cached_property
    def jets(self) -> Jets:
        """Jets of ``u`` at inside nodes (NaN elsewhere)."""
        b = self.grid.base_jets(self.base)
        vj = self.v_jets
        return Jets(b.d2 + vj.d2, b.d3 + vj.d3, b.d4 + vj.d4)

    @cached_property
    def hessian(self):
        return self.jets.d2

    def check_spd(self, mask=None):
        """Raise :class:`MetricDegenerate` unless ``D2u`` is SPD on ``mask`` (default active)."""
        mask = self.grid.active if mask is None else mask
        inverse_and_cofactor(self.hessian[mask])

    # off-node evaluation ---------------------------------------------------
    @cached_property
    def v_spline(self):
        g = self.grid
        return RectBivariateSpline(g.xs, g.ys, self.v, kx=3, ky=3, s=0)

    @cached_property
    def _jet_splines(self):
        g = self.grid
        vj = self.v_jets
        xs, ys = g.xs[2:-2], g.ys[2:-2]
        out = {}
        for m, arr, index in ((2, vj.d2, _D2), (3, vj.d3, _D3), (4, vj.d4, _D4)):
            for idx in index:
                out[idx] = RectBivariateSpline(xs, ys, arr[(slice(2, -2), slice(2, -2)) + idx], kx=3, ky=3, s=0)
        return out

    def value(self, x):
        x = np.asarray(x, dtype=float)
        b = base_eval(self.base, self.polygon, x, 0)[0]
        return b + self.v_spline.ev(x[..., 0], x[..., 1])

    def gradient(self, x):
        """``Du`` at arbitrary points: analytic base plus bicubic ``v``."""
        x = np.asarray(x, dtype=float)
        b = base_eval(self.base, self.polygon, x, 1)[1]
        sp = self.v_spline
        gv = np.stack([sp.ev(x[..., 0], x[..., 1], dx=1), sp.ev(x[..., 0], x[..., 1], dy=1)], axis=-1)
        return b + gv

    def hessian_at(self, x):
        """``D2u`` at arbitrary points: analytic base plus bicubic ``v``."""
        x = np.asarray(x, dtype=float)
        b = base_eval(self.base, self.polygon, x, 2)[2]
        sp = self.v_spline
        X, Y = x[..., 0], x[..., 1]
        hxx, hxy, hyy = sp.ev(X, Y, dx=2), sp.ev(X, Y, dx=1, dy=1), sp.ev(X, Y, dy=2)
        hv = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)
        return b + hv

    def jets_at(self, x) -> Jets:
        """Jets of ``u`` at arbitrary points from interpolated finite-difference jets of ``v``."""
        x = np.asarray(x, dtype=float)
        b = base_eval(self.base, self.polygon, x, 4)
        X, Y = x[..., 0], x[..., 1]
        out = []
        for m, index in ((2, _D2), (3, _D3), (4, _D4)):
            arr = np.array(b[m], copy=True)
            for idx in index:
                val = self._jet_splines[idx].ev(X, Y)
                for perm in set(itertools.permutations(idx)):
                    arr[(Ellipsis,) + perm] += val
            out.append(arr)
        return Jets(*out)


def derivatives_at(field: PotentialField, node, order: int = 4):
    """Derivative tensors ``[D2u, ..., D^order u]`` at grid node ``(i, j)``."""
    if order not in (2, 3, 4):
        raise ValueError("order must be 2, 3 or 4")
    i, j = node
    g = field.grid
    nx, ny = g.shape
    if not (2 <= i < nx - 2 and 2 <= j < ny - 2) or not g.inside[i, j]:
        raise GridError("stencil out of domain")
    jets = field.jets
    return [jets.d2[i, j], jets.d3[i, j], jets.d4[i, j]][: order - 1]


def field_from_function(grid: Grid, func=None, base: str = "guillemin") -> PotentialField:
    """Sample ``v = func(points)`` on every node (``func=None`` gives ``v = 0``)."""
    if func is None:
        v = np.zeros(grid.shape)
    else:
        v = np.asarray(func(grid.points), dtype=float)
    return PotentialField(grid, v, base)


def normalize_affine(field: PotentialField) -> PotentialField:
    """Remove the affine part of ``v`` at the active node nearest the centroid.

    After normalization ``v`` and its centered-difference gradient vanish there.
    """
    g = field.grid
    pts = g.points
    d = np.linalg.norm(pts - field.polygon.centroid, axis=-1)
    d = np.where(g.active, d, np.inf)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    v = field.v
    gx = (v[i + 1, j] - v[i - 1, j]) / (2 * g.h)
    gy = (v[i, j + 1] - v[i, j - 1]) / (2 * g.h)
    x0 = pts[i, j]
    aff = v[i, j] + gx * (pts[..., 0] - x0[0]) + gy * (pts[..., 1] - x0[1])
    return field.with_v(v - aff)


def rescale_potential(field: PotentialField, lam: float, center) -> PotentialField:
    """Blow-up rescaling ``u~(y) = lam * u(y / lam + center)`` on ``lam * (P - center)``.

    The grid maps node-for-node (spacing ``lam * h``); the affine discrepancy
    between ``lam * u0`` and the Guillemin potential of the scaled polygon is
    absorbed into ``v``.
    """
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError("invalid scale")
    center = np.asarray(center, dtype=float)
    if field.polygon.classify(center).kind != "interior":
        raise ValueError("center must lie strictly inside the polygon")
    g = field.grid
    new_poly = scale_polygon(field.polygon, lam, center)
    if field.base == "guillemin":
        # lam * u0(x) = u0~(y) - 1/2 lam log(lam) sum_k l_k(x)
        affine = 0.5 * lam * math.log(lam) * np.sum(field.polygon.edge_values(g.points), axis=-1)
        v_new = lam * field.v - affine
    else:
        # flat base: lam * |x|^2 / 2 - |y|^2 / 2 moves into v
        x, y = g.points, lam * (g.points - center)
        v_new = lam * field.v + 0.5 * lam * np.sum(x * x, -1) - 0.5 * np.sum(y * y, -1)
    new_grid = Grid(polygon=new_poly, origin=lam * (g.origin - center), h=lam * g.h,
                    dims=g.dims, collar_width=g.collar_width, pad=g.pad)
    return PotentialField(new_grid, v_new, field.base)


def transform_field(field_func, polygon, S, b):
    """Pull back a perturbation function under ``x -> S x + b``: returns ``y -> f(S^-1 (y - b))``."""
    sinv = np.linalg.inv(np.asarray(S, dtype=float))
    b = np.asarray(b, dtype=float)

    def g(y):
        return field_func((np.asarray(y) - b) @ sinv.T)

    return g


# perturbation families ------------------------------------------------------

def perturbation(name: str, amplitude: float = 0.0, seed: int = 0, modes: int = 1):
    """Named analytic perturbation ``v0``; a callable on ``(..., 2)`` arrays."""
    amp = float(amplitude)
    if name == "zero":
        return lambda x: np.zeros(np.shape(x)[:-1])
    if name == "sine":
        k = 2 * np.pi * modes
        return lambda x: amp * np.sin(k * x[..., 0]) * np.sin(k * x[..., 1])
    rng = np.random.default_rng(seed)
    if name in ("cubic", "quartic"):
        deg = 3 if name == "cubic" else 4
        terms = [(p, q) for p in range(deg + 1) for q in range(deg + 1 - p) if p + q >= 2]
        coef = rng.normal(size=len(terms))
        coef /= np.abs(coef).sum()

        def poly(x):
            X, Y = x[..., 0] - 0.5, x[..., 1] - 0.5
            return amp * sum(c * X**p * Y**q for c, (p, q) in zip(coef, terms))

        return poly
    if name == "trig":
        n = 4
        kx = rng.integers(1, 3, size=n) * np.pi
        ky = rng.integers(1, 3, size=n) * np.pi
        ph = rng.uniform(0, 2 * np.pi, size=(n, 2))
        a = rng.normal(size=n)
        a /= np.abs(a).sum()

        def trig(x):
            X, Y = x[..., 0], x[..., 1]
            return amp * sum(a[i] * np.sin(kx[i] * X + ph[i, 0]) * np.sin(ky[i] * Y + ph[i, 1])
                             for i in range(n))

        return trig
    raise ValueError(f"unknown perturbation family {name!r}")


# snapshot files ---------------------------------------------------------------

def snapshot_text(field: PotentialField, t: float = 0.0) -> str:
    g = field.grid
    lines = [SNAPSHOT_HEADER, f"polygon_sha256 {field.polygon.digest}"]
    for (nx_, ny_), c in field.polygon.edges:
        lines.append(f"edge {nx_} {ny_} {c!r}")
    lines += [f"base {field.base}", f"t {t:.17g}", f"origin {g.origin[0]:.17g} {g.origin[1]:.17g}",
              f"h {g.h:.17g}", f"dims {g.dims[0]} {g.dims[1]}", f"collar_width {g.collar_width}",
              f"pad {g.pad}", "values"]
    for row in field.v:
        lines.append(" ".join(f"{x:.17g}" for x in row))
    lines.append("end")
    return "\n".join(lines) + "\n"


def write_snapshot(field: PotentialField, path, t: float = 0.0):
    from .io import atomic_write

    atomic_write(path, snapshot_text(field, t))


def parse_snapshot(text: str):
    """Inverse of :func:`snapshot_text`; returns ``(field, t)``."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != SNAPSHOT_HEADER:
        raise SnapshotError("snapshot version mismatch")
    try:
        it = iter(lines[1:])
        key, digest = next(it).split()
        if key != "polygon_sha256":
            raise ValueError
        edge_lines = []
        line = next(it)
        while line.startswith("edge "):
            edge_lines.append(line[5:])
            line = next(it)
        polygon = parse_polygon("\n".join(edge_lines))
        if polygon.digest != digest:
            raise SnapshotError("snapshot polygon hash mismatch")
        meta = {}
        while line != "values":
            k, *vals = line.split()
            meta[k] = vals
            line = next(it)
        dims = (int(meta["dims"][0]), int(meta["dims"][1]))
        rows = []
        for _ in range(dims[0]):
            row = [float(s) for s in next(it).split()]
            if len(row) != dims[1]:
                raise ValueError
            rows.append(row)
        if next(it).strip() != "end":
            raise ValueError
        grid = Grid(polygon=polygon, origin=np.array([float(s) for s in meta["origin"]]),
                    h=float(meta["h"][0]), dims=dims, collar_width=int(meta["collar_width"][0]),
                    pad=int(meta["pad"][0]))
        field = PotentialField(grid, np.array(rows), meta["base"][0])
        return field, float(meta["t"][0])
    except SnapshotError:
        raise
    except Exception:
        raise SnapshotError("snapshot malformed") from None


def read_snapshot(path):
    with open(path, encoding="utf-8") as fh:
        return parse_snapshot(fh.read())
