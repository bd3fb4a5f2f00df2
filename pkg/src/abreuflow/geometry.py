"""Differential geometry of a toric metric given by its symplectic potential.

Pointwise quantities are functions of the jets ``(D2u, D3u, D4u)``. The
curvature of the 4-manifold metric ``g = u_ij dx^i dx^j + u^ij dtheta_i dtheta_j``
is computed two ways: by contracting ``T^ij_kl = d_k d_l u^ij`` with the
metric, and by brute-force Christoffel symbols of the block metric. The two
agree identically, which pins the normalisation of ``|Rm|``.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field as dc_field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import GridError, MetricDegenerate, Unreachable
from .field import Jets, PotentialField, base_eval, inverse_and_cofactor
from .io import AtomicCSV, fmt
from .polytope import boundary_sigma_length, clip_halfplanes, polygon_area

# ---------------------------------------------------------------------------
# pointwise formulas on jets


def inverse_hessian_derivatives(jets: Jets):
    """``u^ij`` and its first and second derivatives from the jets of ``u``.

    Uses ``dW = -W dH W`` and
    ``d_k d_l W = W H_k W H_l W + W H_l W H_k W - W H_kl W``.
    """
    W, _, _ = inverse_and_cofactor(jets.d2)
    WH = np.einsum("...ia,...abk->...ibk", W, jets.d3)  # W H_k
    dW = -np.einsum("...ibk,...bj->...ijk", WH, W)
    WHW = -dW  # W H_k W, index (i, j, k)
    term = np.einsum("...iak,...abl,...bj->...ijkl", WHW, jets.d3, W)
    ddW = term + np.swapaxes(term, -1, -2)
    ddW -= np.einsum("...ia,...abkl,...bj->...ijkl", W, jets.d4, W)
    return W, dW, ddW


def abreu_from_jets(jets: Jets):
    """``A = -sum_ij d_i d_j u^ij``."""
    _, _, T = inverse_hessian_derivatives(jets)
    return -np.einsum("...ijij->...", T)


def abreu_cofactor_from_jets(jets: Jets):
    """``A = -U^ij (1/det D2u)_ij`` with the cofactor matrix ``U``."""
    _, U, det = inverse_and_cofactor(jets.d2)
    d3, d4 = jets.d3, jets.d4
    a, b, c = jets.d2[..., 0, 0], jets.d2[..., 0, 1], jets.d2[..., 1, 1]
    ai, bi, ci = d3[..., 0, 0, :], d3[..., 0, 1, :], d3[..., 1, 1, :]
    aij, bij, cij = d4[..., 0, 0, :, :], d4[..., 0, 1, :, :], d4[..., 1, 1, :, :]
    di = ai * c[..., None] + a[..., None] * ci - 2 * b[..., None] * bi
    outer = lambda p, q: p[..., :, None] * q[..., None, :]  # noqa: E731
    dij = (aij * c[..., None, None] + outer(ai, ci) + outer(ci, ai) + a[..., None, None] * cij
           - 2 * outer(bi, bi) - 2 * b[..., None, None] * bij)
    fij = 2 * outer(di, di) / det[..., None, None] ** 3 - dij / det[..., None, None] ** 2
    return -np.einsum("...ij,...ij->...", U, fij)


def curvature_norm_from_jets(jets: Jets):
    """``|Rm|^2 = T^ij_kl T^pq_rs u_ip u_jq u^kr u^ls``."""
    W, _, T = inverse_hessian_derivatives(jets)
    H = jets.d2
    n2 = np.einsum("...ijkl,...pqrs,...ip,...jq,...kr,...ls->...", T, T, H, H, W, W, optimize=True)
    return np.sqrt(np.maximum(n2, 0.0))


def block_metric_jets(jets: Jets):
    """Metric of the 4-manifold in ``(x1, x2, theta1, theta2)`` and its x-derivatives.

    Returns ``g``, ``dg[..., a, b, e] = d_e g_ab`` and ``ddg[..., a, b, e, f]``;
    derivatives in the angle directions vanish.
    """
    W, dW, ddW = inverse_hessian_derivatives(jets)
    lead = jets.d2.shape[:-2]
    g = np.zeros(lead + (4, 4))
    dg = np.zeros(lead + (4, 4, 4))
    ddg = np.zeros(lead + (4, 4, 4, 4))
    g[..., :2, :2] = jets.d2
    g[..., 2:, 2:] = W
    dg[..., :2, :2, :2] = jets.d3
    dg[..., 2:, 2:, :2] = dW
    ddg[..., :2, :2, :2, :2] = jets.d4
    ddg[..., 2:, 2:, :2, :2] = ddW
    return g, dg, ddg


def christoffel_riemann(g, dg, ddg):
    """Christoffel symbols and the all-lower Riemann tensor from a 2-jet of the metric.

    ``Gamma[..., a, b, c] = Gamma^a_bc``;
    ``R^a_bcd = d_c Gamma^a_db - d_d Gamma^a_cb + Gamma^a_ce Gamma^e_db - Gamma^a_de Gamma^e_cb``.
    """
    gi = np.linalg.inv(g)
    # Y[d, b, c] = d_b g_dc + d_c g_db - d_d g_bc
    Y = np.einsum("...dcb->...dbc", dg) + dg - np.einsum("...bcd->...dbc", dg)
    Gamma = 0.5 * np.einsum("...ad,...dbc->...abc", gi, Y)
    dgi = -np.einsum("...ap,...pqe,...qd->...ade", gi, dg, gi)
    X = (np.einsum("...dcbe->...dbce", ddg) + ddg - np.einsum("...bcde->...dbce", ddg))
    dGamma = 0.5 * (np.einsum("...ade,...dbc->...abce", dgi, Y) + np.einsum("...ad,...dbce->...abce", gi, X))
    R = (np.einsum("...adbc->...abcd", dGamma) - np.einsum("...acbd->...abcd", dGamma)
         + np.einsum("...ace,...edb->...abcd", Gamma, Gamma) - np.einsum("...ade,...ecb->...abcd", Gamma, Gamma))
    Rlow = np.einsum("...ae,...ebcd->...abcd", g, R)
    return gi, Gamma, Rlow


def tensor_norm(T, gi, rank):
    """Metric norm of an all-lower tensor whose last ``rank`` axes are indices."""
    raised = T
    for s in range(rank):
        raised = _raise_axis(raised, gi, s, rank)
    return np.sqrt(np.maximum(np.sum(T * raised, axis=tuple(range(-rank, 0))), 0.0))


def _raise_axis(T, gi, s, rank):
    letters = string.ascii_lowercase[:rank]
    src = letters.replace(letters[s], "z")
    return np.einsum(f"...{src},...{letters[s]}z->...{letters}", T, gi)


def riemann_norm_from_jets(jets: Jets):
    """Christoffel-route ``|Rm|`` of the 4-manifold metric (the oracle)."""
    g, dg, ddg = block_metric_jets(jets)
    gi, _, R = christoffel_riemann(g, dg, ddg)
    return tensor_norm(R, gi, 4)


def riemann_norm_from_metric(gfunc, x, delta=1e-3):
    """``|Rm|`` at ``x`` for a metric callable ``gfunc(x) -> (4, 4)`` depending on x only.

    Metric derivatives by central differences of step ``delta``; independent of
    any potential or jet machinery.
    """
    x = np.asarray(x, dtype=float)
    e = np.eye(2) * delta
    g0 = gfunc(x)
    dg = np.zeros((4, 4, 4))
    ddg = np.zeros((4, 4, 4, 4))
    for i in range(2):
        dg[:, :, i] = (gfunc(x + e[i]) - gfunc(x - e[i])) / (2 * delta)
        for j in range(2):
            if i == j:
                ddg[:, :, i, i] = (gfunc(x + e[i]) - 2 * g0 + gfunc(x - e[i])) / delta**2
            else:
                ddg[:, :, i, j] = (gfunc(x + e[i] + e[j]) - gfunc(x + e[i] - e[j]) - gfunc(x - e[i] + e[j])
                                   + gfunc(x - e[i] - e[j])) / (4 * delta**2)
    gi, _, R = christoffel_riemann(g0, dg, ddg)
    return float(tensor_norm(R, gi, 4))


def covariant_derivative(dT, T, Gamma, rank):
    """``nabla_e T_{a..}`` from partials ``dT[..., e, a, ...]`` (derivative index first)."""
    letters = string.ascii_lowercase[:rank]
    out = np.array(dT, copy=True)
    for s in range(rank):
        src = letters.replace(letters[s], "y")
        out -= np.einsum(f"...{src},...yz{letters[s]}->...z{letters}", T, Gamma)
    return out


# ---------------------------------------------------------------------------
# grid-level quantities


def _inside_apply(field: PotentialField, func, mask=None):
    mask = field.grid.inside if mask is None else mask
    jets = field.jets
    sub = Jets(jets.d2[mask], jets.d3[mask], jets.d4[mask])
    vals = func(sub)
    out = np.full(field.grid.shape + vals.shape[1:], np.nan)
    out[mask] = vals
    return out


def abreu_scalar(field: PotentialField, node=None):
    """Abreu scalar curvature on every inside node (NaN elsewhere), or at one node."""
    if node is not None:
        j = _node_jets(field, node)
        return float(abreu_from_jets(j))
    return _inside_apply(field, abreu_from_jets)


def _node_jets(field, node):
    i, j = node
    g = field.grid
    if not (0 <= i < g.shape[0] and 0 <= j < g.shape[1]) or not g.inside[i, j]:
        raise GridError("stencil out of domain")
    jets = field.jets
    return Jets(jets.d2[i, j], jets.d3[i, j], jets.d4[i, j])


def abreu_scalar_cofactor(field: PotentialField, sampled: bool = False):
    """Cross-check form ``-U^ij (1/det)_ij``.

    With ``sampled=True`` the second derivatives of ``1/det`` come from centered
    differences of its nodal values instead of the jets, so the two forms differ
    by an O(h^2) discretisation error.
    """
    if not sampled:
        return _inside_apply(field, abreu_cofactor_from_jets)
    g = field.grid
    d2 = field.hessian
    det = d2[..., 0, 0] * d2[..., 1, 1] - d2[..., 0, 1] ** 2
    f = np.where(g.inside, 1.0 / det, np.nan)
    f2 = _second_differences(f, g.h)
    U = np.empty_like(d2)
    U[..., 0, 0], U[..., 1, 1] = d2[..., 1, 1], d2[..., 0, 0]
    U[..., 0, 1] = U[..., 1, 0] = -d2[..., 0, 1]
    out = -np.einsum("...ij,...ij->...", U, f2)
    return np.where(g.inside, out, np.nan)


def _second_differences(f, h):
    """Centered Hessian of a nodal field (NaN on the outer ring)."""
    out = np.full(f.shape + (2, 2), np.nan)
    c = f[1:-1, 1:-1]
    fxx = (f[2:, 1:-1] - 2 * c + f[:-2, 1:-1]) / h**2
    fyy = (f[1:-1, 2:] - 2 * c + f[1:-1, :-2]) / h**2
    fxy = (f[2:, 2:] - f[2:, :-2] - f[:-2, 2:] + f[:-2, :-2]) / (4 * h**2)
    out[1:-1, 1:-1, 0, 0] = fxx
    out[1:-1, 1:-1, 1, 1] = fyy
    out[1:-1, 1:-1, 0, 1] = fxy
    out[1:-1, 1:-1, 1, 0] = fxy
    return out


def curvature_norm(field: PotentialField, node=None):
    """``|Rm|`` by index contraction, on inside nodes or at one node."""
    if node is not None:
        return float(curvature_norm_from_jets(_node_jets(field, node)))
    return _inside_apply(field, curvature_norm_from_jets)


def curvature_norm_oracle(field: PotentialField, node=None):
    """``|Rm|`` through Christoffel symbols of the block metric."""
    if node is not None:
        return float(riemann_norm_from_jets(_node_jets(field, node)))
    return _inside_apply(field, riemann_norm_from_jets)


class AverageScalar(NamedTuple):
    average: float  # quadrature of A over P divided by the area
    lattice: float  # 2 * sum of lattice edge lengths / area
    integral: float  # quadrature of A over P


class AreaQuadrature(NamedTuple):
    cells: np.ndarray  # lower-left node of each cell
    frac: np.ndarray  # position of the quadrature point inside its cell, in units of h
    points: np.ndarray
    weights: np.ndarray  # |cell ∩ P|


def area_quadrature(grid, region=None) -> AreaQuadrature:
    """Composite midpoint rule over ``region`` (default the polygon) on the cells of ``grid``.

    Interior cells use their centre. Cells cut by the boundary use the centroid
    of the clipped piece and its area as weight.
    """
    poly = grid.polygon if region is None else region
    key = ("area_quadrature", poly.normals.tobytes(), poly.offsets.tobytes())
    cache = grid._base_cache
    if key in cache:
        return cache[key]
    h = grid.h
    cm = poly.margin(grid.points)
    corners = np.stack([cm[:-1, :-1], cm[1:, :-1], cm[:-1, 1:], cm[1:, 1:]])
    full = np.all(corners >= 0, axis=0)
    touch = np.max(corners, axis=0) > -2 * h
    idx = np.argwhere(touch)
    w = np.full(len(idx), h * h)
    pts = grid.points[idx[:, 0], idx[:, 1]] + 0.5 * h
    for n, (i, j) in enumerate(idx):
        if full[i, j]:
            continue
        x0, y0 = grid.points[i, j]
        sq = [(x0, y0), (x0 + h, y0), (x0 + h, y0 + h), (x0, y0 + h)]
        piece = clip_halfplanes(sq, poly.normals, poly.offsets)
        w[n] = polygon_area(piece) if len(piece) >= 3 else 0.0
        if w[n] > 0:
            pts[n] = _centroid(piece)
    keep = w > 1e-14 * h * h
    idx, w, pts = idx[keep], w[keep], pts[keep]
    frac = (pts - grid.points[idx[:, 0], idx[:, 1]]) / h
    out = AreaQuadrature(idx, frac, pts, w)
    cache[key] = out
    return out


def bilinear(arr, quad: AreaQuadrature):
    """Bilinear interpolation of a nodal array (trailing tensor axes allowed) at the quadrature points."""
    I, J = quad.cells.T
    extra = (1,) * (arr.ndim - 2)
    fx = quad.frac[:, 0].reshape((-1,) + extra)
    fy = quad.frac[:, 1].reshape((-1,) + extra)
    return ((1 - fx) * (1 - fy) * arr[I, J] + fx * (1 - fy) * arr[I + 1, J]
            + (1 - fx) * fy * arr[I, J + 1] + fx * fy * arr[I + 1, J + 1])


def cell_quadrature(field: PotentialField):
    """Quadrature points, weights and jets of ``u`` there (``v`` jets bilinear in the corners)."""
    q = area_quadrature(field.grid)
    vj = field.v_jets
    b = base_eval(field.base, field.polygon, q.points, 4)
    jets = Jets(b[2] + bilinear(vj.d2, q), b[3] + bilinear(vj.d3, q), b[4] + bilinear(vj.d4, q))
    return q.points, q.weights, jets


def _centroid(verts):
    v = np.asarray(verts, dtype=float)
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cr = x * yn - xn * y
    a = cr.sum() / 2
    return np.array([((x + xn) * cr).sum(), ((y + yn) * cr).sum()]) / (6 * a)


def average_scalar(field: PotentialField) -> AverageScalar:
    """Average scalar curvature by cell-centre quadrature, with the lattice prediction."""
    _, w, jets = cell_quadrature(field)
    A = abreu_from_jets(jets)
    integral = float(np.sum(w * A))
    poly = field.polygon
    area = poly.area
    sigma = sum(boundary_sigma_length(poly, k) for k in range(poly.n_edges))
    return AverageScalar(integral / area, 2.0 * sigma / area, integral)


def active_average(field: PotentialField, A=None) -> float:
    """Mean of ``A`` over active nodes (the average used by the flow)."""
    A = abreu_scalar(field) if A is None else A
    return float(np.mean(A[field.grid.active]))


# ---------------------------------------------------------------------------
# covariant derivatives of curvature


class CurvatureData(NamedTuple):
    rm: np.ndarray
    grad_rm: np.ndarray
    hess_rm: np.ndarray
    q: np.ndarray


def _grid_partials(F, h, avail):
    """Centered x-partials of a nodal tensor field; ``out[..., e, ...]`` with e in 0..3."""
    shape = F.shape
    out = np.full(shape[:2] + (4,) + shape[2:], np.nan)
    ok = np.zeros(shape[:2], dtype=bool)
    ok[1:-1, 1:-1] = avail[2:, 1:-1] & avail[:-2, 1:-1] & avail[1:-1, 2:] & avail[1:-1, :-2] & avail[1:-1, 1:-1]
    out[1:-1, 1:-1, 0] = (F[2:, 1:-1] - F[:-2, 1:-1]) / (2 * h)
    out[1:-1, 1:-1, 1] = (F[1:-1, 2:] - F[1:-1, :-2]) / (2 * h)
    out[:, :, 2:] = 0.0
    out[~ok] = np.nan
    return out, ok


def q_quantity(field: PotentialField, node=None, chunk=512) -> CurvatureData:
    """``|Rm|``, ``|nabla Rm|``, ``|nabla^2 Rm|`` and ``Q`` on active nodes.

    Covariant derivatives of the 4-manifold curvature tensor; x-partials by
    centered differences of the nodal tensor fields, angle partials vanish.
    Nodes without a full radius-2 neighbourhood of inside nodes get NaN.
    """
    g = field.grid
    inside = g.inside
    jets = field.jets
    sub = Jets(jets.d2[inside], jets.d3[inside], jets.d4[inside])
    gm, dg, ddg = block_metric_jets(sub)
    gi, Gamma, R = christoffel_riemann(gm, dg, ddg)
    Rg = np.zeros(g.shape + (4,) * 4)
    Rg[inside] = R
    Gg = np.zeros(g.shape + (4, 4, 4))
    Gg[inside] = Gamma
    Gig = np.zeros(g.shape + (4, 4))
    Gig[inside] = gi

    dR, ok1 = _grid_partials(Rg, g.h, inside)
    nR = np.zeros(g.shape + (4,) * 5)
    nR[ok1] = covariant_derivative(dR[ok1], Rg[ok1], Gg[ok1], 4)

    rm = np.full(g.shape, np.nan)
    rm[inside] = tensor_norm(R, gi, 4)
    grad = np.full(g.shape, np.nan)
    grad[ok1] = tensor_norm(nR[ok1], Gig[ok1], 5)

    # second covariant derivative, evaluated node-chunk by node-chunk
    ok2 = np.zeros(g.shape, dtype=bool)
    ok2[1:-1, 1:-1] = (ok1[2:, 1:-1] & ok1[:-2, 1:-1] & ok1[1:-1, 2:] & ok1[1:-1, :-2] & ok1[1:-1, 1:-1])
    target = ok2 & g.active
    if node is not None:
        only = np.zeros_like(target)
        only[node] = target[node]
        target = only
    hess = np.full(g.shape, np.nan)
    idx = np.argwhere(target)
    h = g.h
    for start in range(0, len(idx), chunk):
        I, J = idx[start:start + chunk].T
        d = np.zeros((len(I), 4) + (4,) * 5)
        d[:, 0] = (nR[I + 1, J] - nR[I - 1, J]) / (2 * h)
        d[:, 1] = (nR[I, J + 1] - nR[I, J - 1]) / (2 * h)
        n2R = covariant_derivative(d, nR[I, J], Gg[I, J], 5)
        hess[I, J] = tensor_norm(n2R, Gig[I, J], 6)

    q = np.full(g.shape, np.nan)
    q[target] = rm[target] + grad[target] ** (2 / 3) + np.sqrt(hess[target])
    rm_out = np.where(g.active, rm, np.nan)
    grad_out = np.where(g.active, grad, np.nan)
    if node is not None:
        if not np.isfinite(q[node]):
            raise GridError("Q unavailable at node")
        return CurvatureData(float(rm[node]), float(grad[node]), float(hess[node]), float(q[node]))
    return CurvatureData(rm_out, grad_out, hess, q)


# ---------------------------------------------------------------------------
# geodesic distance

_OFFSETS = np.array([(1, 0), (0, 1), (1, 1), (1, -1), (1, 2), (2, 1), (2, -1), (1, -2)])
_GAUSS3_X = np.array([-np.sqrt(3 / 5), 0.0, np.sqrt(3 / 5)])
_GAUSS3_W = np.array([5 / 9, 8 / 9, 5 / 9])


def segment_lengths(field: PotentialField, a, b):
    """Riemannian lengths of straight segments ``a -> b`` by 3-point Gauss quadrature."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    xi = b - a
    t = 0.5 * (_GAUSS3_X + 1.0)
    pts = a[..., None, :] + t[:, None] * xi[..., None, :]
    H = field.hessian_at(pts)
    q = np.einsum("...i,...kij,...j->...k", xi, H, xi)
    zero = np.all(xi == 0, axis=-1)[..., None]
    if np.any((q <= 0) & ~zero):
        raise MetricDegenerate("metric degenerate", float(np.min(q)))
    return 0.5 * np.sum(_GAUSS3_W * np.sqrt(np.maximum(q, 0.0)), axis=-1)


@dataclass
class NodeGraph:
    field: PotentialField
    mask: np.ndarray
    index: np.ndarray  # grid -> node number (-1 if excluded)
    nodes: np.ndarray  # node number -> (i, j)
    matrix: object

    @property
    def points(self):
        return self.field.grid.points[self.nodes[:, 0], self.nodes[:, 1]]


def node_graph(field: PotentialField, mask=None) -> NodeGraph:
    """16-neighbour graph on ``mask`` (default: active nodes) weighted by segment length."""
    g = field.grid
    mask = g.active if mask is None else mask
    nodes = np.argwhere(mask)
    index = -np.ones(g.shape, dtype=np.int64)
    index[mask] = np.arange(len(nodes))
    rows, cols = [], []
    for di, dj in _OFFSETS:
        I, J = nodes[:, 0] + di, nodes[:, 1] + dj
        valid = (I >= 0) & (I < g.shape[0]) & (J >= 0) & (J < g.shape[1])
        src = np.flatnonzero(valid)
        dst = index[I[valid], J[valid]]
        keep = dst >= 0
        rows.append(src[keep])
        cols.append(dst[keep])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    pts = g.points[nodes[:, 0], nodes[:, 1]]
    w = segment_lengths(field, pts[rows], pts[cols])
    n = len(nodes)
    mat = coo_matrix((np.concatenate([w, w]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
                     shape=(n, n)).tocsr()
    return NodeGraph(field, mask, index, nodes, mat)


def distance_field(field: PotentialField, sources, mask=None, graph: NodeGraph | None = None):
    """Multi-source graph distance from the node set ``sources`` (boolean grid mask)."""
    graph = node_graph(field, mask) if graph is None else graph
    src = graph.index[sources & graph.mask]
    src = np.sort(src[src >= 0])
    if len(src) == 0:
        raise Unreachable("unreachable: empty source set")
    dist = dijkstra(graph.matrix, directed=False, indices=src, min_only=True)
    out = np.full(field.grid.shape, np.inf)
    out[graph.mask] = dist
    return out


def _attach_point(graph: NodeGraph, p, radius=2.5):
    """Edges from an off-grid point to every graph node within ``radius * h``."""
    pts = graph.points
    d = np.linalg.norm(pts - p, axis=1)
    near = np.flatnonzero(d <= radius * graph.field.grid.h)
    if len(near) == 0:
        raise Unreachable("unreachable: point is not near the active region")
    w = segment_lengths(graph.field, np.broadcast_to(p, (len(near), 2)), pts[near])
    return near, w


def geodesic_distance(field: PotentialField, source, target, mask=None, straighten: bool = True,
                      graph: NodeGraph | None = None) -> float:
    """Shortest-path length in the metric ``D2u`` between points or node regions.

    ``source`` and ``target`` are either 2-vectors or boolean grid masks. Point
    to point queries are refined by straightening the graph path.
    """
    graph = node_graph(field, mask) if graph is None else graph
    n = graph.matrix.shape[0]
    mat = graph.matrix.tocoo()
    rows, cols, vals = [mat.row], [mat.col], [mat.data]
    ends = {}
    for name, obj, vid in (("source", source, n), ("target", target, n + 1)):
        obj = np.asarray(obj)
        if obj.dtype == bool:
            ids = graph.index[obj & graph.mask]
            ids = ids[ids >= 0]
            w = np.zeros(len(ids))
            ends[name] = None
        else:
            if field.polygon.margin(obj) < field.grid.collar_width * field.grid.h - 1e-12:
                raise Unreachable(f"unreachable: {name} point outside the active region")
            ids, w = _attach_point(graph, obj.astype(float))
            ends[name] = obj.astype(float)
        rows += [ids, np.full(len(ids), vid)]
        cols += [np.full(len(ids), vid), ids]
        vals += [w, w]
    full = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n + 2, n + 2)).tocsr()
    dist, pred = dijkstra(full, directed=False, indices=n, return_predecessors=True)
    d = float(dist[n + 1])
    if not np.isfinite(d):
        raise Unreachable("unreachable")
    if not (straighten and ends["source"] is not None and ends["target"] is not None):
        return d
    path = []
    k = pred[n + 1]
    while k != n and k >= 0:
        path.append(graph.points[k])
        k = pred[k]
    poly = np.vstack([ends["source"], np.array(path[::-1]).reshape(-1, 2), ends["target"]])
    return min(d, _straighten(field, poly))


def polyline_length(field: PotentialField, poly) -> float:
    poly = np.asarray(poly, dtype=float)
    return float(np.sum(segment_lengths(field, poly[:-1], poly[1:])))


def _straighten(field: PotentialField, poly):
    """Minimise polyline length over interior vertices; returns the refined length."""
    if len(poly) < 3:
        return polyline_length(field, poly)
    floor = field.grid.collar_width * field.grid.h
    a, b = poly[0], poly[-1]

    def length(z):
        pts = np.vstack([a, z.reshape(-1, 2), b])
        if np.min(field.polygon.margin(pts)) < floor:
            return 1e6
        try:
            return polyline_length(field, pts)
        except MetricDegenerate:
            return 1e6

    res = minimize(length, poly[1:-1].ravel(), method="L-BFGS-B", options={"maxiter": 200})
    pts = np.vstack([a, res.x.reshape(-1, 2), b])
    # the straight pieces must stay in the active region
    t = np.linspace(0, 1, 9)[:, None, None]
    samples = pts[:-1] + t * (pts[1:] - pts[:-1])
    if np.min(field.polygon.margin(samples)) < floor - 1e-12:
        return np.inf
    return polyline_length(field, pts)


def straight_chord_bound(field: PotentialField, p, region_mask, n_rays=720):
    """Upper bound for the distance from ``p`` to a node region: the best straight ray.

    Every ray from ``p`` is marched until it first reaches a node of the region
    (within ``h`` of it); the shortest such chord is returned.
    """
    g = field.grid
    tpts = g.points[region_mask]
    p = np.asarray(p, dtype=float)
    best = np.inf
    for th in np.linspace(0, 2 * np.pi, n_rays, endpoint=False):
        nu = np.array([np.cos(th), np.sin(th)])
        rel = tpts - p
        along = rel @ nu
        perp = np.abs(rel @ np.array([-nu[1], nu[0]]))
        hit = (along > 0) & (perp <= 0.5 * g.h)
        if not np.any(hit):
            continue
        q = tpts[hit][np.argmin(along[hit])]
        best = min(best, _chord_length(field, p, q))
    return best


def _chord_length(field, p, q, pieces=64):
    t = np.linspace(0, 1, pieces + 1)[:, None]
    pts = p + t * (q - p)
    return float(np.sum(segment_lengths(field, pts[:-1], pts[1:])))


# ---------------------------------------------------------------------------
# M-condition and segment checks


def m_condition_value(field: PotentialField, p, nu, R: float) -> float:
    """``|(Du(p - R nu) - Du(p + R nu)) . nu|`` for one segment; only ``p +- R nu`` must be inside."""
    p = np.asarray(p, dtype=float)
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu)
    ends = np.array([p - R * nu, p + R * nu])
    if np.min(field.polygon.margin(ends)) <= 0:
        raise ValueError("segment clipped")
    g = field.gradient(ends)
    return float(abs((g[0] - g[1]) @ nu))


def m_condition_estimate(field: PotentialField, R: float, n_directions: int = 8, anchors=None) -> float:
    """``max |(Du(p - R nu) - Du(p + R nu)) . nu|`` over admissible anchors and directions.

    A pair ``(p, nu)`` is admissible when ``[p - 3R nu, p + 3R nu]`` lies
    strictly inside the polygon. Anchors default to the active nodes.
    """
    if anchors is None:
        anchors = field.grid.points[field.grid.active]
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
    best = -np.inf
    for k in range(n_directions):
        th = np.pi * k / n_directions
        nu = np.array([np.cos(th), np.sin(th)])
        ok = (field.polygon.margin(anchors - 3 * R * nu) > 0) & (field.polygon.margin(anchors + 3 * R * nu) > 0)
        if not np.any(ok):
            continue
        p = anchors[ok]
        diff = (field.gradient(p - R * nu) - field.gradient(p + R * nu)) @ nu
        best = max(best, float(np.max(np.abs(diff))))
    if not np.isfinite(best):
        raise ValueError("no admissible segments")
    return best


@dataclass
class SegmentSample:
    p: np.ndarray
    nu: np.ndarray
    R: float
    s: np.ndarray
    points: np.ndarray
    rm: np.ndarray
    H: np.ndarray  # u_ij nu^i nu^j
    jets: Jets = dc_field(repr=False)


def sample_segment(field: PotentialField, p, nu, R, n: int = 241) -> SegmentSample:
    """Samples of ``p + s nu``, ``s`` in ``[-3R, 3R]``; every point must be active."""
    p = np.asarray(p, dtype=float)
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu)
    s = np.linspace(-3 * R, 3 * R, n)
    pts = p + s[:, None] * nu
    g = field.grid
    if np.min(field.polygon.margin(pts)) < g.collar_width * g.h - 1e-12:
        raise ValueError("segment clipped")
    jets = field.jets_at(pts)
    rm = curvature_norm_from_jets(jets)
    H = np.einsum("...ij,i,j->...", jets.d2, nu, nu)
    return SegmentSample(p, nu, float(R), s, pts, rm, H, jets)


@dataclass
class HessianBoundReport:
    H0: float
    M: float
    C_sq: float  # integral of |Rm|^2 over [-R, R]
    bound: float  # bound derived with C = sqrt(C_sq), see notes in the function
    literal_bounds: dict
    second_difference_ok: bool
    max_excess: float  # max of (second difference of 1/H) - |Rm| - tolerance
    pointwise_ok: bool
    passed: bool


def hessian_segment_bound(field: PotentialField, segment: SegmentSample, M: float | None = None,
                          rtol: float = 1e-9) -> HessianBoundReport:
    """Upper bound on ``u_ij(p) nu^i nu^j`` from the M-condition and ``int |Rm|^2``.

    Along the line, ``(1/H)'' <= |Rm|`` gives ``1/H(s) <= 1/H(0) + s (1/H)'(0) + C s^{3/2}``
    with ``C^2 = int |Rm|^2``; integrating ``H`` over ``[-R, R]`` then yields
    ``H(0) <= (exp(M C / 2) - 1) / (C R)`` for ``R <= 1`` (``R`` replaced by 1
    otherwise). ``literal_bounds`` also reports ``exp((M - C)/2)`` and
    ``(exp(M/2) - 1)/(C R)`` for both readings of ``C``.
    """
    seg = segment
    R, p, nu = seg.R, seg.p, seg.nu
    if M is None:
        M = float(abs((field.gradient(p - R * nu) - field.gradient(p + R * nu)) @ nu))
    inner = np.abs(seg.s) <= R + 1e-12
    C_sq = float(np.trapezoid(seg.rm[inner] ** 2, seg.s[inner]))
    C = np.sqrt(C_sq)
    H0 = float(np.interp(0.0, seg.s, seg.H))
    r_eff = min(R, 1.0)
    bound = np.expm1(M * C / 2) / (C * r_eff) if C > 0 else M / (2 * r_eff)
    literal = {}
    for label, c in (("C=int|Rm|^2", C_sq), ("C=sqrt(int|Rm|^2)", C)):
        literal[label] = float(np.exp((M - c) / 2)) if R > 1 else (float(np.expm1(M / 2) / (c * R)) if c > 0 else np.inf)

    # differential inequality, by second differences and pointwise from the jets
    f = 1.0 / seg.H
    ds = seg.s[1] - seg.s[0]
    sd = (f[2:] - 2 * f[1:-1] + f[:-2]) / ds**2
    fourth = np.zeros_like(sd)
    fourth[1:-1] = np.abs(f[4:] - 4 * f[3:-1] + 6 * f[2:-2] - 4 * f[1:-3] + f[:-4]) / ds**4
    fourth[0], fourth[-1] = fourth[1], fourth[-2]
    tol = ds**2 / 12 * 2 * fourth + rtol * (1 + seg.rm[1:-1])
    excess = sd - seg.rm[1:-1] - tol
    d3 = np.einsum("...ijk,i,j,k->...", seg.jets.d3, nu, nu, nu)
    d4 = np.einsum("...ijkl,i,j,k,l->...", seg.jets.d4, nu, nu, nu, nu)
    exact = 2 * d3**2 / seg.H**3 - d4 / seg.H**2
    pointwise_ok = bool(np.all(exact <= seg.rm * (1 + rtol) + rtol))
    sd_ok = bool(np.all(excess <= 0))
    return HessianBoundReport(H0, float(M), C_sq, float(bound), literal, sd_ok, float(np.max(excess)),
                              pointwise_ok, bool(sd_ok and pointwise_ok and H0 <= bound * (1 + 1e-9)))


@dataclass
class CoordinateReport:
    margin_zz: np.ndarray  # |Rm| u^zz u_xx - |u^zz_xx|, per node and axis choice
    margin_xx: np.ndarray  # 2 |Rm| u^xx u_xx - |u^xx_xx|
    passed: bool


def coordinate_inequality_check(field: PotentialField, node=None, mask=None, rtol=1e-10) -> CoordinateReport:
    """Both coordinate inequalities with ``x``, ``z`` the grid axes (both assignments)."""
    if node is not None:
        jets = _node_jets(field, node)
        jets = Jets(*(a[None] for a in jets))
    else:
        mask = field.grid.active if mask is None else mask
        j = field.jets
        jets = Jets(j.d2[mask], j.d3[mask], j.d4[mask])
    W, _, T = inverse_hessian_derivatives(jets)
    H = jets.d2
    rm = curvature_norm_from_jets(jets)
    mz, mx = [], []
    for x, z in ((0, 1), (1, 0)):
        lhs_zz = np.abs(T[:, z, z, x, x])
        rhs_zz = rm * W[:, z, z] * H[:, x, x]
        lhs_xx = np.abs(T[:, x, x, x, x])
        rhs_xx = 2 * rm * W[:, x, x] * H[:, x, x]
        mz.append(rhs_zz - lhs_zz)
        mx.append(rhs_xx - lhs_xx)
    mz, mx = np.stack(mz, -1), np.stack(mx, -1)
    scale = rtol * (1 + np.abs(T).max(axis=(1, 2, 3, 4))[:, None])
    passed = bool(np.all(mz >= -scale) and np.all(mx >= -scale))
    return CoordinateReport(mz, mx, passed)


def segment_trace_integral(field: PotentialField, p, nu, R, pieces: int = 32):
    """``int_{-R}^{R} Tr(u^ij)(p + s nu) ds`` and the smallest eigenvalue of ``D2u(p)``."""
    p = np.asarray(p, dtype=float)
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu)
    if min(field.polygon.margin(p - R * nu), field.polygon.margin(p + R * nu)) <= 0:
        raise ValueError("segment clipped")
    edges = np.linspace(-R, R, pieces + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1] - edges[0])
    s = (mid[:, None] + half * _GAUSS3_X).ravel()
    w = np.tile(half * _GAUSS3_W, pieces)
    H = field.hessian_at(p + s[:, None] * nu)
    W, _, _ = inverse_and_cofactor(H)
    integral = float(np.sum(w * (W[:, 0, 0] + W[:, 1, 1])))
    eig = float(np.linalg.eigvalsh(field.hessian_at(p))[0])
    return integral, eig


# ---------------------------------------------------------------------------
# snapshot of per-node geometry


@dataclass
class GeometrySnapshot:
    t: float
    nodes: np.ndarray
    points: np.ndarray
    hessian: np.ndarray
    inverse: np.ndarray
    det: np.ndarray
    A: np.ndarray
    rm: np.ndarray
    grad_rm: np.ndarray
    hess_rm: np.ndarray
    Q: np.ndarray
    A_bar: float

    @property
    def eig(self):
        return np.linalg.eigvalsh(self.hessian)

    def write_csv(self, path):
        eig = self.eig
        cols = ["x1", "x2", "A", "rm", "grad_rm", "hess_rm", "Q", "eig_min", "eig_max", "trace_inv"]
        with AtomicCSV(path, [",".join(cols)]) as out:
            tr = self.inverse[:, 0, 0] + self.inverse[:, 1, 1]
            for k in range(len(self.nodes)):
                out.write([fmt(v) for v in (self.points[k, 0], self.points[k, 1], self.A[k], self.rm[k],
                                            self.grad_rm[k], self.hess_rm[k], self.Q[k], eig[k, 0],
                                            eig[k, 1], tr[k])])


def geometry_snapshot(field: PotentialField, t: float = 0.0, curvature: CurvatureData | None = None):
    g = field.grid
    mask = g.active
    A = abreu_scalar(field)
    cd = q_quantity(field) if curvature is None else curvature
    H = field.hessian[mask]
    W, _, det = inverse_and_cofactor(H)
    return GeometrySnapshot(t, np.argwhere(mask), g.points[mask], H, W, det, A[mask], cd.rm[mask],
                            cd.grad_rm[mask], cd.hess_rm[mask], cd.q[mask], float(np.mean(A[mask])))
