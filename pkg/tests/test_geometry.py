import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abreuflow import build_grid, field_from_function, geometry
from abreuflow.errors import GridError, Unreachable
from abreuflow.field import perturbation, rescale_potential
from abreuflow.monitor import region_nodes


def center(field):
    return field.grid.nearest_node(field.polygon.chebyshev_center)


def test_flat_abreu_zero(flat32):
    m = flat32.grid.active
    assert np.max(np.abs(geometry.abreu_scalar(flat32)[m])) < 1e-12
    assert np.max(geometry.curvature_norm(flat32)[m]) < 1e-12
    assert geometry.average_scalar(flat32).average == pytest.approx(0.0, abs=1e-12)


def test_square_abreu_eight(square64):
    m = square64.grid.active
    A = geometry.abreu_scalar(square64)[m]
    assert np.allclose(A, 8.0, atol=1e-9)
    B = geometry.abreu_scalar_cofactor(square64)[m]
    assert np.allclose(A, B, atol=1e-9)


def test_dual_forms_agree(square):
    f = field_from_function(build_grid(square, 1 / 64), perturbation("trig", 5e-3, seed=2))
    m = f.grid.active
    A = geometry.abreu_scalar(f)[m]
    B = geometry.abreu_scalar_cofactor(f)[m]
    assert np.max(np.abs(A - B) / (1 + np.abs(A))) <= 1e-6


def test_sampled_cofactor_second_order(square):
    # the fully sampled cofactor form converges to the jet form at second order
    errs = []
    for n in (32, 64):
        f = field_from_function(build_grid(square, 1 / n), perturbation("sine", 1e-2))
        g = f.grid
        m = g.active & (g.margin >= 0.15)
        A = geometry.abreu_scalar(f)[m]
        S = geometry.abreu_scalar_cofactor(f, sampled=True)[m]
        errs.append(np.max(np.abs(A - S)))
    assert math.log2(errs[0] / errs[1]) > 1.8


def test_curvature_center(square64):
    n = center(square64)
    assert geometry.curvature_norm(square64, n) == pytest.approx(math.sqrt(32), rel=1e-10)
    assert geometry.curvature_norm_oracle(square64, n) == pytest.approx(math.sqrt(32), rel=1e-8)


def test_christoffel_oracle_perturbed(square):
    f = field_from_function(build_grid(square, 1 / 32), perturbation("quartic", 1e-2, seed=5))
    m = f.grid.active
    a = geometry.curvature_norm(f)[m]
    b = geometry.curvature_norm_oracle(f)[m]
    assert np.max(np.abs(a - b) / b) <= 1e-4


def test_riemann_from_metric_flat():
    val = geometry.riemann_norm_from_metric(lambda x: np.eye(4), np.array([0.3, 0.4]))
    assert val == pytest.approx(0.0, abs=1e-8)


def test_q_center_symmetry(square64):
    n = center(square64)
    cd = geometry.q_quantity(square64, n)
    assert float(np.ravel(cd.grad_rm)[0]) <= 1e-6
    q = float(np.ravel(cd.q)[0])
    rm = float(np.ravel(cd.rm)[0])
    assert q == pytest.approx(rm + math.sqrt(float(np.ravel(cd.hess_rm)[0])), rel=1e-12)


def test_q_definition(sine32):
    cd = geometry.q_quantity(sine32)
    ok = np.isfinite(cd.q)
    assert np.any(ok)
    want = cd.rm[ok] + cd.grad_rm[ok] ** (2 / 3) + np.sqrt(cd.hess_rm[ok])
    assert np.allclose(cd.q[ok], want)


def test_q_flat_zero(flat32):
    cd = geometry.q_quantity(flat32)
    assert np.nanmax(cd.q) <= 1e-10


def test_q_unavailable(square32):
    with pytest.raises(GridError, match="Q unavailable at node"):
        geometry.q_quantity(square32, (3, 3))


def test_q_scaling(square32):
    c = np.array([0.5, 0.5])
    lam = 2.0
    fr = rescale_potential(square32, lam, c)
    n = square32.grid.nearest_node(np.array([0.375, 0.4375]))
    n2 = fr.grid.nearest_node(lam * (square32.grid.points[n] - c))
    a, b = geometry.q_quantity(square32, n), geometry.q_quantity(fr, n2)
    for name, power in (("rm", 1), ("grad_rm", 1.5), ("hess_rm", 2)):
        x, y = float(np.ravel(getattr(a, name))[0]), float(np.ravel(getattr(b, name))[0])
        assert y * lam**power == pytest.approx(x, rel=1e-6, abs=1e-9)


def test_average_scalar_square(square):
    for n in (32, 64):
        avg = geometry.average_scalar(field_from_function(build_grid(square, 1 / n)))
        assert avg.lattice == pytest.approx(8.0)
        assert avg.average == pytest.approx(8.0, abs=1e-2)


def test_average_scalar_simplex(simplex):
    avg = geometry.average_scalar(field_from_function(build_grid(simplex, 1 / 64)))
    assert avg.lattice == pytest.approx(2 * (2 + 1) / 0.5)
    assert avg.average == pytest.approx(avg.lattice, rel=1e-2)


def test_average_scalar_rescaled(square32):
    fr = rescale_potential(square32, 2.0, np.array([0.5, 0.5]))
    a0 = geometry.average_scalar(square32).average
    assert geometry.average_scalar(fr).average == pytest.approx(a0 / 2, rel=1e-6)


def test_flat_distance(flat32):
    d = geometry.geodesic_distance(flat32, np.array([0.2, 0.2]), np.array([0.8, 0.2]))
    assert d == pytest.approx(0.6, rel=1e-2)


def test_anisotropic_distance(square):
    f = field_from_function(build_grid(square, 1 / 32), lambda x: 1.5 * x[..., 0] ** 2, base="flat")
    d = geometry.geodesic_distance(f, np.array([0.2, 0.5]), np.array([0.8, 0.5]))
    assert d == pytest.approx(1.2, rel=1e-2)


def test_guillemin_axis_distance(square32):
    # along the axis through the centre the metric is u_11 = 1/(2x(1-x)); length is exact
    p, q = np.array([0.25, 0.5]), np.array([0.75, 0.5])
    exact = 2 * math.sqrt(0.5) * (math.asin(math.sqrt(0.75)) - math.asin(math.sqrt(0.25)))
    d = geometry.geodesic_distance(square32, p, q)
    assert d <= exact * (1 + 1e-2) and d >= exact * (1 - 1e-2)


def test_straight_chord(square64):
    g = square64.grid
    node = center(square64)
    region = region_nodes(square64, 0.25)
    edge = region & ~np.pad(region, 1)[2:, 1:-1] | region & ~np.pad(region, 1)[:-2, 1:-1] \
        | region & ~np.pad(region, 1)[1:-1, 2:] | region & ~np.pad(region, 1)[1:-1, :-2]
    src = np.zeros(g.shape, dtype=bool)
    src[node] = True
    d = geometry.distance_field(square64, src)
    chord = geometry.straight_chord_bound(square64, g.points[node], edge)
    assert np.min(d[edge]) <= chord * 1.01


def test_unreachable(square32):
    with pytest.raises(Unreachable):
        geometry.geodesic_distance(square32, np.array([0.01, 0.5]), np.array([0.5, 0.5]))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000))
def test_distance_metric_axioms(sine32, seed):
    rng = np.random.default_rng(seed)
    graph = getattr(test_distance_metric_axioms, "_graph", None)
    if graph is None:
        graph = test_distance_metric_axioms._graph = geometry.node_graph(sine32)
    pts = 0.2 + 0.6 * rng.random((3, 2))
    d = lambda a, b: geometry.geodesic_distance(sine32, a, b, graph=graph, straighten=False)
    ab, ba, bc, ac = d(pts[0], pts[1]), d(pts[1], pts[0]), d(pts[1], pts[2]), d(pts[0], pts[2])
    assert ab == pytest.approx(ba, rel=1e-12)
    assert ac <= ab + bc + 1e-12


def test_m_condition_examples(square, flat32, square32):
    c, e1 = np.array([0.5, 0.5]), np.array([1.0, 0.0])
    assert geometry.m_condition_value(flat32, c, e1, 0.25) == pytest.approx(0.5)
    assert geometry.m_condition_value(square32, c, e1, 0.25) == pytest.approx(math.log(3), rel=1e-12)
    p = c[None]
    f = square32
    # the estimator also needs p +- 3R nu inside
    val = geometry.m_condition_estimate(f, 0.15, 1, anchors=p)
    assert val == pytest.approx(math.log(0.65 / 0.35), rel=1e-10)
    with pytest.raises(ValueError, match="no admissible segments"):
        geometry.m_condition_estimate(f, 0.25, 1, anchors=p)


def test_m_condition_scaling(sine32):
    fr = rescale_potential(sine32, 5.0, np.array([0.5, 0.5]))
    m0 = geometry.m_condition_estimate(sine32, 0.05)
    m1 = geometry.m_condition_estimate(fr, 0.25)
    assert m1 == pytest.approx(m0, rel=1e-3)


def test_hessian_bound_flat(flat32):
    seg = geometry.sample_segment(flat32, np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0.1)
    rep = geometry.hessian_segment_bound(flat32, seg)
    assert np.allclose(seg.H, 1.0) and np.allclose(seg.rm, 0.0)
    assert rep.second_difference_ok and rep.pointwise_ok


def test_hessian_bound_square(square64):
    seg = geometry.sample_segment(square64, np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0.1)
    s = seg.s
    assert np.allclose(seg.H, 1 / (2 * (0.5 + s) * (0.5 - s)))
    f = 1 / seg.H
    sd = (f[2:] - 2 * f[1:-1] + f[:-2]) / (s[1] - s[0]) ** 2
    assert np.allclose(sd, -4.0, atol=1e-8)
    rep = geometry.hessian_segment_bound(square64, seg)
    assert rep.passed
    assert set(rep.literal_bounds) == {"C=int|Rm|^2", "C=sqrt(int|Rm|^2)"}


def test_segment_clipped(square64):
    with pytest.raises(ValueError, match="segment clipped"):
        geometry.sample_segment(square64, np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0.2)


def test_coordinate_inequalities_center(square64):
    rep = geometry.coordinate_inequality_check(square64, center(square64))
    assert rep.passed
    # |(u^zz)_xx| = 0 and |(u^xx)_xx| = 4 at the centre
    assert np.allclose(rep.margin_zz, math.sqrt(32) * 0.5 * 2)
    assert np.allclose(rep.margin_xx, 2 * math.sqrt(32) * 0.5 * 2 - 4)


def test_coordinate_inequalities_flat(flat32):
    rep = geometry.coordinate_inequality_check(flat32)
    assert rep.passed and np.allclose(rep.margin_zz, 0) and np.allclose(rep.margin_xx, 0)


@pytest.mark.parametrize("seed", range(4))
def test_coordinate_inequalities_quartic(square, seed):
    f = field_from_function(build_grid(square, 1 / 32), perturbation("quartic", 5e-2, seed=seed))
    assert np.count_nonzero(f.grid.active) >= 1000 // 2
    assert geometry.coordinate_inequality_check(f).passed


def test_segment_trace_integral(square64, flat32):
    val, eig = geometry.segment_trace_integral(flat32, np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0.25)
    assert val == pytest.approx(2 * 0.5) and eig == pytest.approx(1.0)
    val, _ = geometry.segment_trace_integral(square64, np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0.25)
    # int_{0.25}^{0.75} 2x(1-x) dx + 0.5 * 0.5
    exact = 2 * ((0.75**2 / 2 - 0.75**3 / 3) - (0.25**2 / 2 - 0.25**3 / 3)) + 0.25
    assert val == pytest.approx(exact, rel=1e-8)


def test_segment_trace_constant_metric(square):
    eps = 0.05
    f = field_from_function(build_grid(square, 1 / 16), lambda x: 0.5 * (eps - 1) * x[..., 0] ** 2, base="flat")
    val, eig = geometry.segment_trace_integral(f, np.array([0.5, 0.5]), np.array([0.0, 1.0]), 0.2)
    assert eig == pytest.approx(eps)
    assert val >= (1 / eps) * 0.4


def test_snapshot_csv(sine32, tmp_path):
    snap = geometry.geometry_snapshot(sine32, 0.5)
    path = tmp_path / "geo.csv"
    snap.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2,A,rm,grad_rm,hess_rm,Q,eig_min,eig_max,trace_inv"
    assert len(lines) == 1 + np.count_nonzero(sine32.grid.active)
