import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abreuflow.errors import PolygonError
from abreuflow.polytope import (boundary_sigma_length, classify_point, inset, parse_polygon, polygon_area,
                                scale_polygon, transform_polygon, validate_delzant)
from abreuflow.oracles import random_unimodular


def test_square_vertices_ccw(square):
    assert np.allclose(square.vertices, [[0, 0], [1, 0], [1, 1], [0, 1]])
    assert square.area == pytest.approx(1.0)


def test_simplex_valid(simplex):
    assert simplex.n_edges == 3
    assert simplex.area == pytest.approx(0.5)
    assert polygon_area(simplex.vertices) > 0


def test_vertex_determinant_violation():
    with pytest.raises(PolygonError) as err:
        validate_delzant([((1, 0), 0.0), ((1, 2), 0.0), ((-1, -1), -3.0)])
    assert any("vertex determinant 2 ≠ ±1" in v for v in err.value.violations)


@pytest.mark.parametrize("edges, fragment", [
    ([((2, 0), 0.0), ((0, 1), 0.0), ((-1, 0), -1.0), ((0, -1), -1.0)], "non-primitive"),
    ([((1, 0), 0.0), ((0, 1), 0.0)], "degenerate polygon"),
    ([((1, 0), 0.0), ((0, 1), 0.0), ((1, 1), 0.0)], "unbounded"),
    ([((1, 0), 0.0), ((0, 1), 0.0), ((-1, 0), -1.0), ((0, -1), -1.0), ((-1, -1), -5.0)], "non-convex"),
    ([], "degenerate polygon"),
])
def test_violations_named(edges, fragment):
    with pytest.raises(PolygonError) as err:
        validate_delzant(edges)
    assert any(fragment in v for v in err.value.violations)


def test_parse_polygon_comments():
    p = parse_polygon("# square\n1 0 0\n0 1 0  # bottom\n\n-1 0 -1\n0 -1 -1\n")
    assert p.n_edges == 4
    with pytest.raises(PolygonError):
        parse_polygon("1 0\n")
    with pytest.raises(PolygonError):
        parse_polygon("1 x 0\n0 1 0\n-1 -1 -1\n")


def test_to_text_roundtrip(simplex):
    assert "np." not in simplex.to_text()
    assert parse_polygon(simplex.to_text()).digest == simplex.digest


def test_inset_square(square):
    r = inset(square, 0.25)
    assert sorted(map(tuple, np.round(r.vertices, 12))) == [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]
    assert inset(square, 0.6).is_empty
    with pytest.raises(ValueError, match="invalid inset"):
        inset(square, -0.1)


def test_inset_simplex(simplex):
    r = inset(simplex, 0.1)
    a = 1 - 0.1 * math.sqrt(2) - 0.1
    want = sorted([(0.1, 0.1), (a, 0.1), (0.1, a)])
    assert np.allclose(sorted(map(tuple, np.round(r.vertices, 12))), want, atol=1e-12)


def test_sigma_lengths(square, simplex):
    assert [boundary_sigma_length(square, k) for k in range(4)] == pytest.approx([1.0] * 4)
    assert boundary_sigma_length(simplex, 2) == pytest.approx(1.0)
    with pytest.raises(IndexError):
        boundary_sigma_length(square, 4)


def test_classify(square):
    c = classify_point(square, (0.5, 0.5))
    assert c[0] == "interior" and c[1] == pytest.approx(0.5)
    assert classify_point(square, (1.0, 0.5))[0] == "boundary"
    assert classify_point(square, (1.1, 0.5))[0] == "exterior"


def test_chebyshev(square, simplex):
    assert square.inradius == pytest.approx(0.5)
    assert np.allclose(square.chebyshev_center, [0.5, 0.5])
    assert simplex.inradius == pytest.approx(1 / (2 + math.sqrt(2)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(0.0, 0.3))
def test_inset_points_far_from_boundary(square, simplex, seed, eps):
    rng = np.random.default_rng(seed)
    for poly in (square, simplex):
        poly = transform_polygon(poly, random_unimodular(rng), rng.normal(size=2))
        r = inset(poly, eps)
        if r.is_empty:
            continue
        # random convex combinations of the inset vertices
        w = rng.dirichlet(np.ones(len(r.vertices)), size=50)
        pts = w @ r.vertices
        for x in pts:
            if classify_point(r, x)[0] == "interior":
                d = np.abs(poly.normals @ x - poly.offsets) / np.linalg.norm(poly.normals, axis=1)
                assert np.all(d > eps - 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_unimodular_images_stay_delzant(simplex, seed):
    rng = np.random.default_rng(seed)
    S = random_unimodular(rng)
    assert abs(round(np.linalg.det(S))) == 1
    p = transform_polygon(simplex, S, rng.normal(size=2))
    assert p.area == pytest.approx(simplex.area)
    v = p.vertices
    a, b = np.roll(v, -1, 0) - v, np.roll(v, -2, 0) - np.roll(v, -1, 0)
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    assert np.all(cross > 0)  # counterclockwise and convex
    assert np.all(p.edge_values(p.centroid) > 0)


def test_scale_polygon(simplex):
    p = scale_polygon(simplex, 2.0, simplex.chebyshev_center)
    assert p.area == pytest.approx(4 * simplex.area)
    assert p.inradius == pytest.approx(2 * simplex.inradius)
