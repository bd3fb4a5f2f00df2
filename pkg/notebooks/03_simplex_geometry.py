"""
Geometry on the simplex
=======================

The unit simplex is the moment polygon of the projective plane, and its
Guillemin potential gives the Fubini-Study metric: A is constant again, now 12,
and the boundary identity fixes its integral at 6. We also look at distances
and at what a unimodular change of coordinates does (nothing, up to
discretisation).
"""
# %%
import numpy as np

from abreuflow import build_grid, field_from_function, geometry, oracles, unit_simplex
from abreuflow.polytope import inset

simplex = unit_simplex()
print("inradius %.6f, centre %s" % (simplex.inradius, simplex.chebyshev_center))
field = field_from_function(build_grid(simplex, 1 / 64))
g = field.grid
A = geometry.abreu_scalar(field)[g.active]
print("A on active nodes: %.4f .. %.4f" % (A.min(), A.max()))

avg = geometry.average_scalar(field)
print("integral of A %.6f vs 2 x boundary measure %.6f" % (avg.integral, avg.lattice * simplex.area))

# %%
# distance from the centre to the boundary of the inset P_eps, for a few eps
c = g.nearest_node(simplex.chebyshev_center)
src = np.zeros(g.shape, dtype=bool)
src[c] = True
dist = geometry.distance_field(field, src)
for eps in (0.05, 0.1, 0.15):
    region = inset(simplex, eps)
    ring = g.active & (np.abs(region.margin(g.points)) < g.h)
    print("eps %.2f: d(centre, boundary of P_eps) ~ %.4f" % (eps, dist[ring].min()))

# %%
# M-condition at a few radii
for R in (0.02, 0.04, 0.06):
    print("R %.2f  M = %.4f" % (R, geometry.m_condition_estimate(field, R)))

# %%
# unimodular invariance with a cubic perturbation
cubic = oracles.cubic_perturbation(1e-3, seed=1, center=simplex.centroid)
for r in oracles.affine_invariance(simplex, 1 / 48, cubic, seed=1):
    print("%-16s error %.2e  tolerance %.0e  %s" % (r.name, r.error, r.tolerance, "ok" if r.passed else "FAIL"))
