"""
The square and its extremal metric
==================================

The Guillemin potential of the unit square has constant scalar curvature 8.
This script checks that value, the curvature norm at the centre and the fact
that the flow leaves the metric alone.
"""
# %%
import numpy as np

from abreuflow import build_grid, field_from_function, flow, geometry, unit_square

square = unit_square()
field = field_from_function(build_grid(square, 1 / 64))
g = field.grid
print("active nodes:", np.count_nonzero(g.active))

# %%
# Scalar curvature from the jet form and the cofactor form
A = geometry.abreu_scalar(field)[g.active]
B = geometry.abreu_scalar_cofactor(field)[g.active]
print("A range  %.15f .. %.15f" % (A.min(), A.max()))
print("max |A - B| = %.2e" % np.max(np.abs(A - B)))

avg = geometry.average_scalar(field)
print("average by quadrature %.10f, lattice prediction %.10f" % (avg.average, avg.lattice))

# %%
# |Rm| at the centre should be sqrt(32); the Christoffel computation agrees
c = g.nearest_node(np.array([0.5, 0.5]))
print("|Rm| contraction %.12f  christoffel %.12f  sqrt(32) %.12f" % (
    geometry.curvature_norm(field, c), geometry.curvature_norm_oracle(field, c), np.sqrt(32)))

# %%
# A short flow run: v should stay at rounding level
dt = flow.dt_limit(field, 0.15)
state, ledger = flow.advance(flow.FlowState(0.0, field, dt), 2000 * dt, dt)
print("steps %d, t = %.3e, max|v| = %.2e, E = %.2e" % (state.steps, state.t, np.abs(state.field.v).max(),
                                                        state.energy))
