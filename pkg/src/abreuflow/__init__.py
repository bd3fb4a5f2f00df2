"""Calabi flow on toric surfaces in symplectic (moment polygon) coordinates."""
from .errors import (AbreuFlowError, BoundarySingularity, ConfigError, FlowStalled, GridError,
                     IncompatibleFields, MetricDegenerate, PolygonError, SnapshotError, Unreachable)
from .polytope import DelzantPolygon, inset, unit_simplex, unit_square, validate_delzant
from .field import Grid, PotentialField, build_grid, field_from_function

__version__ = "0.1.0"
