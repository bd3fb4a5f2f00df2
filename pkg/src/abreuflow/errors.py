"""Exception types raised across the package."""


class AbreuFlowError(Exception):
    """Base class for all package errors."""


class PolygonError(AbreuFlowError, ValueError):
    """Invalid polygon input. ``violations`` lists every broken invariant."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations) or [message]


class BoundarySingularity(AbreuFlowError, ValueError):
    pass


class GridError(AbreuFlowError, ValueError):
    pass


class MetricDegenerate(AbreuFlowError, ArithmeticError):
    """Hessian of the potential lost positive definiteness."""

    def __init__(self, message="metric degenerate", min_eigenvalue=float("nan")):
        super().__init__(f"{message} (min eigenvalue {min_eigenvalue:.6g})")
        self.min_eigenvalue = min_eigenvalue


class Unreachable(AbreuFlowError):
    pass


class FlowStalled(AbreuFlowError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class IncompatibleFields(AbreuFlowError, ValueError):
    pass


class SnapshotError(AbreuFlowError, ValueError):
    pass


class ConfigError(AbreuFlowError, ValueError):
    def __init__(self, message, line=0, column=0):
        where = f"line {line}, column {column}: " if line else ""
        super().__init__(where + message)
        self.line = line
        self.column = column


class EpsilonTooLarge(AbreuFlowError, ValueError):
    """The inset ``P_{2 eps}`` is empty."""
