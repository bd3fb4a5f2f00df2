"""Calabi flow ``dv/dt = Abar - A`` on the active nodes, explicit RK4 in time.

The hot loop (scalar curvature at every inside node) is a numba kernel using
the cofactor form of the Abreu operator with the same centered stencils as
:func:`abreuflow.field.fd_jets`. All reductions run sequentially in row-major
node order, so results do not depend on the machine or thread settings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, NamedTuple

import numba
import numpy as np

from .errors import FlowStalled, IncompatibleFields, MetricDegenerate
from .field import PotentialField
from .geometry import area_quadrature, bilinear
from .io import AtomicCSV, fmt

LEDGER_HEADER = "step,t,dt,energy,dissipation,accepted"
MIN_DT = 1e-16
STALL_MESSAGE = "flow stalled: suspected singularity"


@numba.njit(cache=True)
def _inverse_hessian_kernel(v, b2, inside, h, W):
    """Nodal ``u^ij`` from ``D2u0 + S v`` at inside nodes; returns the smallest of (u11, det)."""
    nx, ny = v.shape
    h2 = h * h
    worst = np.inf
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            if not inside[i, j]:
                continue
            c0 = v[i, j]
            a = b2[i, j, 0] + (v[i + 1, j] - 2 * c0 + v[i - 1, j]) / h2
            b = b2[i, j, 1] + (v[i + 1, j + 1] - v[i + 1, j - 1] - v[i - 1, j + 1] + v[i - 1, j - 1]) / (4 * h2)
            c = b2[i, j, 2] + (v[i, j + 1] - 2 * c0 + v[i, j - 1]) / h2
            d = a * c - b * b
            worst = min(worst, a, d)
            if a > 0 and d > 0:
                W[i, j, 0] = c / d
                W[i, j, 1] = -b / d
                W[i, j, 2] = a / d
            else:
                W[i, j, 0] = np.nan
                W[i, j, 1] = np.nan
                W[i, j, 2] = np.nan
    return worst


@numba.njit(cache=True)
def _divergence_kernel(W, active, h, out):
    """``A = -(Sxx W11 + 2 Sxy W12 + Syy W22)`` at active nodes."""
    nx, ny = active.shape
    h2 = h * h
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            if not active[i, j]:
                continue
            sxx = (W[i + 1, j, 0] - 2 * W[i, j, 0] + W[i - 1, j, 0]) / h2
            syy = (W[i, j + 1, 2] - 2 * W[i, j, 2] + W[i, j - 1, 2]) / h2
            sxy = (W[i + 1, j + 1, 1] - W[i + 1, j - 1, 1] - W[i - 1, j + 1, 1] + W[i - 1, j - 1, 1]) / (4 * h2)
            out[i, j] = -(sxx + 2 * sxy + syy)


@numba.njit(cache=True)
def _active_mean(A, active):
    s = 0.0
    n = 0
    nx, ny = A.shape
    for i in range(nx):
        for j in range(ny):
            if active[i, j]:
                s += A[i, j]
                n += 1
    return s / n


@numba.njit(cache=True)
def _energy(A, active, abar, h):
    s = 0.0
    nx, ny = A.shape
    for i in range(nx):
        for j in range(ny):
            if active[i, j]:
                r = A[i, j] - abar
                s += r * r
    return s * h * h


@numba.njit(cache=True)
def _dissipation(R, W, h):
    """``2 h^2 sum tr(W S(R) W S(R))`` over nodes where the stencil of ``R`` is nonzero.

    ``R`` is zero away from the active set; ``S(R)`` is its centered Hessian.
    """
    s = 0.0
    nx, ny = R.shape
    h2 = h * h
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            x0 = R[i, j]
            rxx = (R[i + 1, j] - 2 * x0 + R[i - 1, j]) / h2
            ryy = (R[i, j + 1] - 2 * x0 + R[i, j - 1]) / h2
            rxy = (R[i + 1, j + 1] - R[i + 1, j - 1] - R[i - 1, j + 1] + R[i - 1, j - 1]) / (4 * h2)
            if rxx == 0.0 and ryy == 0.0 and rxy == 0.0:
                continue
            w11, w12, w22 = W[i, j, 0], W[i, j, 1], W[i, j, 2]
            m11 = w11 * rxx + w12 * rxy
            m12 = w11 * rxy + w12 * ryy
            m21 = w12 * rxx + w22 * rxy
            m22 = w12 * rxy + w22 * ryy
            s += m11 * m11 + 2 * m12 * m21 + m22 * m22
    return 2.0 * s * h2


@numba.njit(cache=True)
def _axpy_active(v, k, alpha, active, out):
    nx, ny = v.shape
    for i in range(nx):
        for j in range(ny):
            out[i, j] = v[i, j] + alpha * k[i, j] if active[i, j] else v[i, j]


@numba.njit(cache=True)
def _stage(w, b2, inside, active, h, W, A, k):
    """Fill ``W``, ``A`` and ``k = Abar - A`` for the potential ``w``; returns ``(ok, Abar)``."""
    worst = _inverse_hessian_kernel(w, b2, inside, h, W)
    if not worst > 0:
        return False, np.nan
    _divergence_kernel(W, active, h, A)
    abar = _active_mean(A, active)
    nx, ny = w.shape
    for i in range(nx):
        for j in range(ny):
            k[i, j] = abar - A[i, j] if active[i, j] else 0.0
    return True, abar


@numba.njit(cache=True)
def _rk4(v, dt, k1, b2, inside, active, h, out_v, W, A, k):
    """One RK4 step from ``v`` with first stage ``k1``; the candidate's W, A, k are left in place."""
    nx, ny = v.shape
    w = np.empty_like(v)
    k2 = np.zeros_like(v)
    k3 = np.zeros_like(v)
    k4 = np.zeros_like(v)
    _axpy_active(v, k1, 0.5 * dt, active, w)
    ok, _ = _stage(w, b2, inside, active, h, W, A, k2)
    if not ok:
        return False, np.nan
    _axpy_active(v, k2, 0.5 * dt, active, w)
    ok, _ = _stage(w, b2, inside, active, h, W, A, k3)
    if not ok:
        return False, np.nan
    _axpy_active(v, k3, dt, active, w)
    ok, _ = _stage(w, b2, inside, active, h, W, A, k4)
    if not ok:
        return False, np.nan
    for i in range(nx):
        for j in range(ny):
            if active[i, j]:
                out_v[i, j] = v[i, j] + dt * (k1[i, j] + 2 * k2[i, j] + 2 * k3[i, j] + k4[i, j]) / 6.0
            else:
                out_v[i, j] = v[i, j]
    return _stage(out_v, b2, inside, active, h, W, A, k)


class _Kernel:
    """Per-grid constant arrays for the numba kernels."""

    def __init__(self, field: PotentialField):
        g = field.grid
        b = g.base_jets(field.base)
        d2 = np.stack([b.d2[..., 0, 0], b.d2[..., 0, 1], b.d2[..., 1, 1]], -1)
        self.b2 = np.ascontiguousarray(np.nan_to_num(d2))
        self.inside = np.ascontiguousarray(g.inside)
        self.active = np.ascontiguousarray(g.active)
        self.h = g.h

    def abreu(self, v):
        """``(A, W, worst)``: A on active nodes (NaN elsewhere) and nodal ``u^ij`` components."""
        W = np.zeros(v.shape + (3,))
        worst = _inverse_hessian_kernel(v, self.b2, self.inside, self.h, W)
        A = np.full(v.shape, np.nan)
        if worst > 0:
            _divergence_kernel(W, self.active, self.h, A)
        return A, W, worst

    def rhs(self, v):
        """``(k, A, Abar, W)`` with ``k = Abar - A`` on active nodes and 0 elsewhere; None if not SPD."""
        W = np.zeros(v.shape + (3,))
        A = np.full(v.shape, np.nan)
        k = np.zeros(v.shape)
        ok, abar = _stage(v, self.b2, self.inside, self.active, self.h, W, A, k)
        return (k, A, abar, W) if ok else None

    def rk4(self, v, dt, k1):
        """Candidate ``(v_new, (k, A, Abar, W))`` or ``(None, None)`` if a stage is not SPD."""
        out = np.empty_like(v)
        W = np.zeros(v.shape + (3,))
        A = np.full(v.shape, np.nan)
        k = np.zeros(v.shape)
        ok, abar = _rk4(v, dt, k1, self.b2, self.inside, self.active, self.h, out, W, A, k)
        return (out, (k, A, abar, W)) if ok else (None, None)

    def energy(self, A, abar):
        return _energy(A, self.active, abar, self.h)

    def dissipation(self, A, abar, W):
        return _dissipation(np.where(self.active, A - abar, 0.0), W, self.h)


_KERNELS: dict = {}


def _kernel(field: PotentialField) -> _Kernel:
    key = (id(field.grid), field.base)
    hit = _KERNELS.get(key)
    if hit is not None and hit[0] is field.grid:
        return hit[1]
    if len(_KERNELS) > 16:
        _KERNELS.clear()
    k = _Kernel(field)
    _KERNELS[key] = (field.grid, k)  # holding the grid keeps its id unique
    return k


# ---------------------------------------------------------------------------
# public operators


def _evaluate(field: PotentialField):
    r = _kernel(field).rhs(np.ascontiguousarray(field.v))
    if r is None:
        field.check_spd(field.grid.inside)  # raises with the eigenvalue
        raise MetricDegenerate("metric degenerate")
    return r


def abreu_flow_operator(field: PotentialField):
    """Scalar curvature as used by the flow, on active nodes (NaN elsewhere).

    Divergence form ``A = -S_ij(u^ij)`` with ``u^ij`` inverted from the
    nodal Hessian ``D2u0 + S v``, where ``S`` are the centered second-difference
    stencils. It agrees with :func:`abreuflow.geometry.abreu_scalar` to O(h^2)
    and makes the discrete energy identity exact.
    """
    return _evaluate(field)[1]


def rhs(field: PotentialField):
    """``Abar - A`` on active nodes (``Abar`` the active-node mean), 0 on every other node."""
    return _evaluate(field)[0]


def calabi_energy(field: PotentialField) -> float:
    """``h^2 sum (A - Abar)^2`` over active nodes."""
    _, A, abar, _ = _evaluate(field)
    return float(_kernel(field).energy(A, abar))


def dissipation_rate(field: PotentialField) -> float:
    """``-dE/dt = 2 h^2 sum u^ik u^jl A_ij A_kl``.

    ``A_ij`` are centered second differences of ``A - Abar`` extended by zero
    off the active set, summed wherever they are nonzero.
    """
    _, A, abar, W = _evaluate(field)
    return float(_kernel(field).dissipation(A, abar, W))


def dissipation_density(field: PotentialField, A):
    """Pointwise ``u^ik u^jl A_ij A_kl`` for a given nodal field ``A`` (NaN where undefined)."""
    h = field.grid.h
    S = np.full(A.shape + (2, 2), np.nan)
    c = A[1:-1, 1:-1]
    S[1:-1, 1:-1, 0, 0] = (A[2:, 1:-1] - 2 * c + A[:-2, 1:-1]) / h**2
    S[1:-1, 1:-1, 1, 1] = (A[1:-1, 2:] - 2 * c + A[1:-1, :-2]) / h**2
    S[1:-1, 1:-1, 0, 1] = S[1:-1, 1:-1, 1, 0] = (A[2:, 2:] - A[2:, :-2] - A[:-2, 2:] + A[:-2, :-2]) / (4 * h**2)
    H = field.hessian
    out = np.full(A.shape, np.nan)
    ok = field.grid.inside & np.all(np.isfinite(S), axis=(-1, -2))
    W = np.linalg.inv(H[ok])
    M = W @ S[ok]
    out[ok] = np.einsum("nij,nji->n", M, M)
    return out


def potential_distance(f1: PotentialField, f2: PotentialField) -> float:
    """``sqrt(int_P (u1 - u2)^2)`` by the cell midpoint rule (``u0`` cancels)."""
    if not f1.grid.same_as(f2.grid) or f1.base != f2.base:
        raise IncompatibleFields("incompatible fields")
    q = area_quadrature(f1.grid)
    d = bilinear(f1.v - f2.v, q)
    return float(math.sqrt(np.sum(q.weights * d * d)))


# ---------------------------------------------------------------------------
# time stepping


@dataclass
class FlowState:
    t: float
    field: PotentialField
    dt: float
    steps: int = 0
    rejections: int = 0
    streak: int = 0
    _cache: dict = dc_field(default_factory=dict, repr=False)

    def evaluate(self):
        """``(k, A, Abar, W)`` of the current field (cached)."""
        if "rhs" not in self._cache:
            self._cache["rhs"] = _evaluate(self.field)
        return self._cache["rhs"]

    @property
    def energy(self) -> float:
        if "E" not in self._cache:
            _, A, abar, _ = self.evaluate()
            self._cache["E"] = float(_kernel(self.field).energy(A, abar))
        return self._cache["E"]

    @property
    def dissipation(self) -> float:
        if "D" not in self._cache:
            _, A, abar, W = self.evaluate()
            self._cache["D"] = float(_kernel(self.field).dissipation(A, abar, W))
        return self._cache["D"]


class Candidate(NamedTuple):
    v: np.ndarray | None
    valid: bool
    rhs: tuple | None  # (k, A, Abar, W) of the candidate, reusable as the next first stage


def step_rk4(state: FlowState, dt: float, rhs_func: Callable | None = None) -> Candidate:
    """Classical four-stage step of size ``dt``; only active nodes move.

    ``rhs_func(field) -> grid array`` replaces the Calabi right-hand side
    (manufactured-solution tests). A non-SPD stage marks the candidate invalid.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    f = state.field
    active = np.ascontiguousarray(f.grid.active)
    v = np.ascontiguousarray(f.v)
    if rhs_func is None:  # fused numba path
        try:
            first = state.evaluate()
        except MetricDegenerate:
            return Candidate(None, False, None)
        new, r = _kernel(f).rk4(v, float(dt), first[0])
        return Candidate(new, r is not None, r)
    else:
        def stage(w):
            try:
                k = np.asarray(rhs_func(f.with_v(w)), dtype=float)
            except MetricDegenerate:
                return None
            return (np.where(active, k, 0.0),)

        first = stage(v)
        if first is None:
            return Candidate(None, False, None)
    ks = [first[0]]
    w = np.empty_like(v)
    for alpha in (0.5 * dt, 0.5 * dt, dt):
        _axpy_active(v, ks[-1], alpha, active, w)
        r = stage(w)
        if r is None:
            return Candidate(None, False, None)
        ks.append(r[0])
    incr = (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3]) / 6.0
    new = np.empty_like(v)
    _axpy_active(v, incr, dt, active, new)
    return Candidate(new, True, None)


class LedgerRow(NamedTuple):
    step: int
    t: float
    dt: float
    energy: float
    dissipation: float
    accepted: bool

    def csv_fields(self):
        return [str(self.step), fmt(self.t), fmt(self.dt), fmt(self.energy), fmt(self.dissipation),
                "1" if self.accepted else "0"]


@dataclass
class EnergyLedger:
    rows: list = dc_field(default_factory=list)
    integral: float = 0.0  # trapezoid rule for the time integral of D over accepted steps
    sink: AtomicCSV | None = None

    def append(self, row: LedgerRow):
        self.rows.append(row)
        if self.sink is not None:
            self.sink.write(row.csv_fields())

    @property
    def accepted(self):
        return [r for r in self.rows if r.accepted]

    def balance_error(self) -> float:
        acc = self.accepted
        return abs(acc[0].energy - acc[-1].energy - self.integral)


def dt_limit(field: PotentialField, c_cfl: float) -> float:
    """``c_cfl h^4 / (4 w^2)``, ``w`` the largest eigenvalue of ``u^ij`` on active nodes.

    Equals ``c_cfl h^4`` for the square's Guillemin metric (``w = 1/2``).
    """
    H = field.hessian[field.grid.active]
    wmax = float(np.max(1.0 / np.linalg.eigvalsh(H)[:, 0]))
    return c_cfl * field.grid.h**4 / (4.0 * wmax * wmax)


def advance(state: FlowState, t_target: float, dt_max: float, ledger: EnergyLedger | None = None,
            energy_rtol: float = 1e-10, energy_atol: float = 1e-20, on_accept: Callable | None = None,
            max_steps: int | None = None):
    """Step until ``t_target`` with energy-monotone step control.

    A candidate is accepted iff every stage is SPD and
    ``E_new <= E_cur (1 + energy_rtol) + energy_atol``. Rejections halve ``dt``;
    five consecutive acceptances grow it by 1.25 up to ``dt_max``. Raises
    :class:`FlowStalled` carrying the last accepted state once ``dt < 1e-16``.
    """
    if not t_target > state.t:
        raise ValueError("t_target must exceed the current time")
    ledger = EnergyLedger() if ledger is None else ledger
    if not ledger.rows:
        ledger.append(LedgerRow(state.steps, state.t, 0.0, state.energy, state.dissipation, True))
    state.dt = min(state.dt, dt_max)
    n = 0
    while state.t < t_target and (max_steps is None or n < max_steps):
        remaining = t_target - state.t
        dt = min(state.dt, remaining)
        if dt < MIN_DT and remaining >= MIN_DT:
            raise FlowStalled(STALL_MESSAGE, state)
        cand = step_rk4(state, dt)
        ok = cand.valid
        if ok:
            _, A, abar, _ = cand.rhs
            e_new = float(_kernel(state.field).energy(A, abar))
            ok = e_new <= state.energy * (1 + energy_rtol) + energy_atol
        if not ok:
            state.rejections += 1
            state.streak = 0
            ledger.append(LedgerRow(state.steps, state.t, dt, state.energy, state.dissipation, False))
            state.dt = 0.5 * dt
            if state.dt < MIN_DT:
                raise FlowStalled(STALL_MESSAGE, state)
            continue
        d_old = state.dissipation
        new = FlowState(state.t + dt if dt < remaining else t_target, state.field.with_v(cand.v), state.dt,
                        state.steps + 1, state.rejections, state.streak + 1)
        new._cache["rhs"] = cand.rhs
        new._cache["E"] = e_new
        ledger.integral += 0.5 * dt * (d_old + new.dissipation)
        if new.streak >= 5:
            new.dt = min(1.25 * new.dt, dt_max)
            new.streak = 0
        state = new
        n += 1
        ledger.append(LedgerRow(state.steps, state.t, dt, state.energy, state.dissipation, True))
        if on_accept is not None:
            on_accept(state)
    return state, ledger


def ledger_csv(path) -> AtomicCSV:
    return AtomicCSV(path, [LEDGER_HEADER])
