import math

import numpy as np
import pytest

from abreuflow import build_grid, field_from_function, flow, monitor
from abreuflow.errors import EpsilonTooLarge, IncompatibleFields
from abreuflow.field import perturbation, rescale_potential
from abreuflow.polytope import inset


def test_square_record(square32):
    rec = monitor.theorem_monitors(None, square32, 0.2)
    assert rec.eig_min >= 2 - 1e-12
    assert rec.Abar == pytest.approx(8.0)
    assert rec.E < 1e-20 and rec.D < 1e-12
    assert all(math.isfinite(x) for x in rec.as_dict().values())
    assert rec.dist_eps <= 1.0 * math.sqrt(2) * math.sqrt(rec.eig_max)


def test_flat_record(flat32):
    rec = monitor.theorem_monitors(None, flat32, 0.2)
    assert rec.Qd2_max == 0.0
    assert rec.trace_int == pytest.approx(2 * inset(flat32.polygon, 0.2).area, rel=1e-12)


def test_epsilon_too_large(square32):
    with pytest.raises(EpsilonTooLarge, match="epsilon too large"):
        monitor.theorem_monitors(None, square32, 0.5)


def test_monitor_scaling(sine32):
    c = np.array([0.5, 0.5])
    r0 = monitor.theorem_monitors(None, sine32, 0.2, m_R=0.05)
    for lam in (2.0, 5.0):
        fr = rescale_potential(sine32, lam, c)
        r1 = monitor.theorem_monitors(None, fr, 0.2 * lam, m_R=0.05 * lam)
        assert r1.E == pytest.approx(r0.E, rel=1e-3)
        assert r1.M_hat == pytest.approx(r0.M_hat, rel=1e-3)
        assert r1.Qd2_max == pytest.approx(r0.Qd2_max, rel=1e-2)
        assert r1.dist_eps == pytest.approx(math.sqrt(lam) * r0.dist_eps, rel=1e-6)
        assert r1.Abar == pytest.approx(r0.Abar / lam, rel=1e-6)


def test_oscillation_identity(sine32):
    rep = monitor.hessian_oscillation_check(sine32, sine32, 0.0, 0.0)
    assert np.nanmax(rep.oscillation) == 0.0 and rep.exceed_area == 0.0 and rep.passed


def test_oscillation_incomparable(sine32, square):
    other = field_from_function(build_grid(square, 1 / 16))
    with pytest.raises(IncompatibleFields, match="incomparable states"):
        monitor.hessian_oscillation_check(sine32, other, 1.0, 1.0)


def test_oscillation_stationary(square32):
    dtm = flow.dt_limit(square32, 0.15)
    st, led = flow.advance(flow.FlowState(0.0, square32, dtm), 50 * dtm, dtm)
    rep = monitor.hessian_oscillation_check(square32, st.field, led.integral, st.t)
    assert np.nanmax(rep.oscillation) < 1e-12


def test_oscillation_perturbed(sine32):
    dtm = flow.dt_limit(sine32, 0.15)
    st, led = flow.advance(flow.FlowState(0.0, sine32, dtm), 300 * dtm, dtm)
    rep = monitor.hessian_oscillation_check(sine32, st.field, led.integral, st.t)
    assert np.nanmax(rep.oscillation) > 0
    assert rep.passed and rep.exceed_area <= rep.bound


def test_bad_line_constant(square):
    eps, R = 0.05, 0.1
    f = field_from_function(build_grid(square, 1 / 16), lambda x: 0.5 * (eps - 1) * x[..., 0] ** 2, base="flat")
    rep = monitor.bad_line_monitor(f, 0.1, R)
    assert len(rep.ratio) > 0
    # trace is 1/eps + 1 along the segment, so integral * eps = 2R (1 + eps)
    assert np.allclose(rep.ratio / 0.1 * eps, 2 * R * (1 + eps))


def test_bad_line_square_empty(square32):
    rep = monitor.bad_line_monitor(square32, 0.5, 0.05, eps0=0.2)
    assert len(rep.nodes) == 0 and math.isnan(rep.min_ratio)


def test_emit_and_read(tmp_path, sine32):
    path = tmp_path / "d.csv"
    assert monitor.emit([], path) == 0
    assert path.read_text().splitlines() == [monitor.DIAGNOSTICS_SCHEMA, ",".join(monitor.DIAGNOSTICS_COLUMNS)]
    rec = monitor.theorem_monitors(None, sine32, 0.2)
    monitor.emit([rec, rec], path)
    back = monitor.read_diagnostics(path)
    assert back == [rec, rec]


def test_emit_unwritable(tmp_path, sine32):
    with pytest.raises(OSError):
        monitor.emit([], tmp_path / "missing" / "d.csv")


def test_trace_integral_square(square64):
    # int over [eps, 1-eps]^2 of 2x(1-x) + 2y(1-y)
    eps = 0.2
    one = lambda x: x**2 - 2 * x**3 / 3
    exact = 2 * (1 - 2 * eps) * (one(1 - eps) - one(eps))
    val = monitor.trace_integral(square64, inset(square64.polygon, eps))
    assert val == pytest.approx(exact, rel=1e-3)
