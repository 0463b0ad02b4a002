import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import reference_model
from galboost import hpz, oracle, symmetry
from galboost.core import CoefficientTrace, GaussianState, SystemParams, ValidationError, empty_bath

WINDOW = (8.0, 15.0)


def test_group_element_validation():
    with pytest.raises(ValidationError):
        symmetry.GroupElement("rotation", 1.0)


def test_apply_boost_image():
    s = GaussianState.coherent(1.0, 0.5)
    img, R0, t = symmetry.apply_element(symmetry.GroupElement.boost(0.2), s, 0.0, 3.0, mass=2.0)
    assert np.allclose(img.mean, [1.0 - 0.6, 0.5 - 0.4])
    assert R0 == pytest.approx(-0.6) and t == 3.0
    assert np.array_equal(img.cov, s.cov)


def test_apply_translation_and_timeshift():
    s = GaussianState.coherent(1.0, 0.5)
    img, R0, _ = symmetry.apply_element(symmetry.GroupElement.translation(0.3), s, 1.0, 0.0)
    assert np.allclose(img.mean, [0.7, 0.5]) and R0 == pytest.approx(0.7)
    _, _, t = symmetry.apply_element(symmetry.GroupElement.timeshift(0.5), s, 0.0, 1.0)
    assert t == 1.5


@given(st.floats(-5.0, 5.0))
@settings(max_examples=15, deadline=None)
def test_translation_covariance_any_a(prop, model, grid, sys0, a):
    d = symmetry.translation_defect(model, sys0, a, grid[::20], prop=prop)
    assert d.max() < 1e-9


def test_translation_any_model():
    model = reference_model(n_modes=64, gamma=0.2, omega=0.0, R0=1.5)
    grid = 0.005 * np.arange(801)
    d = symmetry.translation_defect(model, GaussianState.squeezed(0.3, 0.1, r=0.5), 2.0, grid)
    assert d.max() < 1e-9


def test_system_only_translation_shows_slip(prop, model, grid, sys0):
    d = symmetry.translation_defect(model, sys0, 3.0, grid[::20], prop=prop, shift_bath=False)
    assert d.max() > 1e-3


def test_boost_residual_matches_prediction(prop, model, grid, sys0, trace):
    rep = symmetry.boost_defect(model, sys0, 0.1, trace, grid, prop=prop)
    plateau = hpz.markovian_summary(trace, WINDOW).gamma_f
    sel = trace.gamma_f > 0.1 * plateau
    assert np.nanmax(np.abs(rep.relative_error[sel])) < 0.01
    assert rep.covariance_defect_norm.max() < 1e-8


@given(st.floats(0.01, 1.0))
@settings(max_examples=10, deadline=None)
def test_boost_defect_linear_in_u(prop, model, grid, sys0, trace, u):
    g = grid[::50]
    a = symmetry.boost_defect(model, sys0, u, trace, g, prop=prop)
    b = symmetry.boost_defect(model, sys0, 0.05, trace, g, prop=prop)
    sel = np.abs(b.measured_defect) > 1e-6
    assert np.max(np.abs(a.measured_defect[sel] / u - b.measured_defect[sel] / 0.05)
                  / np.abs(b.measured_defect[sel] / 0.05)) < 0.01
    assert a.covariance_defect_norm.max() < 1e-8


def test_boost_defect_vanishes_without_bath(sys0):
    model = oracle.CompositeModel(SystemParams(), empty_bath(0.1))
    grid = 0.005 * np.arange(1001)
    tr = CoefficientTrace(grid, *(np.zeros(grid.size) for _ in range(4)))
    rep = symmetry.boost_defect(model, sys0, 0.1, tr, grid)
    assert np.abs(rep.measured_defect).max() < 1e-9
    assert rep.covariance_defect_norm.max() < 1e-8


def test_boost_defect_persists_in_plateau(prop, model, grid, sys0, trace):
    rep = symmetry.boost_defect(model, sys0, 0.1, trace, grid, prop=prop)
    sel = (grid >= WINDOW[0]) & (grid <= WINDOW[1])
    gf = hpz.markovian_summary(trace, WINDOW).gamma_f
    d = rep.measured_defect[sel]
    assert d.min() > 0.9 * 2 * gf * 0.1
    assert np.ptp(d) < 0.05 * d.mean()


def test_boost_defect_shrinks_with_gamma(sys0):
    grid = 0.005 * np.arange(3001)
    vals = [symmetry.plateau_boost_defect(reference_model(gamma=g), sys0, 0.1, grid, WINDOW)
            for g in (0.0125, 0.025, 0.05)]
    assert vals[0] < vals[1] < vals[2]


def test_time_shift_transient_then_plateau(prop, model, grid, sys0):
    g = grid[grid <= 10.0]
    d = symmetry.time_shift_defect(model, sys0, 0.5, g, prop=prop)
    assert d[g >= 5.0].max() < 0.01 * d.max()


def test_time_shift_zero_coupling(sys0):
    model = oracle.CompositeModel(SystemParams(), empty_bath(0.1))
    d = symmetry.time_shift_defect(model, sys0, 0.5, 0.005 * np.arange(401))
    assert d.max() < 1e-12


def test_boost_report_csv(prop, model, grid, sys0, trace):
    rep = symmetry.boost_defect(model, sys0, 0.05, trace, grid[:11], prop=prop)
    lines = [ln for ln in rep.to_csv().splitlines() if not ln.startswith("#")]
    assert lines[0].split(",") == list(symmetry.BOOST_COLUMNS)
    assert len(lines) == 12


def test_scan_table(sys0):
    grid = 0.005 * np.arange(3001)
    gammas = (0.0, 0.025, 0.05)
    models = [reference_model(gamma=g) for g in gammas]
    tab = symmetry.defect_vs_damping_scan(models, gammas, (0.05, 0.1), sys0, grid, WINDOW)
    assert all(abs(r[2] * r[1]) < 1e-9 for r in tab.rows if r[0] == 0)
    assert tab.linearity < 0.01
    assert np.isfinite(tab.exponent)
    assert tab.to_csv().count("\n") == 3 + len(tab.rows)
