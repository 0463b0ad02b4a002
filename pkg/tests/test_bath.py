import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import constants

from conftest import KT, reference_model
from galboost import bath, oracle
from galboost.core import GaussianState, SpectralDensity, ValidationError, discretize

SPEC = SpectralDensity("OhmicDrude", 0.05, 10.0, 1.0, 80.0)
S = np.linspace(0.0, 2.0, 41)


@pytest.fixture(scope="module")
def continuum():
    return bath.kernels(SPEC, 1.0 / KT, S)


def test_kernel_limits(continuum):
    assert continuum.eta[0] == 0.0
    h = 1e-5
    k = bath.kernels(SPEC, 1.0 / KT, [0.0, h])
    assert k.eta[1] / h == pytest.approx(bath.drude_eta_slope(SPEC), rel=1e-6)
    assert np.all(continuum.nu_err < 1e-9 * np.maximum(1.0, np.abs(continuum.nu)))


def test_discrete_kernels_converge(continuum):
    errs = []
    for n in (64, 128, 256, 512):
        k = bath.kernels(discretize(SPEC, n, 1.0 / KT), 1.0 / KT, S)
        errs.append(max(np.max(np.abs(k.nu - continuum.nu)), np.max(np.abs(k.eta - continuum.eta))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.0)


def test_quadrature_failure_names_panel():
    with pytest.raises(bath.QuadratureError) as info:
        bath.kernels(SPEC, 1.0 / KT, [0.0, 5.0], tol=1e-16)
    a, b = info.value.panel
    assert 0.0 <= a < b <= 80.0
    assert "panel" in str(info.value)


def test_kernel_grid_validation():
    with pytest.raises(ValidationError):
        bath.kernels(SPEC, 1.0, [0.5, 0.2])


def test_correlation_and_csv(continuum):
    L = continuum.correlation()
    assert np.allclose(L.real, continuum.nu / 2) and np.allclose(L.imag, -continuum.eta / 2)
    lines = [ln for ln in continuum.to_csv().splitlines() if not ln.startswith("#")]
    assert lines[0] == "s,nu,eta,nu_err,eta_err" and len(lines) == S.size + 1


def test_thermal_factor_zero_temperature():
    assert np.allclose(bath.thermal_factor(math.inf, [0.5, 3.0]), 1.0)
    assert np.allclose(bath.bose(math.inf, [0.5, 3.0]), 0.0)


@pytest.mark.parametrize("n_modes,gamma,kT", [(256, 0.05, 10.0), (1024, 0.05, 10.0), (256, 0.0125, 10.0),
                                              (256, 0.1, 10.0), (64, 0.05, 0.5), (32, 0.05, 10.0)])
def test_fdt_every_suite_bath(n_modes, gamma, kT):
    b = discretize(SpectralDensity("OhmicDrude", gamma, 10.0, 1.0, 80.0), n_modes, 1.0 / kT)
    assert bath.fdt_check(b, 1.0 / kT) < bath.FDT_TOLERANCE
    assert bath.fdt_check(b.source, 1.0 / kT) < bath.FDT_TOLERANCE


@given(st.floats(0.01, 100.0))
@settings(max_examples=25, deadline=None)
def test_fdt_continuum_any_temperature(kT):
    assert bath.fdt_check(SPEC, 1.0 / kT) < bath.FDT_TOLERANCE


def test_fdt_flags_injected_fault():
    model = reference_model(n_modes=64)
    cov = np.array(oracle.thermal_composite_state(model, GaussianState.coherent()).cov[2:, 2:])
    cov[1::2, 1::2] *= 1.1
    v = bath.fdt_check(model.bath, model.bath.beta, bath_cov=cov)
    assert v == pytest.approx(0.1, rel=1e-9)
    assert v > bath.FDT_TOLERANCE


def test_fdt_wrong_temperature_detected():
    cov = np.array(oracle.thermal_composite_state(reference_model(n_modes=64), GaussianState.coherent()).cov[2:, 2:])
    assert bath.fdt_check(discretize(SPEC, 64, 0.2), 0.2, bath_cov=cov) > 1e-3


def test_fom_anchors():
    f1 = bath.fom(1e3, 300.0)
    f2 = bath.fom(1e4, 1e-6)
    assert 1e-11 <= f1 <= 1e-10
    assert 0.03 <= f2 <= 0.3
    assert f1 == pytest.approx(constants.hbar * 1e3 / (constants.k * 300.0), rel=1e-15)


@given(st.floats(1e-3, 1e9), st.floats(1e-9, 1e4), st.floats(0.1, 10.0))
def test_fom_linear_in_gamma_inverse_in_T(g, T, c):
    assert bath.fom(c * g, T) == pytest.approx(c * bath.fom(g, T), rel=1e-12)
    assert bath.fom(g, c * T) == pytest.approx(bath.fom(g, T) / c, rel=1e-12)


def test_fom_validation():
    with pytest.raises(ValidationError):
        bath.fom(1.0, 0.0)


def test_platform_table_caps_and_writes(tmp_path):
    entries = list(bath.DEFAULT_PLATFORMS) + [bath.PlatformEntry("hot_damped", 1e-9, 1e9, gamma_range=(1e8, 1e10))]
    rows = bath.platform_table(entries, tmp_path)
    assert [r.capped for r in rows] == [False, False, True]
    assert rows[-1].fom_high == 1.0
    assert all(r.fom_low <= r.fom_mid <= r.fom_high for r in rows)
    dat = (tmp_path / "fom_plot.dat").read_text().splitlines()
    assert len(dat) == 4 and dat[-1].split()[-1] == "1"
    assert (tmp_path / "fom_table.csv").read_text().count("\n") == 5


def test_thresholds_ratio_identity_random_draws():
    rng = np.random.default_rng(20261014)
    for _ in range(100):
        g, T, w = 10 ** rng.uniform(0, 6), 10 ** rng.uniform(-7, 3), 10 ** rng.uniform(2, 9)
        th = bath.driving_thresholds(g, T, w)
        kT = constants.k * T
        expected = kT**2 / (constants.hbar**2 * w * g)
        assert abs(th.mu_entanglement / th.mu_boost - expected) <= 1e-12 * expected


def test_threshold_values():
    th = bath.driving_thresholds(1e4, 1e-6, 1e5)
    assert th.mu_boost == pytest.approx(constants.hbar * 1e8 / (constants.k * 1e-6), rel=1e-12)
    with pytest.raises(ValidationError):
        bath.driving_thresholds(0.0, 1.0, 1.0)
