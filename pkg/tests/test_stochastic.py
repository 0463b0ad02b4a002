import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import KT, reference_model
from galboost import bath, stochastic
from galboost.core import GaussianState, SpectralDensity, ValidationError

SHORT = stochastic.GridSpec(-12, 12, 256, 0.01, 0.5)
RUN_KW = dict(lam=0.7, static="noise")


@pytest.fixture(scope="module")
def disc():
    return reference_model().bath


@pytest.fixture(scope="module")
def kern_short(disc):
    return bath.kernels(disc, 1.0 / KT, SHORT.times)


def test_grid_validation():
    with pytest.raises(ValidationError):
        stochastic.GridSpec(n_points=300)
    with pytest.raises(ValidationError):
        stochastic.GridSpec(dt=0.003, t_max=1.0)
    g = stochastic.GridSpec(-4, 4, 64, 0.1, 1.0)
    assert g.n_steps == 10 and g.x.size == 64 and g.dx == pytest.approx(0.125)


def test_wavefunction_moments():
    g = stochastic.GridSpec(-12, 12, 512, 0.01, 0.1)
    s = GaussianState.squeezed(0.7, -0.4, r=0.3)
    psi = stochastic.wavefunction(s, g)
    rho = np.abs(psi) ** 2 * g.dx
    assert rho.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.sum(rho * g.x) == pytest.approx(0.7, abs=1e-10)
    assert np.sum(rho * (g.x - 0.7) ** 2) == pytest.approx(s.cov[0, 0], rel=1e-8)
    with pytest.raises(ValidationError):
        stochastic.wavefunction(GaussianState.thermal(beta=0.5), g)


def _reference_split_operator(psi, pot, g, mass, n):
    k = 2 * np.pi * np.fft.fftfreq(g.n_points, g.dx)
    half = np.exp(-1j * k**2 * g.dt / (4 * mass))
    for i in range(n):
        v = pot.value(g.x, (i + 0.5) * g.dt)
        psi = np.fft.ifft(half * np.fft.fft(psi))
        psi = np.exp(-1j * g.dt * v) * psi
        psi = np.fft.ifft(half * np.fft.fft(psi))
    return psi


def test_zero_noise_is_deterministic_split_operator():
    g = stochastic.GridSpec(-10, 10, 256, 0.01, 1.0, mask_width=0.0)
    pot = stochastic.Potential(1.0, 0.3, velocity=0.2)
    psi0 = stochastic.wavefunction(GaussianState.coherent(0.5, 0.2), g)
    kern = bath.kernels(SpectralDensity("OhmicDrude", 0.0), 0.1, g.times)
    noise = stochastic.generate_noise(kern, g, seed=3)
    out = stochastic.propagate_pair(pot, stochastic.TrajectoryPair(psi0, psi0.copy()), noise, g)
    ref = _reference_split_operator(psi0, pot, g, 1.0, g.n_steps)
    assert np.max(np.abs(out.psi1 - ref)) < 1e-12
    assert np.max(np.abs(out.psi2 - ref)) < 1e-12
    assert abs(out.weight - 1.0) < 1e-12


def test_harmonic_coherent_state_returns_after_period():
    g = stochastic.GridSpec(-10, 10, 256, 2 * np.pi / 2000, 2 * np.pi, mask_width=0.0)
    psi0 = stochastic.wavefunction(GaussianState.coherent(1.0, 0.0), g)
    psi = _reference_split_operator(psi0, stochastic.Potential.harmonic(), g, 1.0, g.n_steps)
    ov = abs(np.sum(np.conj(psi0) * psi) * g.dx)
    assert ov == pytest.approx(1.0, abs=1e-5)


def test_noise_keyed_by_trajectory_index(kern_short):
    whole = stochastic.generate_noise(kern_short, SHORT, seed=5, n_traj=6, **RUN_KW)
    part = stochastic.generate_noise(kern_short, SHORT, seed=5, n_traj=2, first_index=3, **RUN_KW)
    assert np.array_equal(whole.xi[3:5], part.xi)
    assert np.array_equal(whole.nu[3:5], part.nu)


def test_noise_static_placement(kern_short):
    d = stochastic.design_noise(kern_short, SHORT, 0.7, static="noise")
    assert abs(np.sum(d.filt)) < 1e-12 and d.counterterm == 0.0
    h = stochastic.design_noise(kern_short, SHORT, 0.7, static="hamiltonian", renormalization=3.0)
    assert h.filt[0] == 0 and h.counterterm == 3.0
    with pytest.raises(ValidationError):
        stochastic.design_noise(kern_short, SHORT, 0.7, static="elsewhere")


def _lagged(a, b, t0, lags):
    return a[:, t0:t0 + lags] * b[:, t0:t0 + 1]


def test_xi_correlator_discrete_bath(disc):
    g = stochastic.GridSpec(-12, 12, 256, 0.01, 1.0)
    kern = bath.kernels(disc, 1.0 / KT, g.times)
    M = 4096
    noise = stochastic.generate_noise(kern, g, seed=1, n_traj=M, lam=0.7, renormalization=disc.renormalization())
    target = 0.5 * kern.nu[:30]
    emp = _lagged(noise.xi, noise.xi, 40, 30).mean(axis=0)
    assert np.max(np.abs(emp - target)) < 5 / np.sqrt(M) * np.max(np.abs(target))


def test_xi_correlator_continuum_circulant():
    g = stochastic.GridSpec(-12, 12, 256, 0.05, 2.0)
    spec = SpectralDensity("OhmicDrude", 0.05, 10.0, 1.0, 80.0)
    kern = bath.kernels(spec, 1.0 / KT, g.dt * np.arange(4 * g.n_steps + 1))
    M = 4096
    noise = stochastic.generate_noise(kern, g, seed=2, n_traj=M, lam=0.7)
    target = 0.5 * kern.nu[:10]
    emp = _lagged(noise.xi, noise.xi, 20, 10).mean(axis=0)
    assert np.max(np.abs(emp - target)) < 5 / np.sqrt(M) * np.max(np.abs(target))


@pytest.mark.parametrize("static", ["hamiltonian", "noise"])
def test_all_noise_correlators_z_scores(disc, static):
    g = stochastic.GridSpec(-12, 12, 256, 0.01, 1.0)
    kern = bath.kernels(disc, 1.0 / KT, g.times)
    M = 4096
    noise = stochastic.generate_noise(kern, g, seed=1, n_traj=M, lam=0.7, static=static,
                                      renormalization=disc.renormalization())
    design = stochastic.design_noise(kern, g, 0.7, static=static)
    # targets: Re L for xi xi, the causal filter c_k for xi(t + k) nu(t), zero for nu nu
    checks = [(_lagged(noise.xi, noise.xi, 40, 30), 0.5 * kern.nu[:30] + 0j),
              (_lagged(noise.xi, noise.nu, 40, 30), design.filt[:30]),
              (_lagged(noise.nu, noise.nu, 40, 30), np.zeros(30, complex))]
    for prod, target in checks:
        m = prod.mean(axis=0)
        for part in (np.real, np.imag):
            se = part(prod).std(axis=0) / np.sqrt(M)
            ok = se > 0
            assert np.all(np.abs(part(m) - part(target))[ok] < 5 * se[ok])


def test_zero_kernels_give_zero_noise():
    kern = bath.kernels(SpectralDensity("OhmicDrude", 0.0), 0.1, SHORT.times)
    noise = stochastic.generate_noise(kern, SHORT, seed=0, n_traj=3)
    assert not np.any(noise.xi) and not np.any(noise.nu)


def test_circulant_embedding_rejects_nonpositive():
    g = stochastic.GridSpec(-12, 12, 64, 0.1, 1.0)
    s = g.times
    bad = bath.KernelTable(s, np.linspace(1.0, 3.0, s.size), np.zeros(s.size), np.zeros(s.size),
                           np.zeros(s.size), 1.0)
    with pytest.raises(ValidationError, match="circulant embedding not positive"):
        stochastic.design_noise(bad, g, 0.7)


def test_noise_table_must_match_grid(kern_short):
    with pytest.raises(ValidationError):
        stochastic.design_noise(kern_short, stochastic.GridSpec(-12, 12, 256, 0.02, 1.0), 0.7)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=40))
def test_jackknife_of_mean_is_standard_error(xs):
    x = np.array(xs)
    blocks = [(np.array([v]), np.array([1.0])) for v in x]
    est, se = stochastic.jackknife(blocks, lambda s, n: s / n)
    assert est[0] == pytest.approx(x.mean(), abs=1e-9)
    assert se[0] == pytest.approx(x.std(ddof=1) / np.sqrt(x.size), rel=1e-7, abs=1e-12)


def test_determinism_across_threads_and_runs(disc, kern_short):
    st0 = GaussianState.coherent(1.0, 0.0)
    pot = stochastic.Potential.harmonic()
    runs = [stochastic.run_ensemble(pot, st0, kern_short, SHORT, 60, 11, batch_size=20, threads=t, **RUN_KW)
            for t in (1, 3, 1)]
    for r in runs[1:]:
        for a, b in zip(runs[0].blocks, r.blocks):
            assert np.array_equal(a.samples, b.samples) and np.array_equal(a.steps, b.steps)
    other = stochastic.run_ensemble(pot, st0, kern_short, SHORT, 60, 12, batch_size=20, **RUN_KW)
    assert not np.array_equal(other.blocks[0].samples, runs[0].blocks[0].samples)


def test_divergent_trajectories_dropped(monkeypatch, kern_short):
    monkeypatch.setattr(stochastic, "DIVERGENCE_THRESHOLD", 1.0 + 1e-9)
    g = stochastic.GridSpec(-12, 12, 256, 0.01, 0.1)
    kern = bath.kernels(reference_model().bath, 1.0 / KT, g.times)
    run = stochastic.run_ensemble(stochastic.Potential.harmonic(), GaussianState.coherent(), kern, g, 100, 0,
                                  batch_size=50, lam=5.0, static="noise")
    assert run.divergent_fraction > 0.05
    em = stochastic.ensemble_reduce(run)
    assert not em.reliable


def test_ensemble_reduce_requires_enough_trajectories(kern_short):
    run = stochastic.run_ensemble(stochastic.Potential.harmonic(), GaussianState.coherent(), kern_short, SHORT,
                                  10, 0, **RUN_KW)
    with pytest.raises(ValidationError):
        stochastic.ensemble_reduce(run)


def test_jackknife_error_scaling(kern_short):
    st0 = GaussianState.coherent(1.0, 0.0)
    run = stochastic.run_ensemble(stochastic.Potential.harmonic(), st0, kern_short, SHORT, 10000, 4,
                                  batch_size=10, **RUN_KW)
    errs = []
    for m in (100, 1000, 10000):
        sub = dataclasses.replace(run, blocks=run.blocks[: m // 10], n_traj=m)
        errs.append(stochastic.ensemble_reduce(sub).stderr[-1, 1])
    slope = np.polyfit(np.log10([100, 1000, 10000]), np.log10(errs), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.1)


def test_small_harmonic_gate(disc):
    g = stochastic.GridSpec(-12, 12, 256, 0.01, 1.0)
    kern = bath.kernels(disc, 1.0 / KT, g.times)
    st0 = GaussianState.coherent(1.0, 0.0)
    steps = np.arange(5, 101, 5)
    run = stochastic.run_ensemble(stochastic.Potential.harmonic(), st0, kern, g, 400, 0, sample_steps=steps,
                                  renormalization=disc.renormalization(), **RUN_KW)
    em = stochastic.ensemble_reduce(run)
    from galboost import hpz, oracle
    prop = oracle.propagate_rows(reference_model(), 0.0, g.dt, g.n_steps + 1)
    ref = hpz.moments_from_gaussian(prop.mean(st0.mean), prop.cov(st0.cov))[steps]
    z = np.abs(em.moments[:, :2] - ref[:, :2]) / em.stderr[:, :2]
    assert z.max() <= 3.0
    assert em.divergent_fraction == 0.0
    assert np.all(np.abs(em.trace - 1.0) <= 3 * em.trace_err)
    assert run.leakage < 1e-6
    assert em.to_csv().startswith("# stochastic-unraveling")


def test_drift_estimate_linear():
    t = np.linspace(0, 2, 201)
    assert stochastic.drift_estimate(t, 0.3 * t + 1.0, (0.5, 2.0)) == pytest.approx(0.3)


def test_oracle_probe_defect_matches_residual():
    model = reference_model()
    g = stochastic.GridSpec(-12, 12, 256, 0.01, 1.5)
    d = stochastic.oracle_probe_defect(model, GaussianState.coherent(1.0, 0.0), 0.5, g, (0.5, 1.5))
    assert d == pytest.approx(2 * 0.02487 * 0.5, rel=0.05)


def test_probe_table_and_control(disc):
    g = stochastic.GridSpec(-12, 12, 256, 0.01, 0.3)
    kern = bath.kernels(disc, 1.0 / KT, g.times)
    tab = stochastic.anharmonic_boost_probe(stochastic.Potential(1.0, 1.0), GaussianState.coherent(1.0, 0.0),
                                            kern, g, (0.5, 1.0), 40, 0, (0.1, 0.3), batch_size=10,
                                            renormalization=disc.renormalization(), **RUN_KW)
    ctrl = tab.control()
    assert abs(ctrl.defect) < 1e-10 and ctrl.numerical_error < 1e-10
    assert len(tab.bath_rows()) == 2 and np.isfinite(tab.ratio)
    lines = [ln for ln in tab.to_csv().splitlines() if not ln.startswith("#")]
    assert lines[0] == "label,u,defect,stderr,numerical_error,divergent_fraction"


def test_zero_noise_quartic_second_order():
    st0 = GaussianState.coherent(1.0, 0.0)
    pot = stochastic.Potential(0.0, 1.0)
    kern0 = lambda g: bath.kernels(SpectralDensity("OhmicDrude", 0.0), 0.1, g.times)  # noqa: E731
    finals = []
    for dt in (0.02, 0.01, 0.005):
        g = stochastic.GridSpec(-10, 10, 256, dt, 2.0, mask_width=0.0)
        psi0 = stochastic.wavefunction(st0, g)
        out = stochastic.propagate_pair(pot, stochastic.TrajectoryPair(psi0, psi0.copy()),
                                        stochastic.generate_noise(kern0(g), g, 0), g)
        finals.append(out.psi1)
    order = np.log2(np.max(np.abs(finals[0] - finals[1])) / np.max(np.abs(finals[1] - finals[2])))
    assert order == pytest.approx(2.0, abs=0.1)


def test_zero_coupling_ensemble_has_no_spread():
    g = stochastic.GridSpec(-12, 12, 256, 0.01, 0.5)
    kern = bath.kernels(SpectralDensity("OhmicDrude", 0.0), 0.1, g.times)
    run = stochastic.run_ensemble(stochastic.Potential.harmonic(), GaussianState.coherent(1.0, 0.0), kern, g,
                                  100, 0, batch_size=10)
    em = stochastic.ensemble_reduce(run)
    assert np.max(em.stderr) < 1e-12


def test_harmonic_probe_matches_residual(disc):
    g = stochastic.GridSpec(-12, 12, 256, 0.01, 1.5)
    kern = bath.kernels(disc, 1.0 / KT, g.times)
    st0 = GaussianState.coherent(1.0, 0.0)
    tab = stochastic.anharmonic_boost_probe(stochastic.Potential.harmonic(), st0, kern, g, (0.5,), 2000, 0,
                                            (0.5, 1.5), control=False, renormalization=disc.renormalization(),
                                            **RUN_KW)
    row = tab.bath_rows()[0]
    exact = stochastic.oracle_probe_defect(reference_model(), st0, 0.5, g, (0.5, 1.5))
    assert abs(row.defect - exact) <= 2 * row.stderr
