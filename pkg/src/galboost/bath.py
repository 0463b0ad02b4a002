"""Bath kernels, fluctuation-dissipation checks, figure of merit and driving thresholds.

Kernel convention (natural units)::

    nu(s)  = int_0^omega_max I(w) coth(beta w / 2) cos(w s) dw
    eta(s) = int_0^omega_max I(w) sin(w s) dw

with I used as is (no extra pi or mass factors). A discrete bath has
I = sum_n m_n w_n^3 delta(w - w_n), so its kernels are exact mode sums.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import integrate
from scipy.constants import hbar as HBAR_SI, k as KB_SI

from .core import DiscreteBath, GaussianState, SpectralDensity, ValidationError

FDT_TOLERANCE = 1e-10


class QuadratureError(RuntimeError):
    def __init__(self, message: str, panel: tuple):
        super().__init__(message)
        self.panel = panel


def thermal_factor(beta: float, omega) -> np.ndarray:
    """coth(beta w / 2), equal to 1 for beta = inf."""
    w = np.asarray(omega, float)
    if math.isinf(beta):
        return np.ones_like(w)
    x = beta * w / 2
    with np.errstate(divide="ignore"):
        return np.where(x > 350, 1.0, 1.0 / np.tanh(np.minimum(x, 350)))


def _i_coth(spec: SpectralDensity, beta: float):
    """I(w) coth(beta w/2) with its finite w -> 0 limit."""
    def f(w):
        if math.isinf(beta):
            return float(spec(w))
        x = beta * w / 2
        xc = 1.0 if x == 0 else (x / math.tanh(x) if x < 350 else x)
        return float(spec.over_omega(w)) * 2.0 * xc / beta
    return f


@dataclass(frozen=True)
class KernelTable:
    s: np.ndarray
    nu: np.ndarray
    eta: np.ndarray
    nu_err: np.ndarray = field(default=None)
    eta_err: np.ndarray = field(default=None)
    beta: float = math.inf
    modes: Optional[tuple] = None  # (weights m w^3, omegas) when built from a discrete bath

    def correlation(self) -> np.ndarray:
        """Bath force correlation L(s) = (nu(s) - i eta(s)) / 2."""
        return 0.5 * (self.nu - 1j * self.eta)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# bath kernels; nu = int I coth cos, eta = int I sin (natural units)\n")
        buf.write(f"# beta = {self.beta!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("s", "nu", "eta", "nu_err", "eta_err"))
        ne = self.nu_err if self.nu_err is not None else np.zeros_like(self.s)
        ee = self.eta_err if self.eta_err is not None else np.zeros_like(self.s)
        for row in zip(self.s, self.nu, self.eta, ne, ee):
            w.writerow([f"{v:.12e}" for v in row])
        return buf.getvalue()


def _panel_quad(f, edges, s, weight, tol):
    total, err = 0.0, 0.0
    worst = (None, 0.0)
    for a, b in zip(edges[:-1], edges[1:]):
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                if s == 0:
                    if weight == "sin":
                        v, e = 0.0, 0.0
                    else:
                        v, e = integrate.quad(f, a, b, limit=200)
                else:
                    v, e = integrate.quad(f, a, b, weight=weight, wvar=s, limit=200)
            except integrate.IntegrationWarning as exc:
                raise QuadratureError(f"quadrature failed on panel [{a:g}, {b:g}] at s = {s:g}: {exc}",
                                      (a, b)) from None
        total += v
        err += e
        if e > worst[1]:
            worst = ((a, b), e)
    if err > tol * max(1.0, abs(total)):
        a, b = worst[0]
        raise QuadratureError(f"quadrature error {err:.2e} at s = {s:g}; worst panel [{a:g}, {b:g}]", worst[0])
    return total, err


def kernels(source: Union[SpectralDensity, DiscreteBath], beta: float, s_grid: Sequence[float],
            n_panels: int = 16, tol: float = 1e-9) -> KernelTable:
    """Noise and friction kernels on ``s_grid``.

    Continuum densities use adaptive quadrature on ``n_panels`` equal
    frequency panels; discrete baths use exact mode sums.
    """
    s = np.asarray(s_grid, float)
    if s.ndim != 1 or (s.size and s[0] < 0) or np.any(np.diff(s) <= 0):
        raise ValidationError("s_grid must be non-negative and increasing")
    if isinstance(source, DiscreteBath):
        wt = source.weights()
        w = source.omegas
        c = thermal_factor(beta, w) * wt
        phase = np.outer(s, w)
        return KernelTable(s, np.cos(phase) @ c, np.sin(phase) @ wt,
                           np.zeros_like(s), np.zeros_like(s), beta, (wt.copy(), w.copy()))
    if source.gamma == 0:
        z = np.zeros_like(s)
        return KernelTable(s, z, z.copy(), z.copy(), z.copy(), beta)
    edges = np.linspace(0.0, source.omega_max, n_panels + 1)
    fnu = _i_coth(source, beta)
    feta = lambda w: float(source(w))  # noqa: E731
    nu, eta, nue, etae = (np.empty_like(s) for _ in range(4))
    for i, si in enumerate(s):
        nu[i], nue[i] = _panel_quad(fnu, edges, si, "cos", tol)
        eta[i], etae[i] = _panel_quad(feta, edges, si, "sin", tol)
    return KernelTable(s, nu, eta, nue, etae, beta)


def drude_eta_slope(spec: SpectralDensity) -> float:
    """Closed-form eta'(0) = int_0^omega_max I(w) w dw for the Ohmic-Drude family."""
    if spec.family != "OhmicDrude":
        raise ValidationError("closed form only for OhmicDrude")
    wc, wm = spec.omega_c, spec.omega_max
    return 2 * spec.mass * spec.gamma / np.pi * wc**2 * (wm - wc * np.arctan(wm / wc))


def bose(beta: float, omega) -> np.ndarray:
    w = np.asarray(omega, float)
    if math.isinf(beta):
        return np.zeros_like(w)
    with np.errstate(over="ignore"):  # deep in the tail n -> 0
        return 1.0 / np.expm1(beta * w)


def fdt_check(source: Union[SpectralDensity, DiscreteBath], beta: float, omega_grid=None,
              bath_cov: Optional[np.ndarray] = None) -> float:
    """Maximum relative violation of the thermal noise/response ratio.

    Continuum: the symmetrized noise spectrum I (2 n + 1) built from the
    emission and absorption rates I (n + 1), I n is divided by the absorptive
    part I and compared to coth(beta w / 2) on ``omega_grid``.

    Discrete bath: each mode's initial variances are compared to the thermal
    values; ``bath_cov`` is the bath block of a composite covariance in
    (q1, p1, q2, p2, ...) order. If omitted, the thermal construction used by
    the oracle is checked.
    """
    if isinstance(source, DiscreteBath):
        if source.n_modes == 0:
            return 0.0
        m, w = source.masses, source.omegas
        c = thermal_factor(beta, w)
        if bath_cov is None:
            from .oracle import CompositeModel, thermal_composite_state
            from .core import SystemParams
            model = CompositeModel(SystemParams(), DiscreteBath(m, w, beta))
            st = thermal_composite_state(model, GaussianState.coherent())
            bath_cov = st.cov[2:, 2:]
        d = np.diag(np.asarray(bath_cov, float))
        qq, pp = d[0::2], d[1::2]
        vq = np.abs(2 * m * w * qq / c - 1)
        vp = np.abs(2 * pp / (m * w * c) - 1)
        return float(max(vq.max(), vp.max()))
    if omega_grid is None:
        omega_grid = np.linspace(source.omega_max / 1000, source.omega_max, 500)
    w = np.asarray(omega_grid, float)
    if np.any(w <= 0) or np.any(w > source.omega_max):
        raise ValidationError("omega_grid must lie in the bath support (0, omega_max]")
    absorb = np.asarray(source(w), float)
    n = bose(beta, w)
    emission, absorption = absorb * (n + 1), absorb * n
    ratio = (emission + absorption) / (emission - absorption)
    target = thermal_factor(beta, w)
    return float(np.max(np.abs(ratio - target) / target))


def fom(gamma_hz: float, temperature_k: float) -> float:
    """hbar gamma / (k_B T) in SI; values above 1 are outside the leading-order regime."""
    if gamma_hz < 0 or not temperature_k > 0:
        raise ValidationError("need gamma >= 0 and T > 0")
    return HBAR_SI * gamma_hz / (KB_SI * temperature_k)


@dataclass(frozen=True)
class PlatformEntry:
    name: str
    T: float
    gamma: float
    T_range: tuple = None
    gamma_range: tuple = None

    def __post_init__(self):
        if not self.T > 0 or self.gamma < 0:
            raise ValidationError(f"{self.name}: need T > 0 and gamma >= 0")
        for rng in (self.T_range, self.gamma_range):
            if rng is not None and not (0 <= rng[0] <= rng[1]):
                raise ValidationError(f"{self.name}: bad range {rng}")

    @property
    def fom(self) -> float:
        return fom(self.gamma, self.T)

    def bounds(self) -> tuple:
        g_lo, g_hi = self.gamma_range or (self.gamma, self.gamma)
        t_lo, t_hi = self.T_range or (self.T, self.T)
        return fom(g_lo, t_hi), fom(g_hi, t_lo)


DEFAULT_PLATFORMS = (
    PlatformEntry("levitated_nanoparticle_room_temperature", 300.0, 1e3),
    PlatformEntry("cold_atoms_dissipative_lattice", 1e-6, 1e4),
)


@dataclass(frozen=True)
class PlatformRow:
    name: str
    T: float
    gamma: float
    fom_low: float
    fom_mid: float
    fom_high: float
    capped: bool


def platform_table(entries: Sequence[PlatformEntry], out_dir: Union[str, Path, None] = None) -> list:
    """Figure-of-merit rows; bars above 1 are capped and flagged.

    When ``out_dir`` is given, writes ``fom_table.csv`` and ``fom_plot.dat``
    (whitespace separated: name fom_low fom_mid fom_high capped_flag; one
    row per platform, row order is the categorical y axis).
    """
    rows = []
    for e in entries:
        lo, hi = e.bounds()
        mid = e.fom
        capped = max(lo, mid, hi) > 1.0
        rows.append(PlatformRow(e.name, e.T, e.gamma, min(lo, 1.0), min(mid, 1.0), min(hi, 1.0), capped))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "fom_table.csv").write_text(_table_csv(rows))
        (out / "fom_plot.dat").write_text(_plot_dat(rows))
    return rows


def _table_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("# hbar*gamma/(k_B*T), SI inputs (T in K, gamma in Hz); values capped at 1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name", "T_K", "gamma_Hz", "fom_low", "fom_mid", "fom_high", "capped_flag"))
    for r in rows:
        w.writerow([r.name, f"{r.T:.6e}", f"{r.gamma:.6e}", f"{r.fom_low:.6e}", f"{r.fom_mid:.6e}",
                    f"{r.fom_high:.6e}", int(r.capped)])
    return buf.getvalue()


def _plot_dat(rows) -> str:
    lines = ["# name fom_low fom_mid fom_high capped_flag  (x on log scale, y categorical by row)"]
    for r in rows:
        lines.append(f"{r.name} {r.fom_low:.6e} {r.fom_mid:.6e} {r.fom_high:.6e} {int(r.capped)}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Thresholds:
    mu_boost: float
    mu_entanglement: float
    ratio: float


def driving_thresholds(gamma_hz: float, temperature_k: float, omega_hz: float) -> Thresholds:
    """Squeezing-rate thresholds (SI, rates in s^-1) and their ratio."""
    if not (gamma_hz > 0 and temperature_k > 0 and omega_hz > 0):
        raise ValidationError("inputs must be positive")
    kT = KB_SI * temperature_k
    mu_boost = HBAR_SI * gamma_hz**2 / kT
    mu_ent = gamma_hz * kT / (HBAR_SI * omega_hz)
    ratio = mu_ent / mu_boost
    expected = kT**2 / (HBAR_SI**2 * omega_hz * gamma_hz)
    if abs(ratio - expected) > 1e-12 * expected:
        raise ArithmeticError("threshold ratio identity violated")
    return Thresholds(mu_boost, mu_ent, ratio)
