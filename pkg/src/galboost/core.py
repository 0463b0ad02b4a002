"""Shared value types and canonical-coordinate bookkeeping.

All quantities are in natural units (hbar = k_B = 1) with the system mass
and trap frequency as scales. SI values only appear through `UnitSystem`.
Phase-space vectors are interleaved as (q_0, p_0, q_1, p_1, ...).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import constants, integrate

HBAR = constants.hbar
K_B = constants.k


class ValidationError(ValueError):
    """Raised when a value object is constructed with inconsistent data."""


@dataclass(frozen=True)
class UnitSystem:
    """Natural units anchored to a reference angular frequency and mass.

    Time is measured in 1/omega_ref, energy in hbar*omega_ref, temperature in
    hbar*omega_ref/k_B, mass in mass_ref and length in
    sqrt(hbar/(mass_ref*omega_ref)).
    """

    omega_ref: float  # rad/s
    mass_ref: float = 1.0  # kg

    def __post_init__(self):
        if self.omega_ref <= 0 or self.mass_ref <= 0:
            raise ValidationError("reference scales must be positive")

    @property
    def length_ref(self) -> float:
        return float(np.sqrt(HBAR / (self.mass_ref * self.omega_ref)))

    def rate_to_natural(self, rate_si):
        return np.asarray(rate_si) / self.omega_ref

    def rate_to_si(self, rate):
        return np.asarray(rate) * self.omega_ref

    def time_to_natural(self, t_si):
        return np.asarray(t_si) * self.omega_ref

    def time_to_si(self, t):
        return np.asarray(t) / self.omega_ref

    def temperature_to_natural(self, T_si):
        return np.asarray(T_si) * K_B / (HBAR * self.omega_ref)

    def temperature_to_si(self, kT):
        return np.asarray(kT) * HBAR * self.omega_ref / K_B

    def mass_to_natural(self, m_si):
        return np.asarray(m_si) / self.mass_ref

    def mass_to_si(self, m):
        return np.asarray(m) * self.mass_ref

    def length_to_natural(self, x_si):
        return np.asarray(x_si) / self.length_ref

    def length_to_si(self, x):
        return np.asarray(x) * self.length_ref


@dataclass(frozen=True)
class SystemParams:
    mass: float = 1.0
    omega: float = 1.0
    R0: float = 0.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ValidationError(f"system mass must be positive, got {self.mass}")
        if not self.omega >= 0:
            raise ValidationError(f"trap frequency must be >= 0, got {self.omega}")


@dataclass(frozen=True)
class SpectralDensity:
    """Continuum spectral density I(omega), weight m*omega^3 per mode.

    ``OhmicDrude``: I(w) = (2 M gamma / pi) w wc^2 / (w^2 + wc^2) on
    (0, omega_max]. ``Tabulated``: linear interpolation of (omega_k, I_k).
    The support is always truncated at omega_max so every kernel integral
    stays finite.
    """

    family: str = "OhmicDrude"
    gamma: float = 0.05
    omega_c: float = 10.0
    mass: float = 1.0
    omega_max: Optional[float] = None
    table_omega: Optional[tuple] = None
    table_values: Optional[tuple] = None

    def __post_init__(self):
        if self.family not in ("OhmicDrude", "Tabulated"):
            raise ValidationError(f"unknown spectral family {self.family!r}")
        if self.gamma < 0:
            raise ValidationError("gamma must be >= 0")
        if self.family == "OhmicDrude":
            if self.omega_c <= 0:
                raise ValidationError("omega_c must be positive")
            if self.omega_max is None:
                object.__setattr__(self, "omega_max", 8.0 * self.omega_c)
        else:
            if self.table_omega is None or self.table_values is None:
                raise ValidationError("Tabulated spectral density needs a table")
            w = np.asarray(self.table_omega, float)
            v = np.asarray(self.table_values, float)
            if w.shape != v.shape or w.ndim != 1 or np.any(np.diff(w) <= 0):
                raise ValidationError("table must be 1D, matching, increasing")
            if np.any(v < 0):
                raise ValidationError("spectral density must be non-negative")
            if self.omega_max is None:
                object.__setattr__(self, "omega_max", float(w[-1]))

    def __call__(self, omega):
        w = np.asarray(omega, dtype=float)
        if self.family == "OhmicDrude":
            pref = 2.0 * self.mass * self.gamma / np.pi
            val = pref * w * self.omega_c**2 / (w**2 + self.omega_c**2)
        else:
            val = np.interp(w, self.table_omega, self.table_values, left=0.0, right=0.0)
            val = np.where(w <= 0, 0.0, val)
        return np.where((w > 0) & (w <= self.omega_max), val, 0.0)

    def over_omega(self, omega):
        """I(w)/w with the w -> 0 limit filled in."""
        w = np.asarray(omega, dtype=float)
        if self.family == "OhmicDrude":
            pref = 2.0 * self.mass * self.gamma / np.pi
            val = pref * self.omega_c**2 / (w**2 + self.omega_c**2)
            return np.where((w >= 0) & (w <= self.omega_max), val, 0.0)
        safe = np.where(w > 0, w, 1.0)
        return np.where(w > 0, self(w) / safe, 0.0)

    def renormalization(self) -> float:
        """Integral of I(w)/w over the support (the static dressing)."""
        if self.family == "OhmicDrude":
            pref = 2.0 * self.mass * self.gamma / np.pi
            return float(pref * self.omega_c * np.arctan(self.omega_max / self.omega_c))
        val, _ = integrate.quad(lambda w: float(self.over_omega(w)), 0.0, self.omega_max, limit=400)
        return float(val)


@dataclass(frozen=True)
class DiscreteBath:
    masses: np.ndarray
    omegas: np.ndarray
    beta: float
    source: Optional[SpectralDensity] = None

    def __post_init__(self):
        m = np.asarray(self.masses, float)
        w = np.asarray(self.omegas, float)
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "omegas", w)
        if m.shape != w.shape or m.ndim != 1:
            raise ValidationError("masses and omegas must be matching 1D arrays")
        if np.any(m <= 0) or np.any(w <= 0):
            raise ValidationError("mode masses and frequencies must be positive")
        if np.any(np.diff(w) <= 0):
            raise ValidationError("mode frequencies must be strictly increasing")
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")

    @property
    def n_modes(self) -> int:
        return len(self.masses)

    @property
    def spacing(self) -> float:
        if self.n_modes < 2:
            return float(self.omegas[0]) if self.n_modes else np.inf
        return float(np.min(np.diff(self.omegas)))

    @property
    def recurrence_time(self) -> float:
        if self.n_modes == 0:
            return np.inf
        return 2.0 * np.pi / self.spacing

    def renormalization(self) -> float:
        return float(np.sum(self.masses * self.omegas**2))

    def weights(self) -> np.ndarray:
        """Per-mode spectral weight m_n w_n^3."""
        return self.masses * self.omegas**3

    def check_horizon(self, t_max: float) -> None:
        if t_max >= self.recurrence_time:
            raise ValidationError(
                f"horizon {t_max:g} reaches the bath recurrence time {self.recurrence_time:g}; "
                "use more modes"
            )


def empty_bath(beta: float = 1.0) -> DiscreteBath:
    return DiscreteBath(np.zeros(0), np.zeros(0), beta)


def discretize(spec: SpectralDensity, n_modes: int, beta: float) -> DiscreteBath:
    """Equal-spaced midpoint discretization of ``spec`` on (0, omega_max].

    Each mode carries the integral of I over its bin: m_n w_n^3 = int_bin I.
    """
    if n_modes < 1:
        raise ValidationError("need at least one mode")
    if spec.gamma == 0:
        return empty_bath(beta)
    edges = np.linspace(0.0, spec.omega_max, n_modes + 1)
    omegas = 0.5 * (edges[1:] + edges[:-1])
    if spec.family == "OhmicDrude":
        pref = 2.0 * spec.mass * spec.gamma / np.pi
        wc = spec.omega_c
        # closed-form bin integral of w wc^2/(w^2+wc^2)
        prim = 0.5 * wc**2 * np.log(edges**2 + wc**2)
        bin_int = pref * np.diff(prim)
    else:
        bin_int = np.array(
            [integrate.quad(lambda w: float(spec(w)), a, b)[0] for a, b in zip(edges[:-1], edges[1:])]
        )
    masses = bin_int / omegas**3
    keep = masses > 0
    return DiscreteBath(masses[keep], omegas[keep], beta, source=spec)


def symplectic_form(dim: int) -> np.ndarray:
    """Block-diagonal [[0, 1], [-1, 0]] form for interleaved (q, p) ordering."""
    if dim < 1:
        raise ValidationError("dim must be >= 1")
    return np.kron(np.eye(dim), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def symplectic_eigenvalues(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, float)
    omega = symplectic_form(cov.shape[0] // 2)
    ev = np.linalg.eigvals(1j * omega @ cov)
    return np.sort(np.abs(ev.real))[::2]


@dataclass(frozen=True)
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.cov, dtype=float)
        if mean.ndim != 1 or mean.size % 2:
            raise ValidationError("mean must be a 1D vector of even length")
        if cov.shape != (mean.size, mean.size):
            raise ValidationError("cov shape does not match mean")
        scale = max(np.max(np.abs(cov)), 1e-300)
        if np.max(np.abs(cov - cov.T)) > 1e-10 * scale:
            raise ValidationError("covariance matrix is not symmetric")
        cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size // 2

    def is_physical(self, tol: float = 1e-9) -> bool:
        return bool(np.all(symplectic_eigenvalues(self.cov) >= 0.5 - tol))

    def purity(self) -> float:
        return float(1.0 / (2.0**self.dim * np.sqrt(np.linalg.det(self.cov))))

    @classmethod
    def coherent(cls, q: float = 0.0, p: float = 0.0, mass: float = 1.0, omega: float = 1.0):
        """Minimum-uncertainty state with the ground-state widths of (mass, omega)."""
        return cls.squeezed(q, p, mass=mass, omega=omega, r=0.0)

    @classmethod
    def squeezed(cls, q: float = 0.0, p: float = 0.0, mass: float = 1.0, omega: float = 1.0, r: float = 0.0):
        vq = np.exp(-2 * r) / (2 * mass * omega)
        vp = np.exp(2 * r) * mass * omega / 2
        return cls(np.array([q, p]), np.diag([vq, vp]))

    @classmethod
    def thermal(cls, q: float = 0.0, p: float = 0.0, mass: float = 1.0, omega: float = 1.0, beta: float = 1.0):
        c = 1.0 / np.tanh(beta * omega / 2.0)
        return cls(np.array([q, p]), np.diag([c / (2 * mass * omega), c * mass * omega / 2]))


COEFF_COLUMNS = ("time", "kappa", "gamma", "gamma_h", "gamma_f", "condition", "residual")


@dataclass(frozen=True)
class CoefficientTrace:
    """Time series of the reduced-dynamics coefficients.

    ``gamma_h`` and ``gamma_f`` hold the products Gamma*h and Gamma*f so the
    trace stays finite where Gamma crosses zero.
    """

    times: np.ndarray
    kappa: np.ndarray
    gamma: np.ndarray
    gamma_h: np.ndarray
    gamma_f: np.ndarray
    condition: np.ndarray = field(default=None)
    residual: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.asarray(self.times, float)
        object.__setattr__(self, "times", t)
        for name in ("kappa", "gamma", "gamma_h", "gamma_f", "condition", "residual"):
            val = getattr(self, name)
            val = np.zeros_like(t) if val is None else np.asarray(val, float)
            if val.shape != t.shape:
                raise ValidationError(f"{name} has shape {val.shape}, expected {t.shape}")
            object.__setattr__(self, name, val)
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("times must be increasing")

    def unreliable(self, threshold: float = 1e8) -> np.ndarray:
        return self.condition > threshold

    def at(self, t) -> dict:
        """Linearly interpolated coefficients at time(s) t."""
        t = np.asarray(t, float)
        if np.any(t < self.times[0] - 1e-12) or np.any(t > self.times[-1] + 1e-12):
            raise ValidationError("requested time outside the coefficient trace")
        return {k: np.interp(t, self.times, getattr(self, k)) for k in ("kappa", "gamma", "gamma_h", "gamma_f")}

    def delta_omega_sq(self, sys: SystemParams, renormalization: float) -> np.ndarray:
        """Frequency shift implied by kappa = M(w_S^2 + dW^2)/2 + Omega_tilde^2."""
        return 2.0 * (self.kappa - renormalization) / sys.mass - sys.omega**2

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# reduced-dynamics coefficients, natural units (hbar = k_B = 1)\n")
        buf.write("# gamma_h, gamma_f are the products Gamma*h and Gamma*f\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COEFF_COLUMNS)
        for row in zip(*(getattr(self, c if c != "time" else "times") for c in COEFF_COLUMNS)):
            w.writerow([f"{v:.12e}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CoefficientTrace":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        rows = list(csv.reader(lines))
        header, data = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        cols = {h: data[:, i] for i, h in enumerate(header)}
        return cls(
            cols["time"], cols["kappa"], cols["gamma"], cols["gamma_h"], cols["gamma_f"],
            cols.get("condition"), cols.get("residual"),
        )


def window_mask(times: Sequence[float], window) -> np.ndarray:
    t = np.asarray(times)
    return (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
