"""Moment-level reduced dynamics and coefficient extraction.

The reduced master equation
    d rho/dt = -i[P^2/2M + kappa (R - R0)^2, rho] + Gamma [R, [P, rho]]
               - M (Gamma h) [R, [R, rho]] - i (Gamma f) [R, {P, rho}]
closes on first and second moments. With C = <{R, P}>/2 the flow is

    d<R>/dt   = <P>/M
    d<P>/dt   = -2 kappa (<R> - R0) - 2 (Gamma f) <P>
    d<R^2>/dt = 2 C / M
    d<P^2>/dt = -4 kappa (C - R0 <P>) + 2 M (Gamma h) - 4 (Gamma f) <P^2>
    dC/dt     = <P^2>/M - 2 kappa (<R^2> - R0 <R>) + Gamma - 2 (Gamma f) C

(see docs/moment_equations.md). Momentum friction enters with a factor 2:
a free particle loses <P> as exp(-2 Gamma f t), a trapped one has its
oscillation envelope decaying as exp(-Gamma f t).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import curve_fit

from .core import CoefficientTrace, GaussianState, SystemParams, ValidationError, window_mask
from .oracle import CompositeModel, Propagation, propagate_rows

MOMENT_NAMES = ("R", "P", "R2", "P2", "C")


@dataclass(frozen=True)
class MomentVector:
    """(<R>, <P>) and raw second moments (<R^2>, <P^2>, <{R,P}>/2)."""

    m1: tuple
    m2: tuple
    time: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([*self.m1, *self.m2], float)

    @classmethod
    def from_array(cls, a, time: float = 0.0) -> "MomentVector":
        a = np.asarray(a, float)
        return cls((a[0], a[1]), (a[2], a[3], a[4]), time)

    @classmethod
    def from_state(cls, state: GaussianState, time: float = 0.0) -> "MomentVector":
        return cls.from_array(moments_from_gaussian(state.mean, state.cov), time)

    def centered_cov(self) -> np.ndarray:
        R, P, R2, P2, C = self.as_array()
        return np.array([[R2 - R * R, C - R * P], [C - R * P, P2 - P * P]])


def moments_from_gaussian(mean, cov) -> np.ndarray:
    """Raw moment array (..., 5) from means (..., 2) and covariances (..., 2, 2)."""
    mean = np.asarray(mean, float)
    cov = np.asarray(cov, float)
    R, P = mean[..., 0], mean[..., 1]
    return np.stack([R, P, cov[..., 0, 0] + R * R, cov[..., 1, 1] + P * P, cov[..., 0, 1] + R * P], axis=-1)


def moment_rhs(coeffs, m, sys: SystemParams) -> np.ndarray:
    """Time derivative of the raw moment vector under the reduced dynamics.

    ``coeffs`` is a mapping with kappa, gamma, gamma_h, gamma_f (scalars or
    arrays broadcasting against m[..., 0]).
    """
    m = m.as_array() if isinstance(m, MomentVector) else np.asarray(m, float)
    k, g, gh, gf = (np.asarray(coeffs[n], float) for n in ("kappa", "gamma", "gamma_h", "gamma_f"))
    M, R0 = sys.mass, sys.R0
    R, P, R2, P2, C = (m[..., i] for i in range(5))
    return np.stack([
        P / M,
        -2 * k * (R - R0) - 2 * gf * P,
        2 * C / M,
        -4 * k * (C - R0 * P) + 2 * M * gh - 4 * gf * P2,
        P2 / M - 2 * k * (R2 - R0 * R) + g - 2 * gf * C,
    ], axis=-1)


def _design(m, dm, sys: SystemParams):
    """Linear system rows (A x = b) for x = (kappa, Gamma, Gamma h, Gamma f)."""
    M, R0 = sys.mass, sys.R0
    R, P, R2, P2, C = m
    A = np.array([
        [-2 * (R - R0), 0.0, 0.0, -2 * P],
        [-4 * (C - R0 * P), 0.0, 2 * M, -4 * P2],
        [-2 * (R2 - R0 * R), 1.0, 0.0, -2 * C],
    ])
    b = np.array([dm[1], dm[3], dm[4] - P2 / M])
    return A, b


def fd4(values: np.ndarray, h: float) -> np.ndarray:
    """Centered 4th-order first derivative on interior points (drops 2 per side)."""
    v = np.asarray(values)
    return (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)


def uniform_step(grid: Sequence[float]) -> float:
    g = np.asarray(grid, float)
    if g.size < 2:
        raise ValidationError("grid needs at least two points")
    h = g[1] - g[0]
    if np.max(np.abs(np.diff(g) - h)) > 1e-9 * max(1.0, abs(h)):
        raise ValidationError("grid must be uniform")
    return float(h)


def padded_propagation(model: CompositeModel, grid: Sequence[float]) -> Propagation:
    """Response rows on the grid plus two stencil points on either side."""
    h = uniform_step(grid)
    return propagate_rows(model, float(grid[0]) - 2 * h, h, len(grid) + 4)


def oracle_moments(prop: Propagation, state: GaussianState, **kw) -> np.ndarray:
    mean = prop.mean(state.mean, **kw)
    cov = prop.cov(state.cov)
    return moments_from_gaussian(mean, cov)


def default_initial_set(sys: SystemParams, beta: float = 1.0) -> list:
    """Displaced in q, displaced in p, squeezed in q and a broad thermal-like state."""
    M, w = sys.mass, max(sys.omega, 1.0)
    return [
        GaussianState.coherent(1.0, 0.0, M, w),
        GaussianState.coherent(0.0, 1.0 * M * w, M, w),
        GaussianState.squeezed(0.3, -0.2 * M * w, M, w, r=0.6),
        GaussianState.thermal(-0.5, 0.4 * M * w, M, w, beta=0.5),
    ]


def extract_coefficients(model: CompositeModel, initial_set: Sequence[GaussianState], grid: Sequence[float],
                         prop: Propagation = None) -> CoefficientTrace:
    """Least-squares fit of (kappa, Gamma, Gamma h, Gamma f) to oracle moments.

    Moment derivatives use the 4th-order centered stencil; every initial
    state contributes three equations per time.
    """
    if len(initial_set) < 2:
        raise ValidationError("need at least two initial states")
    grid = np.asarray(grid, float)
    if model.bath.n_modes:
        model.bath.check_horizon(grid[-1])
    h = uniform_step(grid)
    prop = padded_propagation(model, grid) if prop is None else prop
    ms, dms = [], []
    for st in initial_set:
        mom = oracle_moments(prop, st)
        ms.append(mom[2:-2])
        dms.append(fd4(mom, h))
    n = grid.size
    x = np.zeros((n, 4))
    cond = np.zeros(n)
    resid = np.zeros(n)
    for i in range(n):
        rows = [_design(m[i], d[i], model.sys) for m, d in zip(ms, dms)]
        A = np.vstack([r[0] for r in rows])
        b = np.concatenate([r[1] for r in rows])
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        x[i] = sol
        cond[i] = np.linalg.cond(A)
        resid[i] = np.linalg.norm(A @ sol - b)
    return CoefficientTrace(grid, x[:, 0], x[:, 1], x[:, 2], x[:, 3], cond, resid)


def exact_generator(prop: Propagation, sys: SystemParams):
    """Time-local generator of the reduced dynamics from the exact response rows.

    Returns (L, D) with d mean/dt = L mean (+ anchor terms) and
    d Sigma/dt = L Sigma + Sigma L^T + D.
    """
    Ginv = np.linalg.inv(prop.G)
    L = prop.Gd @ Ginv
    X, Xd = prop.X, prop.Xd
    D = Xd - L @ X - X @ np.swapaxes(L, 1, 2)
    return L, 0.5 * (D + np.swapaxes(D, 1, 2))


def exact_coefficients(prop: Propagation, sys: SystemParams) -> CoefficientTrace:
    """Coefficients read off the exact generator (independent of the fit)."""
    L, D = exact_generator(prop, sys)
    return CoefficientTrace(
        prop.times, -L[:, 1, 0] / 2, D[:, 0, 1], D[:, 1, 1] / (2 * sys.mass), -L[:, 1, 1] / 2,
    )


def propagate_reduced(coeffs: CoefficientTrace, sys0: GaussianState, grid: Sequence[float],
                      sys: SystemParams) -> np.ndarray:
    """RK4 integration of the moment flow; returns moments (len(grid), 5)."""
    grid = np.asarray(grid, float)
    if grid[0] < coeffs.times[0] - 1e-12 or grid[-1] > coeffs.times[-1] + 1e-12:
        raise ValidationError("grid extends outside the coefficient trace")
    names = ("kappa", "gamma", "gamma_h", "gamma_f")
    tt = coeffs.times
    splines = None

    def at(t):
        nonlocal splines
        j = int(np.rint((t - tt[0]) / (tt[1] - tt[0]))) if tt.size > 1 else 0
        if 0 <= j < tt.size and abs(tt[j] - t) < 1e-9:
            return {nm: getattr(coeffs, nm)[j] for nm in names}
        if splines is None:
            splines = {nm: CubicSpline(tt, getattr(coeffs, nm)) for nm in names}
        return {nm: float(splines[nm](t)) for nm in names}

    out = np.empty((grid.size, 5))
    m = MomentVector.from_state(sys0).as_array()
    out[0] = m
    for i in range(grid.size - 1):
        t, h = grid[i], grid[i + 1] - grid[i]
        c0, ch, c1 = at(t), at(t + h / 2), at(t + h)
        k1 = moment_rhs(c0, m, sys)
        k2 = moment_rhs(ch, m + h / 2 * k1, sys)
        k3 = moment_rhs(ch, m + h / 2 * k2, sys)
        k4 = moment_rhs(c1, m + h * k3, sys)
        m = m + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = m
    return out


@dataclass(frozen=True)
class MarkovianSummary:
    gamma_f: float
    gamma_h: float
    kappa: float
    gamma: float
    plateau_quality: float
    variation: dict


def markovian_summary(trace: CoefficientTrace, window) -> MarkovianSummary:
    sel = window_mask(trace.times, window)
    if not np.any(sel):
        raise ValidationError("window does not intersect the trace")
    avg, var = {}, {}
    for nm in ("kappa", "gamma", "gamma_h", "gamma_f"):
        v = getattr(trace, nm)[sel]
        avg[nm] = float(np.mean(v))
        scale = abs(avg[nm])
        var[nm] = float(np.max(np.abs(v - avg[nm])) / scale) if scale > 0 else 0.0
    return MarkovianSummary(avg["gamma_f"], avg["gamma_h"], avg["kappa"], avg["gamma"], var["gamma_f"], var)


def fit_decay_rate(times, signal, window, oscillating: bool = True) -> float:
    """Exponential decay rate of ``signal`` in ``window``.

    Trapped motion is fitted as exp(-r t)(a cos wt + b sin wt) + c, free
    motion as a pure exponential.
    """
    t = np.asarray(times)
    sel = window_mask(t, window)
    t, y = t[sel], np.asarray(signal)[sel]
    t0 = t[0]
    if not oscillating:
        slope = np.polyfit(t - t0, np.log(np.abs(y)), 1)[0]
        return float(-slope)
    spec = np.abs(np.fft.rfft(y - y.mean()))
    freqs = 2 * np.pi * np.fft.rfftfreq(y.size, t[1] - t[0])
    w0 = freqs[np.argmax(spec[1:]) + 1]

    def model(tt, r, w, a, b, c):
        s = tt - t0
        return np.exp(-r * s) * (a * np.cos(w * s) + b * np.sin(w * s)) + c

    p0 = [0.01, w0, y[0], 0.0, 0.0]
    popt, _ = curve_fit(model, t, y, p0=p0, maxfev=20000)
    return float(popt[0])
