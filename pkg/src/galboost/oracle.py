"""Exact Gaussian propagation of the system + oscillator-bath composite.

Bath coordinates are handled internally in mode-scaled form
q~ = sqrt(m w) q, p~ = p / sqrt(m w); the transformation is canonical and
keeps the generator well conditioned when mode masses span many decades.
Public functions take and return states in the physical coordinates.

The trap anchor is carried as two extra augmented coordinates
(s, v) = (R0 + v t, v), so a co-moving trap is still a constant generator
and every propagation is a single matrix exponential.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .core import DiscreteBath, GaussianState, SystemParams, ValidationError, symplectic_form


class Quantity(str, Enum):
    BOOST_CHARGE = "boost_charge"
    TOTAL_MOMENTUM = "total_momentum"
    ENERGY = "energy"


@dataclass(frozen=True)
class CompositeModel:
    sys: SystemParams
    bath: DiscreteBath

    @property
    def n_dof(self) -> int:
        return self.bath.n_modes + 1

    @property
    def masses(self) -> np.ndarray:
        return np.concatenate([[self.sys.mass], self.bath.masses])

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    def with_R0(self, R0: float) -> "CompositeModel":
        return CompositeModel(SystemParams(self.sys.mass, self.sys.omega, R0), self.bath)

    def scale_vector(self) -> np.ndarray:
        """Diagonal of T with z~ = T z."""
        mw = self.bath.masses * self.bath.omegas
        t = np.ones(2 * self.n_dof)
        t[2::2] = np.sqrt(mw)
        t[3::2] = 1.0 / np.sqrt(mw)
        return t


@dataclass(frozen=True)
class QuadraticForm:
    """H(z) = z.H.z/2 + c.z + const in physical coordinates."""

    H: np.ndarray
    c: np.ndarray
    const: float = 0.0

    def energy(self, state: GaussianState) -> float:
        m = state.mean
        return float(0.5 * np.trace(self.H @ state.cov) + 0.5 * m @ self.H @ m + self.c @ m + self.const)


def build_quadratic_form(model: CompositeModel) -> QuadraticForm:
    sys, bath = model.sys, model.bath
    n = model.n_dof
    H = np.zeros((2 * n, 2 * n))
    k = bath.masses * bath.omegas**2
    H[1, 1] = 1.0 / sys.mass
    H[0, 0] = sys.mass * sys.omega**2 + np.sum(k)
    idx = 2 * np.arange(1, n)
    H[idx + 1, idx + 1] = 1.0 / bath.masses
    H[idx, idx] = k
    H[0, idx] = -k
    H[idx, 0] = -k
    c = np.zeros(2 * n)
    c[0] = -sys.mass * sys.omega**2 * sys.R0
    const = 0.5 * sys.mass * sys.omega**2 * sys.R0**2
    return QuadraticForm(H, c, const)


def _scaled_generator(model: CompositeModel) -> sp.csr_matrix:
    """Sparse augmented generator acting on (z~, s, v)."""
    sys, bath = model.sys, model.bath
    n = model.n_dof
    D = 2 * n + 2
    rows, cols, vals = [], [], []

    def put(r, c, v):
        rows.append(r), cols.append(c), vals.append(v)

    # q0' = p0 / M ; p0' = -(M wS^2 + sum k) q0 + sum sqrt(m w^3) q~_n + M wS^2 s
    put(0, 1, 1.0 / sys.mass)
    put(1, 0, -(sys.mass * sys.omega**2 + bath.renormalization()))
    put(1, D - 2, sys.mass * sys.omega**2)
    g = np.sqrt(bath.masses * bath.omegas**3)
    for j, (w, gj) in enumerate(zip(bath.omegas, g)):
        iq, ip = 2 * (j + 1), 2 * (j + 1) + 1
        put(1, iq, gj)
        put(iq, ip, w)
        put(ip, iq, -w)
        put(ip, 0, gj)
    put(D - 2, D - 1, 1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(D, D))


def generator(model: CompositeModel) -> np.ndarray:
    """Dense A = Omega H (physical coordinates, no linear term)."""
    qf = build_quadratic_form(model)
    return symplectic_form(model.n_dof) @ qf.H


def thermal_composite_state(model: CompositeModel, sys0: GaussianState) -> GaussianState:
    if sys0.dim != 1:
        raise ValidationError("system state must have one degree of freedom")
    beta = model.bath.beta
    if not beta > 0:
        raise ValidationError("beta must be positive")
    n = model.n_dof
    mean = np.zeros(2 * n)
    mean[:2] = sys0.mean
    mean[2::2] = model.sys.R0  # bath relaxed about the trap anchor
    cov = np.zeros((2 * n, 2 * n))
    cov[:2, :2] = sys0.cov
    m, w = model.bath.masses, model.bath.omegas
    c = _coth(beta * w / 2.0)
    idx = 2 * np.arange(1, n)
    cov[idx, idx] = c / (2 * m * w)
    cov[idx + 1, idx + 1] = c * m * w / 2
    return GaussianState(mean, cov)


def _coth(x):
    x = np.asarray(x, float)
    return np.where(x > 350, 1.0, 1.0 / np.tanh(np.minimum(x, 350)))


def _augment(model: CompositeModel, mean: np.ndarray, trap_velocity: float) -> np.ndarray:
    T = model.scale_vector()
    return np.concatenate([T * mean, [model.sys.R0, trap_velocity]])


def evolve(model: CompositeModel, state: GaussianState, t: float, trap_velocity: float = 0.0) -> GaussianState:
    """Exact propagation by t (any sign) of a composite Gaussian state.

    ``trap_velocity`` moves the trap anchor as R0 + v t.
    """
    if state.dim != model.n_dof:
        raise ValidationError(f"state has {state.dim} dof, model has {model.n_dof}")
    if t == 0:
        return state
    A = _scaled_generator(model).toarray()
    Phi = sla.expm(A * t)
    return _apply(model, Phi, state, trap_velocity)


def _apply(model, Phi, state, trap_velocity):
    T = model.scale_vector()
    nz = T.size
    w = _augment(model, state.mean, trap_velocity)
    mean = (Phi @ w)[:nz] / T
    S = Phi[:nz, :nz]
    cov_s = (T[:, None] * state.cov) * T[None, :]
    cov = (S @ cov_s @ S.T) / T[:, None] / T[None, :]
    return GaussianState(mean, 0.5 * (cov + cov.T))


def evolve_many(model: CompositeModel, state: GaussianState, times: Sequence[float],
                trap_velocity: float = 0.0) -> list:
    """Exact states at each requested time (independent exponentials)."""
    A = _scaled_generator(model).toarray()
    return [state if t == 0 else _apply(model, sla.expm(A * t), state, trap_velocity) for t in times]


def evolve_grid(model: CompositeModel, state: GaussianState, dt: float, n_steps: int,
                trap_velocity: float = 0.0) -> list:
    """Full composite states at k dt, k = 0..n_steps, by repeated one-step maps."""
    if state.dim != model.n_dof:
        raise ValidationError(f"state has {state.dim} dof, model has {model.n_dof}")
    A = _scaled_generator(model).toarray()
    Phi = sla.expm(A * dt)
    T = model.scale_vector()
    nz = T.size
    S = Phi[:nz, :nz]
    w = _augment(model, state.mean, trap_velocity)
    C = (T[:, None] * state.cov) * T[None, :]
    out = [state]
    for _ in range(n_steps):
        w = Phi @ w
        C = S @ C @ S.T
        C = 0.5 * (C + C.T)
        out.append(GaussianState(w[:nz] / T, C / T[:, None] / T[None, :]))
    return out


def propagator(model: CompositeModel, t: float) -> np.ndarray:
    """Physical-coordinate symplectic propagator S(t) = exp(A t)."""
    T = model.scale_vector()
    A = _scaled_generator(model).toarray()
    nz = T.size
    S = sla.expm(A * t)[:nz, :nz]
    return S * T[None, :] / T[:, None]


def reduce_to_system(state: GaussianState) -> GaussianState:
    return GaussianState(state.mean[:2], state.cov[:2, :2])


def rk4_mean(model: CompositeModel, mean: np.ndarray, t: float, n_steps: int,
             trap_velocity: float = 0.0) -> np.ndarray:
    """Independent RK4 integration of the first-moment equations (cross-check)."""
    qf = build_quadratic_form(model)
    A = symplectic_form(model.n_dof) @ qf.H
    Om = symplectic_form(model.n_dof)
    unit = np.zeros(2 * model.n_dof)
    unit[0] = -model.sys.mass * model.sys.omega**2
    b_unit = Om @ unit

    def f(tau, z):
        return A @ z + b_unit * (model.sys.R0 + trap_velocity * tau)

    h = t / n_steps
    z = np.array(mean, float)
    tau = 0.0
    for _ in range(n_steps):
        k1 = f(tau, z)
        k2 = f(tau + h / 2, z + h / 2 * k1)
        k3 = f(tau + h / 2, z + h / 2 * k2)
        k4 = f(tau + h, z + h * k3)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        tau += h
    return z


def conserved_value(model: CompositeModel, state: GaussianState, t: float, quantity) -> float:
    quantity = Quantity(quantity)
    m = state.mean
    if quantity is Quantity.ENERGY:
        return build_quadratic_form(model).energy(state)
    p_tot = float(np.sum(m[1::2]))
    if quantity is Quantity.TOTAL_MOMENTUM:
        return p_tot
    return float(np.sum(model.masses * m[0::2]) - p_tot * t)


def noether_drift(model: CompositeModel, trajectory: Iterable[GaussianState], times: Sequence[float],
                  quantity) -> np.ndarray:
    """Relative drift |Q(t) - Q(0)| / max(|Q(0)|, 1) along a sampled trajectory."""
    quantity = Quantity(quantity)
    if quantity is not Quantity.ENERGY and model.sys.omega > 0:
        raise ValidationError(
            f"{quantity.value} is conserved only for a free system (omega_S = 0): "
            "a lab-anchored trap breaks translation and boost symmetry of the composite"
        )
    vals = np.array([conserved_value(model, s, t, quantity) for s, t in zip(trajectory, times)])
    return np.abs(vals - vals[0]) / max(abs(vals[0]), 1.0)


@dataclass(frozen=True)
class Propagation:
    """System rows of the augmented propagator sampled on a uniform grid.

    For a response row pair R(t) (rows q0, p0 of exp(A_aug t)):
      G  = R[:, system q, p]           X  = R_b diag(bath var) R_b^T
      F  = R[:, anchor s, velocity v]  B  = R . bath-shift vector
    and the exact time derivatives (suffix d) from dR/dt = R A_aug.
    """

    times: np.ndarray
    G: np.ndarray
    F: np.ndarray
    X: np.ndarray
    B: np.ndarray
    Gd: np.ndarray
    Fd: np.ndarray
    Xd: np.ndarray
    Bd: np.ndarray
    sys: SystemParams

    def _sel(self, idx):
        return idx if idx is not None else slice(None)

    def mean(self, sys_mean, R0: Optional[float] = None, trap_velocity: float = 0.0,
             bath_center: Optional[float] = None, derivative: bool = False) -> np.ndarray:
        """System mean; bath oscillators start at rest about ``bath_center`` (default: R0)."""
        R0 = self.sys.R0 if R0 is None else R0
        bc = R0 if bath_center is None else bath_center
        G, F, B = (self.Gd, self.Fd, self.Bd) if derivative else (self.G, self.F, self.B)
        return G @ np.asarray(sys_mean, float) + F @ np.array([R0, trap_velocity]) + B * bc

    def cov(self, sys_cov, derivative: bool = False) -> np.ndarray:
        S = np.asarray(sys_cov, float)
        if not derivative:
            C = self.G @ S @ np.swapaxes(self.G, 1, 2) + self.X
        else:
            GS = self.Gd @ S @ np.swapaxes(self.G, 1, 2)
            C = GS + np.swapaxes(GS, 1, 2) + self.Xd
        return 0.5 * (C + np.swapaxes(C, 1, 2))


def propagate_rows(model: CompositeModel, t0: float, dt: float, n_times: int) -> Propagation:
    """Sample the system response rows at t0 + k dt, k = 0..n_times-1."""
    if dt <= 0 or n_times < 1:
        raise ValidationError("need dt > 0 and at least one sample")
    A_sp = _scaled_generator(model)
    A = A_sp.toarray()
    D = A.shape[0]
    nz = D - 2
    Phi = sla.expm(A * dt)
    R = sla.expm(A * t0)[:2].copy() if t0 != 0 else np.eye(D)[:2].copy()
    n_b = nz - 2
    m, w = model.bath.masses, model.bath.omegas
    var_b = np.empty(n_b)
    var_b[0::2] = _coth(model.bath.beta * w / 2) / 2
    var_b[1::2] = var_b[0::2]
    shift = np.zeros(D)
    shift[2:nz:2] = np.sqrt(m * w)  # bath q~ displacement per unit shift
    AT = A_sp.T.tocsr()

    out = {k: np.empty((n_times, 2, 2)) for k in ("G", "F", "X", "Gd", "Fd", "Xd")}
    out["B"] = np.empty((n_times, 2))
    out["Bd"] = np.empty((n_times, 2))
    for k in range(n_times):
        Rd = (AT @ R.T).T
        for key, M in (("", R), ("d", Rd)):
            out["G" + key][k] = M[:, :2]
            out["F" + key][k] = M[:, nz:]
            out["B" + key][k] = M @ shift
        Rb, Rbd = R[:, 2:nz], Rd[:, 2:nz]
        out["X"][k] = (Rb * var_b) @ Rb.T
        P = (Rbd * var_b) @ Rb.T
        out["Xd"][k] = P + P.T
        if k + 1 < n_times:
            R = R @ Phi
    times = t0 + dt * np.arange(n_times)
    return Propagation(times, out["G"], out["F"], out["X"], out["B"], out["Gd"], out["Fd"],
                       out["Xd"], out["Bd"], model.sys)
