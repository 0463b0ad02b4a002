"""Stochastic unraveling of the reduced dynamics for arbitrary 1D potentials.

Two wavefunctions are propagated with complex noises ξ(t), ν(t)::

    i dψ1/dt = (H - ξ x - ν x / 2) ψ1
    i dψ2/dt = (H - ξ* x + ν* x / 2) ψ2

so that the pair operator |ψ1><ψ2| obeys

    i dρ/dt = [H, ρ] - ξ [x, ρ] - (ν / 2) {x, ρ}

and the reduced state is its noise average. The required correlations are
M[ξ ξ'] = Re L, M[ξ(t) ν(t')] = 2i Θ(t - t') Im L(t - t') = -i η(t - t') Θ,
M[ν ν'] = 0, with L(s) = (ν_k(s) - i η_k(s)) / 2 from ``bath.KernelTable``.

Construction used here: ν is white circular complex noise of intensity λ²
and ξ = ξ_R + λ^-2 Σ_{j<=i} c_{i-j} ν*_j dt, with ξ_R real Gaussian
(covariance Re L, circulant embedding) and c_k = -i η(k dt). The static
part of the bath coupling (the counterterm Ω̃² x² / 2 of the translation
invariant coupling) is either kept in H or moved into the lag-0 filter
weight; see ``generate_noise``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import fft as sfft

from .bath import KernelTable
from .core import GaussianState, ValidationError

DIVERGENCE_THRESHOLD = 1e3
MAX_DIVERGENT_FRACTION = 0.05
OBSERVABLES = ("trace", "R", "P", "R2", "P2", "C")


@dataclass(frozen=True)
class GridSpec:
    x_min: float = -12.0
    x_max: float = 12.0
    n_points: int = 512
    dt: float = 1e-3
    t_max: float = 10.0
    mask_width: float = 0.1

    def __post_init__(self):
        n = self.n_points
        if n < 8 or n & (n - 1):
            raise ValidationError(f"n_points must be a power of two >= 8, got {n}")
        if not self.x_max > self.x_min:
            raise ValidationError("need x_max > x_min")
        if not (self.dt > 0 and self.t_max > 0):
            raise ValidationError("dt and t_max must be positive")
        if not 0 <= self.mask_width < 0.5:
            raise ValidationError("mask_width must be in [0, 0.5)")
        steps = self.t_max / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValidationError("t_max must be a whole number of steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_points

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_points)

    @property
    def k(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.n_points, self.dx)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def mask(self) -> np.ndarray:
        """Per-step absorbing mask: 1 inside, cos^(1/8) ramp over each edge band."""
        m = np.ones(self.n_points)
        nb = int(round(self.mask_width * self.n_points))
        if nb:
            d = (np.arange(nb)[::-1] + 1) / nb  # 1 at the boundary, -> 0 inward
            ramp = np.cos(0.5 * np.pi * d) ** 0.125
            m[:nb] = ramp
            m[-nb:] = ramp[::-1]
        return m


@dataclass(frozen=True)
class Potential:
    """V(x, t) = a2 y^2 / 2 + a4 y^4 / 4 with y = x - (anchor + velocity t)."""

    a2: float = 1.0
    a4: float = 0.0
    anchor: float = 0.0
    velocity: float = 0.0

    @classmethod
    def harmonic(cls, mass=1.0, omega=1.0, R0=0.0):
        return cls(mass * omega**2, 0.0, R0)

    @classmethod
    def quartic(cls, a4=1.0, a2=0.0):
        return cls(a2, a4)

    def moving(self, velocity: float) -> "Potential":
        return Potential(self.a2, self.a4, self.anchor, velocity)

    def center(self, t):
        return self.anchor + self.velocity * t

    def value(self, x, t):
        y = np.asarray(x) - self.center(t)
        return 0.5 * self.a2 * y**2 + 0.25 * self.a4 * y**4

    def gradient(self, x, t):
        y = np.asarray(x) - self.center(t)
        return self.a2 * y + self.a4 * y**3


@dataclass(frozen=True)
class NoisePair:
    xi: np.ndarray  # (n_traj, n_steps) complex
    nu: np.ndarray  # (n_traj, n_steps) complex
    seed: int
    first_index: int
    lam: float
    counterterm: float  # static coupling left in the Hamiltonian


@dataclass(frozen=True)
class NoiseDesign:
    cov: np.ndarray  # Re L at lags k dt, k = 0..n_steps
    filt: np.ndarray  # causal weights c_k, k = 0..n_steps-1
    eig: np.ndarray  # circulant embedding spectrum (None for mode synthesis)
    lam: float
    counterterm: float
    zero: bool
    modes: Optional[tuple] = None  # (amplitudes, omegas) for exact synthesis of a discrete bath


def design_noise(kernels: KernelTable, grid: GridSpec, lam: Optional[float] = None,
                 static: str = "hamiltonian", renormalization: float = 0.0) -> NoiseDesign:
    """Correlation targets, coloring filter and embedding spectrum.

    ``static="hamiltonian"`` keeps ``renormalization * x^2 / 2`` in H and uses
    c_0 = 0. ``static="noise"`` drops it from H and sets the lag-0 weight to
    +i Σ_{k>=1} η_k, so the discrete filter has zero total weight.
    """
    n = grid.n_steps
    s = np.asarray(kernels.s)
    if s.size < n + 1 or np.max(np.abs(s[: n + 1] - grid.dt * np.arange(n + 1))) > 1e-9:
        raise ValidationError("kernel table must be sampled at k*dt for k = 0..n_steps")
    cov = 0.5 * np.asarray(kernels.nu[: n + 1], float)
    eta = np.asarray(kernels.eta[:n], float)
    filt = -1j * eta
    filt[0] = 0.0
    if static == "noise":
        filt[0] = 1j * np.sum(eta[1:])
        counter = 0.0
    elif static == "hamiltonian":
        counter = float(renormalization)
    else:
        raise ValidationError(f"unknown static placement {static!r}")
    zero = not (np.any(cov) or np.any(filt))
    if lam is None:
        lam = 0.0 if zero else math.sqrt(2.0 * math.sqrt(np.sum(np.abs(filt) ** 2) * grid.dt))
    if not zero and not lam > 0:
        raise ValidationError("lam must be positive for a non-trivial bath")
    if kernels.modes is not None:
        wt, om = kernels.modes
        from .bath import thermal_factor
        amp = np.sqrt(0.5 * wt * thermal_factor(kernels.beta, om))
        return NoiseDesign(cov, filt, None, float(lam), counter, zero, (amp, om))
    full = 0.5 * np.asarray(kernels.nu, float)
    c = np.concatenate([full, full[-2:0:-1]])
    eig = np.fft.fft(c).real
    floor = -1e-10 * max(1.0, float(np.max(np.abs(eig))))
    if eig.min() < floor:
        j = int(np.argmin(eig))
        raise ValidationError(
            f"circulant embedding not positive: spectral floor {eig.min():.3e} at frequency index {j}; "
            "extend the kernel table beyond t_max (embedding length)"
        )
    return NoiseDesign(cov, filt, np.clip(eig, 0.0, None), float(lam), counter, zero)


def _traj_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def sample_noise(design: NoiseDesign, n_steps: int, dt: float, seed: int, first_index: int,
                 n_traj: int) -> NoisePair:
    """Noise for trajectories first_index .. first_index + n_traj - 1 (each keyed by its index)."""
    if design.zero:
        z = np.zeros((n_traj, n_steps), complex)
        return NoisePair(z, z.copy(), seed, first_index, 0.0, design.counterterm)
    m = design.modes[1].size if design.modes is not None else design.eig.size
    white = np.empty((n_traj, 2, m))
    w = np.empty((n_traj, n_steps), complex)
    for j in range(n_traj):
        rng = _traj_rng(seed, first_index + j)
        white[j] = rng.standard_normal((2, m))
        g = rng.standard_normal((2, n_steps))
        w[j] = (g[0] + 1j * g[1]) / math.sqrt(2.0)
    if design.modes is not None:
        amp, om = design.modes
        ph = np.outer(om, dt * np.arange(n_steps))
        xr = (white[:, 0] * amp) @ np.cos(ph) + (white[:, 1] * amp) @ np.sin(ph)
    else:
        z = (white[:, 0] + 1j * white[:, 1]) * np.sqrt(design.eig / m)
        xr = sfft.fft(z, axis=1).real[:, :n_steps]
    nu = design.lam * w / math.sqrt(dt)
    L = 1 << int(math.ceil(math.log2(2 * n_steps)))
    conv = sfft.ifft(sfft.fft(np.conj(nu), L, axis=1) * sfft.fft(design.filt, L)[None, :], axis=1)[:, :n_steps]
    xi = xr + conv * dt / design.lam**2
    return NoisePair(xi, nu, seed, first_index, design.lam, design.counterterm)


def generate_noise(kernels: KernelTable, grid: GridSpec, seed: int, n_traj: int = 1, first_index: int = 0,
                   lam: Optional[float] = None, static: str = "hamiltonian",
                   renormalization: float = 0.0) -> NoisePair:
    design = design_noise(kernels, grid, lam, static, renormalization)
    return sample_noise(design, grid.n_steps, grid.dt, seed, first_index, n_traj)


def wavefunction(state: GaussianState, grid: GridSpec) -> np.ndarray:
    """Grid wavefunction of a pure one-dof Gaussian state (unit norm)."""
    if state.dim != 1:
        raise ValidationError("need a one-dof state")
    (q, p), S = state.mean, state.cov
    vx, c = S[0, 0], S[0, 1]
    if abs(vx * S[1, 1] - c * c - 0.25) > 1e-9:
        raise ValidationError("wavefunction needs a pure state")
    y = grid.x - q
    psi = np.exp(-(y**2) / (4 * vx) + 1j * c * y**2 / (2 * vx) + 1j * p * grid.x)
    return psi / math.sqrt(np.sum(np.abs(psi) ** 2) * grid.dx)


@dataclass
class TrajectoryPair:
    psi1: np.ndarray
    psi2: np.ndarray
    weight: complex = 1.0
    divergent: bool = False

    def overlap(self, dx: float) -> complex:
        return self.weight * np.sum(np.conj(self.psi2) * self.psi1) * dx


@dataclass(frozen=True)
class BatchRecord:
    """Sums over the surviving trajectories of one batch."""

    samples: np.ndarray  # (n_samples, 6) complex: trace, R, P, R2, P2, C
    steps: np.ndarray  # (n_steps + 1, 2) complex: trace, P at step ends
    force: np.ndarray  # (n_steps,) complex: system force at step midpoints
    n_traj: int
    n_divergent: int
    leakage: float


def _pair_moments(p1, p2, w, grid, k):
    dx, x = grid.dx, grid.x
    c2 = np.conj(p2)
    tr = np.sum(c2 * p1, axis=-1) * dx
    X = np.sum(c2 * x * p1, axis=-1) * dx
    X2 = np.sum(c2 * x * x * p1, axis=-1) * dx
    f1 = sfft.fft(p1, axis=-1, norm="ortho")
    f2 = sfft.fft(p2, axis=-1, norm="ortho")
    P = np.sum(np.conj(f2) * k * f1, axis=-1) * dx
    P2 = np.sum(np.conj(f2) * k * k * f1, axis=-1) * dx
    dp1 = sfft.ifft(k * f1, axis=-1, norm="ortho")
    dp2 = sfft.ifft(k * f2, axis=-1, norm="ortho")
    C = 0.5 * (np.sum(c2 * x * dp1, axis=-1) + np.sum(np.conj(dp2) * x * p1, axis=-1)) * dx
    return np.stack([tr, X, P, X2, P2, C], axis=-1) * w[..., None]


def _propagate(potential: Potential, psi0: np.ndarray, noise: NoisePair, grid: GridSpec, mass: float,
               sample_steps: Sequence[int], keep_states: bool = False):
    """Batched Strang split propagation; returns (BatchRecord, final pairs or None)."""
    B, n = noise.xi.shape
    if n != grid.n_steps:
        raise ValidationError("noise length does not match the grid")
    x, k, dx, dt = grid.x, grid.k, grid.dx, grid.dt
    mask = grid.mask()
    kin = np.exp(-1j * k**2 * dt / (4 * mass))
    f1 = np.tile(sfft.fft(psi0, norm="ortho"), (B, 1))
    f2 = f1.copy()
    logw = np.zeros(B)
    alive = np.ones(B, bool)
    sample_steps = list(sample_steps)
    samples = np.zeros((len(sample_steps), B, 6), complex)
    steps = np.zeros((n + 1, B, 2), complex)
    force = np.zeros((n, B), complex)
    leak = 0.0
    slot = {s: i for i, s in enumerate(sample_steps)}

    def record_samples(i, p1, p2):
        samples[slot[i]] = _pair_moments(p1, p2, np.exp(logw) * alive, grid, k)

    p0 = np.tile(psi0, (B, 1))
    if 0 in slot:
        record_samples(0, p0, p0)
    steps[0, :, 0] = 1.0
    steps[0, :, 1] = np.sum(np.conj(f1) * k * f1, axis=1) * dx
    xc = x[None, :]
    for i in range(n):
        t_mid = (i + 0.5) * dt
        f1 *= kin
        f2 *= kin
        p1 = sfft.ifft(f1, axis=1, norm="ortho")
        p2 = sfft.ifft(f2, axis=1, norm="ortho")
        base = np.exp(-1j * dt * (potential.value(x, t_mid) + 0.5 * noise.counterterm * x**2))
        a1 = noise.xi[:, i] + 0.5 * noise.nu[:, i]
        a2 = np.conj(noise.xi[:, i]) - 0.5 * np.conj(noise.nu[:, i])
        p1 *= base * np.exp(1j * dt * a1[:, None] * xc)
        p2 *= base * np.exp(1j * dt * a2[:, None] * xc)
        if grid.mask_width:
            pre = np.sum(np.abs(p1) ** 2, axis=1)
            p1 *= mask
            p2 *= mask
            post = np.sum(np.abs(p1) ** 2, axis=1)
            live = alive & (pre > 0)
            if np.any(live):
                leak = max(leak, float(np.max(1.0 - post[live] / pre[live])))
        w = np.exp(logw) * alive
        force[i] = -np.sum(np.conj(p2) * potential.gradient(x, t_mid) * p1, axis=1) * dx * w
        f1 = sfft.fft(p1, axis=1, norm="ortho")
        f2 = sfft.fft(p2, axis=1, norm="ortho")
        f1 *= kin
        f2 *= kin
        n1 = np.sqrt(np.sum(np.abs(f1) ** 2, axis=1) * dx)
        n2 = np.sqrt(np.sum(np.abs(f2) ** 2, axis=1) * dx)
        ok = np.isfinite(n1) & np.isfinite(n2) & (n1 > 0) & (n2 > 0)
        n1s, n2s = np.where(ok, n1, 1.0), np.where(ok, n2, 1.0)
        f1 /= n1s[:, None]
        f2 /= n2s[:, None]
        logw += np.log(n1s) + np.log(n2s)
        bad = ~ok | (logw > math.log(DIVERGENCE_THRESHOLD))
        if np.any(bad & alive):
            alive &= ~bad
            f1[bad] = 0.0
            f2[bad] = 0.0
            logw[bad] = 0.0
        w = np.exp(logw) * alive
        steps[i + 1, :, 0] = np.sum(np.conj(f2) * f1, axis=1) * dx * w
        steps[i + 1, :, 1] = np.sum(np.conj(f2) * k * f1, axis=1) * dx * w
        if (i + 1) in slot:
            record_samples(i + 1, sfft.ifft(f1, axis=1, norm="ortho"), sfft.ifft(f2, axis=1, norm="ortho"))
    # trajectories that diverged late still contributed earlier; drop them everywhere
    keep = alive.astype(float)
    rec = BatchRecord(
        samples=np.einsum("sbj,b->sj", samples, keep),
        steps=np.einsum("nbj,b->nj", steps, keep),
        force=force @ keep,
        n_traj=B,
        n_divergent=int(B - alive.sum()),
        leakage=leak,
    )
    finals = None
    if keep_states:
        finals = [TrajectoryPair(sfft.ifft(f1[j], norm="ortho"), sfft.ifft(f2[j], norm="ortho"),
                                 math.exp(logw[j]), not alive[j]) for j in range(B)]
    return rec, finals


def propagate_pair(potential: Potential, pair0: TrajectoryPair, noises: NoisePair, grid: GridSpec,
                   mass: float = 1.0) -> TrajectoryPair:
    """Propagate one pair (first row of ``noises``) to ``grid.t_max``."""
    if np.max(np.abs(pair0.psi1 - pair0.psi2)) > 0:
        raise ValidationError("pair propagation starts from identical branches")
    one = NoisePair(noises.xi[:1], noises.nu[:1], noises.seed, noises.first_index, noises.lam,
                    noises.counterterm)
    _, finals = _propagate(potential, pair0.psi1, one, grid, mass, [], keep_states=True)
    fin = finals[0]
    dx = grid.dx
    n0 = math.sqrt(np.sum(np.abs(pair0.psi1) ** 2) * dx)
    return TrajectoryPair(fin.psi1 * n0, fin.psi2 * n0, fin.weight, fin.divergent)


@dataclass(frozen=True)
class EnsembleRun:
    grid: GridSpec
    sample_steps: tuple
    blocks: list  # BatchRecord per batch, in trajectory-index order
    seed: int
    n_traj: int
    batch_size: int
    lam: float
    static: str

    @property
    def sample_times(self) -> np.ndarray:
        return self.grid.dt * np.asarray(self.sample_steps)

    @property
    def n_divergent(self) -> int:
        return sum(b.n_divergent for b in self.blocks)

    @property
    def divergent_fraction(self) -> float:
        return self.n_divergent / self.n_traj

    @property
    def leakage(self) -> float:
        return max(b.leakage for b in self.blocks)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "n_traj": self.n_traj,
            "batch_size": self.batch_size,
            "trajectory_seeds": f"SeedSequence([{self.seed}, index]) for index in 0..{self.n_traj - 1}",
            "grid": asdict(self.grid),
            "lam": self.lam,
            "static": self.static,
            "sample_steps": list(self.sample_steps),
            "n_divergent": self.n_divergent,
            "max_leakage": self.leakage,
        }


def run_ensemble(potential: Potential, state0: GaussianState, kernels: KernelTable, grid: GridSpec,
                 n_traj: int, seed: int, sample_steps: Sequence[int] = None, mass: float = 1.0,
                 lam: Optional[float] = None, static: str = "hamiltonian", renormalization: float = 0.0,
                 batch_size: int = 100, threads: int = 1, boost: float = 0.0) -> EnsembleRun:
    """Propagate ``n_traj`` pairs in fixed batches keyed by trajectory index.

    ``boost`` multiplies the initial wavefunction by exp(-i M u x) while the
    noises stay keyed by the same indices (common random numbers).
    The output does not depend on ``threads``.
    """
    if n_traj < 1 or batch_size < 1:
        raise ValidationError("need n_traj >= 1 and batch_size >= 1")
    design = design_noise(kernels, grid, lam, static, renormalization)
    psi0 = wavefunction(state0, grid) * np.exp(-1j * mass * boost * grid.x)
    if sample_steps is None:
        sample_steps = np.linspace(0, grid.n_steps, 21).round().astype(int)
    sample_steps = tuple(int(s) for s in sample_steps)
    starts = list(range(0, n_traj, batch_size))

    def work(start):
        cnt = min(batch_size, n_traj - start)
        noise = sample_noise(design, grid.n_steps, grid.dt, seed, start, cnt)
        return _propagate(potential, psi0, noise, grid, mass, sample_steps)[0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            blocks = list(ex.map(work, starts))
    else:
        blocks = [work(s) for s in starts]
    return EnsembleRun(grid, sample_steps, blocks, seed, n_traj, batch_size, design.lam, static)


def jackknife(blocks: Sequence[tuple], estimator: Callable) -> tuple:
    """Block jackknife of ``estimator(*totals)``; blocks is a list of tuples of arrays."""
    nb = len(blocks)
    totals = [np.sum(np.stack([b[i] for b in blocks]), axis=0) for i in range(len(blocks[0]))]
    est = estimator(*totals)
    if nb < 2:
        return est, np.full_like(np.asarray(est, float), np.nan)
    loo = np.stack([np.asarray(estimator(*[t - b[i] for i, t in enumerate(totals)]), float) for b in blocks])
    se = np.sqrt((nb - 1) / nb * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return est, se


@dataclass(frozen=True)
class EnsembleMoments:
    times: np.ndarray
    moments: np.ndarray  # (n_samples, 5): R, P, R2, P2, C (raw, C = <{R,P}>/2)
    stderr: np.ndarray
    trace: np.ndarray  # mean trace of the averaged pair
    trace_err: np.ndarray
    n_traj: int
    n_divergent: int
    divergent_fraction: float
    reliable: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# stochastic-unraveling ensemble moments (natural units)\n")
        buf.write("# moments are Re Tr[A rho]/Tr[rho] of the averaged pair; *_se are block-jackknife errors\n")
        buf.write(f"# n_traj = {self.n_traj}, divergent = {self.n_divergent}, reliable = {self.reliable}\n")
        names = ("R", "P", "R2", "P2", "C")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", *names, *(n + "_se" for n in names), "trace", "trace_se"])
        for i, t in enumerate(self.times):
            w.writerow([f"{v:.12e}" for v in (t, *self.moments[i], *self.stderr[i], self.trace[i],
                                                   self.trace_err[i])])
        return buf.getvalue()


def ensemble_reduce(run: EnsembleRun, min_traj: int = 100) -> EnsembleMoments:
    if run.n_traj < min_traj:
        raise ValidationError(f"ensemble reduction needs at least {min_traj} trajectories")
    cnt = np.array([[b.n_traj - b.n_divergent] for b in run.blocks], float)
    blocks = [(b.samples, c) for b, c in zip(run.blocks, cnt)]

    def moments(S, _):
        return (S[:, 1:] / S[:, :1]).real

    def trace(S, n):
        return (S[:, 0] / n[0]).real

    with np.errstate(invalid="ignore", divide="ignore"):  # nan where every trajectory diverged
        mom, se = jackknife(blocks, moments)
        tr, tre = jackknife(blocks, trace)
    frac = run.divergent_fraction
    return EnsembleMoments(run.sample_times, mom, se, tr, tre, run.n_traj, run.n_divergent, frac,
                           frac <= MAX_DIVERGENT_FRACTION)


def _bath_impulse(steps, force, dt):
    """G(t_k) = <P>(t_k) - <P>(0) - int_0^t_k F_sys dt (midpoint rule, same as the kicks)."""
    tr = steps[:, 0]
    P = (steps[:, 1] / tr).real
    F = (force / tr[1:]).real
    return P - P[0] - np.concatenate([[0.0], np.cumsum(F) * dt])


def drift_estimate(times, impulse, window) -> float:
    sel = (times >= window[0] - 1e-12) & (times <= window[1] + 1e-12)
    return float(np.polyfit(times[sel], impulse[sel], 1)[0])


@dataclass(frozen=True)
class ProbeRow:
    label: str
    u: float
    defect: float
    stderr: float  # block jackknife
    numerical_error: float  # step-halving estimate (control row only)
    divergent_fraction: float

    @property
    def total_error(self) -> float:
        return math.hypot(self.stderr, self.numerical_error)


@dataclass(frozen=True)
class ProbeTable:
    rows: list
    ratio: float  # defect(u_last) / defect(u_first)
    ratio_err: float
    u_ratio: float

    def bath_rows(self):
        return [r for r in self.rows if r.label == "bath"]

    def control(self):
        return next((r for r in self.rows if r.label == "control"), None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# boost defect of the stochastic ensemble: drift of <P>_A - <P>_B - int (F_A - F_B) dt\n")
        buf.write("# stderr: block jackknife over common-random-number batches; numerical_error: control spread under dt/2 and 2x grid points\n")
        buf.write(f"# linearity: defect ratio {self.ratio:.6f} +- {self.ratio_err:.6f} for u ratio {self.u_ratio:g}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("label", "u", "defect", "stderr", "numerical_error", "divergent_fraction"))
        for r in self.rows:
            w.writerow([r.label, f"{r.u:.12e}", f"{r.defect:.12e}", f"{r.stderr:.12e}",
                        f"{r.numerical_error:.12e}", f"{r.divergent_fraction:.6f}"])
        return buf.getvalue()


def _defect_blocks(run_a: EnsembleRun, run_b: EnsembleRun):
    if run_a.n_traj != run_b.n_traj or run_a.batch_size != run_b.batch_size:
        raise ValidationError("runs must share trajectory indices")
    return [(a.steps, a.force, b.steps, b.force) for a, b in zip(run_a.blocks, run_b.blocks)]


def _defect(t, dt, window):
    def est(sa, fa, sb, fb):
        return drift_estimate(t, _bath_impulse(sa, fa, dt) - _bath_impulse(sb, fb, dt), window)
    return est


def boost_defect_estimate(run_a: EnsembleRun, run_b: EnsembleRun, window) -> tuple:
    """Drift of the bath impulse, boosted run minus unboosted run, with jackknife error.

    The boosted image of the unboosted run has the same bath-impulse drift
    as the unboosted run itself, so the difference is the defect.
    """
    est = _defect(run_a.grid.times, run_a.grid.dt, window)
    return jackknife(_defect_blocks(run_a, run_b), est)


def _zero_kernels(grid: GridSpec, beta: float) -> KernelTable:
    z = np.zeros(grid.n_steps + 1)
    return KernelTable(grid.times, z, z.copy(), beta=beta)


def anharmonic_boost_probe(potential: Potential, state0: GaussianState, kernels: KernelTable, grid: GridSpec,
                           us: Sequence[float], n_traj: int, seed: int, window, mass: float = 1.0,
                           control: bool = True, threads: int = 1, **run_kw) -> ProbeTable:
    """Boost defect of the averaged dynamics for each u, plus a zero-coupling control row.

    Trajectory A starts boosted (exp(-i M u x)) in the co-moving potential;
    trajectory B is the image of the unboosted run. Both use the same noise
    indices. The defect is the plateau drift of the bath impulse,
    <P>_A - <P>_B minus the system-force integral difference. The control row
    repeats the comparison without bath at (dt, n), (dt/2, n) and (dt, 2n);
    its numerical error is the largest deviation from the first.
    """
    if len(us) < 1:
        raise ValidationError("need at least one boost velocity")
    kw = dict(mass=mass, threads=threads, **run_kw)
    ref = run_ensemble(potential, state0, kernels, grid, n_traj, seed, **kw)
    rows, runs = [], []
    for u in us:
        a = run_ensemble(potential.moving(-u), state0, kernels, grid, n_traj, seed, boost=u, **kw)
        d, e = boost_defect_estimate(a, ref, window)
        runs.append(a)
        rows.append(ProbeRow("bath", u, float(d), float(e), 0.0,
                             max(a.divergent_fraction, ref.divergent_fraction)))
    ratio, ratio_err = float("nan"), float("nan")
    if len(us) >= 2:
        est = _defect(grid.times, grid.dt, window)
        blocks = [b1 + b2 for b1, b2 in zip(_defect_blocks(runs[-1], ref), _defect_blocks(runs[0], ref))]
        r, re = jackknife(blocks, lambda *a: est(*a[:4]) / est(*a[4:]))
        ratio, ratio_err = float(r), float(re)
    if control:
        u = us[-1]
        kw0 = {k: v for k, v in kw.items() if k not in ("renormalization", "lam", "static", "batch_size")}
        variants = (grid,
                    GridSpec(grid.x_min, grid.x_max, grid.n_points, grid.dt / 2, grid.t_max, grid.mask_width),
                    GridSpec(grid.x_min, grid.x_max, 2 * grid.n_points, grid.dt, grid.t_max, grid.mask_width))
        vals = []
        for g in variants:
            k0 = _zero_kernels(g, kernels.beta)
            # without noise every trajectory is identical: two one-trajectory blocks suffice
            r0 = run_ensemble(potential, state0, k0, g, 2, seed, batch_size=1, **kw0)
            a0 = run_ensemble(potential.moving(-u), state0, k0, g, 2, seed, batch_size=1, boost=u, **kw0)
            vals.append(boost_defect_estimate(a0, r0, window))
        d, e = vals[0]
        num = max(abs(d - v[0]) for v in vals[1:])
        rows.append(ProbeRow("control", u, float(d), float(e), float(num), 0.0))
    return ProbeTable(rows, ratio, ratio_err, us[-1] / us[0] if len(us) >= 2 else float("nan"))


def manifest_json(run: EnsembleRun) -> str:
    return json.dumps(run.manifest(), indent=2, sort_keys=True) + "\n"


def oracle_probe_defect(model, state0: GaussianState, u: float, grid: GridSpec, window) -> float:
    """The probe's estimator evaluated on exact composite means (harmonic trap only).

    Uses the same midpoint force quadrature as the stochastic kicks.
    """
    from .oracle import propagate_rows

    M, w2 = model.sys.mass, model.sys.omega**2
    prop = propagate_rows(model, 0.0, grid.dt / 2, 2 * grid.n_steps + 1)
    a = prop.mean(np.array([state0.mean[0], state0.mean[1] - M * u]), trap_velocity=-u)
    b = prop.mean(state0.mean)
    tt = prop.times
    R0 = model.sys.R0
    dp = a[::2, 1] - b[::2, 1]
    fa = -M * w2 * (a[1::2, 0] - (R0 - u * tt[1::2]))
    fb = -M * w2 * (b[1::2, 0] - R0)
    g = dp - dp[0] - np.concatenate([[0.0], np.cumsum(fa - fb) * grid.dt])
    return drift_estimate(grid.times, g, window)
