"""Batch front-end: one subcommand per diagnostic.

Every command accepts ``--config``, ``--seed``, ``--out-dir`` and ``--threads``,
writes its CSV outputs plus ``resolved_config.ini`` and ``summary.json`` to the
output directory, and exits 0 iff every check passed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import bath as bathmod
from . import hpz, oracle, stochastic, symmetry
from .config import RunConfig, load_config
from .core import (CoefficientTrace, DiscreteBath, GaussianState, SpectralDensity, SystemParams,
                   ValidationError, discretize, empty_bath)


class Checks:
    """Ordered pass/fail record for one run."""

    def __init__(self):
        self.items = {}

    def add(self, name: str, passed: bool, value, tolerance: str):
        v = float(value) if isinstance(value, (int, float, np.floating, np.integer)) else value
        if isinstance(v, float) and not math.isfinite(v):
            v = str(v)
        self.items[name] = {"passed": bool(passed), "value": v, "tolerance": tolerance}

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.items.values())


# ---------------------------------------------------------------- builders

def system_params(cfg: RunConfig, omega: Optional[float] = None) -> SystemParams:
    m = cfg["model"]
    return SystemParams(m["mass"], m["omega"] if omega is None else omega, m["R0"])


def spectral_density(cfg: RunConfig, gamma: Optional[float] = None) -> SpectralDensity:
    m = cfg["model"]
    return SpectralDensity("OhmicDrude", m["gamma"] if gamma is None else gamma, m["omega_c"], m["mass"],
                           m["omega_max"])


def beta(cfg: RunConfig) -> float:
    kT = cfg.get("model", "kT")
    if kT < 0:
        raise ValidationError("kT must be non-negative")
    return math.inf if kT == 0 else 1.0 / kT


def build_bath(cfg: RunConfig, gamma: Optional[float] = None, n_modes: Optional[int] = None) -> DiscreteBath:
    spec = spectral_density(cfg, gamma)
    b = beta(cfg)
    if spec.gamma == 0:
        return empty_bath(b)
    return discretize(spec, n_modes or cfg.get("model", "n_modes"), b)


def build_model(cfg: RunConfig, **kw) -> oracle.CompositeModel:
    omega = kw.pop("omega", None)
    return oracle.CompositeModel(system_params(cfg, omega), build_bath(cfg, **kw))


def time_grid(t_max: float, dt: float) -> np.ndarray:
    n = int(round(t_max / dt))
    return dt * np.arange(n + 1)


def initial_state(cfg: RunConfig) -> GaussianState:
    s, m = cfg["state"], cfg["model"]
    return GaussianState.coherent(s["q0"], s["p0"], m["mass"], max(m["omega"], 1.0))


def window(cfg: RunConfig, section: str = "grid"):
    g = cfg[section]
    end = g.get("window_end", g.get("t_max"))
    return (g["window_start"], end)


def _fmt(v) -> str:
    return f"{v:.12e}"


def write_csv(path: Path, header_lines, columns, rows):
    buf = io.StringIO()
    for h in header_lines:
        buf.write(f"# {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())


# ---------------------------------------------------------------- commands

def cmd_oracle(cfg: RunConfig, out: Path, args) -> Checks:
    model = build_model(cfg)
    g = cfg["grid"]
    n_samples = 41
    dt = g["t_max"] / (n_samples - 1)
    full0 = oracle.thermal_composite_state(model, initial_state(cfg))
    traj = oracle.evolve_grid(model, full0, dt, n_samples - 1)
    times = dt * np.arange(n_samples)
    free = model.sys.omega == 0
    quantity = oracle.Quantity(cfg.get("run", "check"))
    drift = oracle.noether_drift(model, traj, times, quantity)
    rows = []
    for t, st in zip(times, traj):
        red = oracle.reduce_to_system(st)
        mom = hpz.moments_from_gaussian(red.mean, red.cov)
        e = oracle.conserved_value(model, st, t, "energy")
        pt = oracle.conserved_value(model, st, t, "total_momentum") if free else math.nan
        bc = oracle.conserved_value(model, st, t, "boost_charge") if free else math.nan
        rows.append([t, *mom, e, pt, bc])
    rows = [r + [d] for r, d in zip(rows, drift)]
    write_csv(out / "oracle.csv",
              [f"composite oracle: system + {model.bath.n_modes} bath modes = {model.n_dof} degrees of freedom",
               "reduced raw moments R, P, R2, P2, C = <{R,P}>/2; conserved quantities of the composite",
               "total_momentum and boost_charge are nan unless omega = 0",
               f"drift: relative drift of {quantity.value}"],
              ["time", *hpz.MOMENT_NAMES, "energy", "total_momentum", "boost_charge", "drift"], rows)
    c = Checks()
    c.add(f"noether_{quantity.value}", drift.max() < 1e-9, drift.max(), "< 1e-9")
    return c


def _extract(cfg: RunConfig, model=None):
    model = model or build_model(cfg)
    g = cfg["grid"]
    grid = time_grid(g["t_max"], g["dt"])
    prop = hpz.padded_propagation(model, grid)
    trace = hpz.extract_coefficients(model, hpz.default_initial_set(model.sys), grid, prop=prop)
    return model, grid, prop, trace


def cmd_extract(cfg: RunConfig, out: Path, args) -> Checks:
    model, grid, prop, trace = _extract(cfg)
    (out / "coefficients.csv").write_text(trace.to_csv())
    win = window(cfg)
    summ = hpz.markovian_summary(trace, win)
    exact = hpz.exact_coefficients(prop, model.sys)
    c = Checks()
    dev = max(float(np.max(np.abs(getattr(trace, n) - getattr(exact, n)[2:-2]))) for n in
              ("kappa", "gamma", "gamma_h", "gamma_f"))
    c.add("extraction_vs_exact_generator", dev < 1e-4, dev, "< 1e-4 absolute")
    # held-out closure
    held = GaussianState.squeezed(-0.4, 0.7 * model.sys.mass, model.sys.mass, max(model.sys.omega, 1.0), r=-0.3)
    ref = hpz.oracle_moments(prop, held)[2:-2]
    rec = hpz.propagate_reduced(trace, held, grid, model.sys)
    closure = float(np.max(np.abs(rec - ref)) / np.max(np.abs(ref)))
    c.add("hpz_closure_held_out", closure < 1e-5, closure, "< 1e-5 relative sup-norm")
    st = initial_state(cfg)
    mom = hpz.oracle_moments(prop, st)[2:-2]
    oscill = model.sys.omega > 0
    rate = hpz.fit_decay_rate(grid, mom[:, 1], win, oscillating=oscill)
    expected = summ.gamma_f if oscill else 2 * summ.gamma_f
    rel = abs(rate - expected) / expected if expected else math.inf
    c.add("momentum_decay_vs_gamma_f", rel < 0.01, rel, "< 1% relative")
    info = {
        "plateau": {"gamma_f": summ.gamma_f, "gamma_h": summ.gamma_h, "kappa": summ.kappa, "gamma": summ.gamma,
                    "plateau_quality": summ.plateau_quality},
        "fitted_decay_rate": rate,
        "delta_omega_sq_plateau": float(np.mean(trace.delta_omega_sq(model.sys, model.bath.renormalization())[
            (grid >= win[0]) & (grid <= win[1])])),
        "n_unreliable": int(np.sum(trace.unreliable())),
    }
    (out / "markovian_summary.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return c


def cmd_boost_defect(cfg: RunConfig, out: Path, args) -> Checks:
    model, grid, prop, trace = _extract(cfg)
    st = initial_state(cfg)
    win = window(cfg)
    plateau = hpz.markovian_summary(trace, win).gamma_f
    tol = cfg.get("boost", "tolerance")
    c = Checks()
    means = {}
    for u in cfg.get("boost", "u"):
        rep = symmetry.boost_defect(model, st, u, trace, grid, prop=prop)
        (out / f"boost_defect_u{u:g}.csv").write_text(rep.to_csv())
        sel = trace.gamma_f > 0.1 * plateau
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.abs(rep.measured_defect[sel] - rep.predicted_defect[sel]) / np.abs(rep.predicted_defect[sel])
        worst = float(np.max(rel)) if rel.size else math.inf
        c.add(f"identity_u{u:g}", worst < tol, worst, f"< {tol:g} relative where gamma_f > 0.1 plateau")
        cd = float(np.max(rep.covariance_defect_norm))
        c.add(f"covariance_defect_u{u:g}", cd < 1e-8, cd, "< 1e-8")
        means[u] = rep.measured_defect / u
    us = sorted(means)
    if len(us) >= 2:
        a, b = means[us[0]], means[us[-1]]
        sel = trace.gamma_f > 0.1 * plateau
        lin = float(np.max(np.abs(b[sel] - a[sel]) / np.abs(a[sel])))
        c.add("linearity_in_u", lin < 0.01, lin, "< 1%")
    return c


def cmd_translation_defect(cfg: RunConfig, out: Path, args) -> Checks:
    model = build_model(cfg)
    g = cfg["grid"]
    grid = time_grid(g["t_max"], g["dt"])
    prop = hpz.padded_propagation(model, grid)
    st = initial_state(cfg)
    c = Checks()
    cols, data = ["time"], [grid]
    for a in cfg.get("translation", "a"):
        d = symmetry.translation_defect(model, st, a, grid, prop=prop)
        slip = symmetry.translation_defect(model, st, a, grid, prop=prop, shift_bath=False)
        cols += [f"defect_a{a:g}", f"system_only_a{a:g}"]
        data += [d, slip]
        c.add(f"translation_a{a:g}", d.max() < 1e-9, d.max(), "< 1e-9")
    write_csv(out / "translation_defect.csv",
              ["translation covariance defect: sup-norm of mean and covariance differences",
               "defect_*: system, trap anchor and bath equilibrium translated together (checked)",
               "system_only_*: bath left in place (diagnostic, shows the initial-slip transient)"],
              cols, zip(*data))
    return c


def cmd_timeshift_defect(cfg: RunConfig, out: Path, args) -> Checks:
    model = build_model(cfg)
    ts = cfg["timeshift"]
    grid = time_grid(ts["t_max"], cfg.get("grid", "dt"))
    d = symmetry.time_shift_defect(model, initial_state(cfg), ts["tau"], grid)
    write_csv(out / "timeshift_defect.csv",
              [f"generator at t + tau minus generator at t on the state at t + tau; tau = {ts['tau']!r}"],
              ["time", "defect"], zip(grid, d))
    c = Checks()
    peak = float(d.max())
    late = float(d[grid >= ts["window_start"]].max()) if np.any(grid >= ts["window_start"]) else math.nan
    if model.bath.n_modes == 0:
        c.add("zero_coupling", peak == 0.0 or peak < 1e-12, peak, "< 1e-12")
    else:
        c.add("plateau_below_1pct_of_transient", late < 0.01 * peak, late / peak, "< 0.01")
    return c


def cmd_scan(cfg: RunConfig, out: Path, args) -> Checks:
    sc = cfg["scan"]
    gammas = list(sc["gammas"])
    models = [build_model(cfg, gamma=gm, n_modes=sc["n_modes"]) for gm in gammas]
    grid = time_grid(sc["t_max"], cfg.get("grid", "dt"))
    tab = symmetry.defect_vs_damping_scan(models, gammas, sc["u"], initial_state(cfg), grid,
                                          (sc["window_start"], sc["t_max"]))
    (out / "scan.csv").write_text(tab.to_csv())
    c = Checks()
    zero = [abs(r[2] * r[1]) for r in tab.rows if r[0] == 0]
    if zero:
        c.add("zero_damping_defect", max(zero) < 1e-9, max(zero), "< 1e-9")
    c.add("linearity_in_u", tab.linearity < 0.01, tab.linearity, "< 1%")
    per = {}
    for r in tab.rows:
        per.setdefault(r[0], r[2])
    vals = [per[gm] for gm in sorted(per)]
    c.add("monotone_in_gamma", bool(np.all(np.diff(vals) > 0)), float(np.min(np.diff(vals))), "> 0")
    c.add("gamma_exponent", abs(tab.exponent - 2.0) <= 0.2, tab.exponent, "2.0 +- 0.2")
    return c


def cmd_fom(cfg: RunConfig, out: Path, args) -> Checks:
    f = cfg["fom"]
    gamma = args.gamma if getattr(args, "gamma", None) is not None else f["gamma_hz"]
    temp = args.temp if getattr(args, "temp", None) is not None else f["temp_k"]
    v = bathmod.fom(gamma, temp)
    print(f"{v:.2g}")
    entries = list(bathmod.DEFAULT_PLATFORMS) if f["defaults"] else []
    entries.append(bathmod.PlatformEntry("user", temp, gamma))
    rows = bathmod.platform_table(entries, out)
    c = Checks()
    c.add("fom_finite", math.isfinite(v) and v >= 0, v, "finite, >= 0")
    c.add("within_leading_order", v <= 1.0, v, "<= 1 (above: capped in table)")
    (out / "fom.json").write_text(json.dumps({"gamma_hz": gamma, "temp_k": temp, "fom": v,
                                              "capped": [r.name for r in rows if r.capped]},
                                             indent=2, sort_keys=True) + "\n")
    return c


def cmd_thresholds(cfg: RunConfig, out: Path, args) -> Checks:
    t = cfg["thresholds"]
    c = Checks()
    try:
        th = bathmod.driving_thresholds(t["gamma_hz"], t["temp_k"], t["omega_hz"])
        ok = True
    except ArithmeticError:
        ok = False
        th = None
    c.add("ratio_identity", ok, 0.0 if ok else 1.0, "1e-12 relative")
    if th is not None:
        (out / "thresholds.json").write_text(json.dumps(
            {"mu_boost": th.mu_boost, "mu_entanglement": th.mu_entanglement, "ratio": th.ratio, **t},
            indent=2, sort_keys=True) + "\n")
    return c


def cmd_fdt_check(cfg: RunConfig, out: Path, args) -> Checks:
    b = build_bath(cfg)
    spec = spectral_density(cfg)
    bt = beta(cfg)
    c = Checks()
    v_disc = bathmod.fdt_check(b, bt)
    c.add("discrete_thermal", v_disc < bathmod.FDT_TOLERANCE, v_disc, "< 1e-10")
    if spec.gamma > 0:
        v_cont = bathmod.fdt_check(spec, bt)
        c.add("continuum", v_cont < bathmod.FDT_TOLERANCE, v_cont, "< 1e-10")
    scale = cfg.get("fdt", "fault_scale")
    if b.n_modes and scale != 1.0:
        # momentum variances of the bath scaled away from thermal must be flagged
        model = oracle.CompositeModel(system_params(cfg), b)
        cov = np.array(oracle.thermal_composite_state(model, GaussianState.coherent()).cov[2:, 2:])
        cov[1::2, 1::2] *= scale
        v_fault = bathmod.fdt_check(b, bt, bath_cov=cov)
        c.add("injected_fault_flagged", v_fault > bathmod.FDT_TOLERANCE, v_fault, "> 1e-10 (flagged)")
    (out / "fdt.json").write_text(json.dumps({k: v["value"] for k, v in c.items.items()}, indent=2,
                                             sort_keys=True) + "\n")
    return c


def cmd_unravel(cfg: RunConfig, out: Path, args) -> Checks:
    un = cfg["unravel"]
    seed = cfg.get("run", "seed")
    grid = stochastic.GridSpec(un["x_min"], un["x_max"], un["n_points"], un["dt"], un["t_max"])
    b = build_bath(cfg, n_modes=un["n_modes"])
    kern = bathmod.kernels(b, beta(cfg), grid.times)
    M = cfg.get("model", "mass")
    st = initial_state(cfg)
    pot = stochastic.Potential(un["a2"], un["a4"])
    kw = dict(mass=M, lam=un["lam"], static=un["static"], renormalization=b.renormalization(),
              batch_size=un["batch_size"], threads=args.threads)
    c = Checks()
    if un["mode"] == "gate":
        if un["a4"] != 0:
            raise ValidationError("the harmonic gate needs a4 = 0")
        steps = np.linspace(0, grid.n_steps, un["n_samples"] + 1).round().astype(int)[1:]
        run = stochastic.run_ensemble(pot, st, kern, grid, un["n_traj"], seed, sample_steps=steps, **kw)
        em = stochastic.ensemble_reduce(run)
        (out / "moments.csv").write_text(em.to_csv())
        (out / "manifest.json").write_text(stochastic.manifest_json(run))
        sys_p = SystemParams(M, math.sqrt(un["a2"] / M), 0.0)
        prop = oracle.propagate_rows(oracle.CompositeModel(sys_p, b), 0.0, grid.dt, grid.n_steps + 1)
        ref = hpz.moments_from_gaussian(prop.mean(st.mean), prop.cov(st.cov))[steps]
        z = np.abs(em.moments[:, :2] - ref[:, :2]) / em.stderr[:, :2]
        write_csv(out / "gate.csv", ["stochastic vs oracle first moments; z = |difference| / jackknife error"],
                  ["time", "R", "R_oracle", "R_se", "P", "P_oracle", "P_se"],
                  [[t, em.moments[i, 0], ref[i, 0], em.stderr[i, 0], em.moments[i, 1], ref[i, 1], em.stderr[i, 1]]
                   for i, t in enumerate(em.times)])
        c.add("harmonic_gate_max_z", float(np.max(z)) <= 3.0, float(np.max(z)), "<= 3 jackknife errors")
        c.add("divergent_fraction", em.divergent_fraction < 0.05, em.divergent_fraction, "< 5%")
        return c
    if un["mode"] != "probe":
        raise ValidationError(f"unknown unravel mode {un['mode']!r}")
    us = list(un["u"])
    win = (un["window_start"], un["t_max"])
    tab = stochastic.anharmonic_boost_probe(pot, st, kern, grid, us, un["n_traj"], seed, win, **kw)
    (out / "probe.csv").write_text(tab.to_csv())
    man = {"seed": seed, "n_traj": un["n_traj"], "batch_size": un["batch_size"], "u": us, "window": list(win),
           "grid": vars(grid) if hasattr(grid, "__dict__") else str(grid)}
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n")
    ctrl = tab.control()
    c.add("control_zero_2sigma", abs(ctrl.defect) <= 2 * ctrl.total_error, ctrl.defect,
          f"|d| <= 2 sigma, sigma = {ctrl.total_error:.3e}")
    first = tab.bath_rows()[0]
    c.add("bath_nonzero_3sigma", abs(first.defect) >= 3 * first.stderr, first.defect / first.stderr, ">= 3 sigma")
    if not math.isnan(tab.ratio):
        dev = abs(tab.ratio - tab.u_ratio)
        c.add("linear_in_u_2sigma", dev <= 2 * tab.ratio_err, dev / tab.ratio_err, "<= 2 sigma")
    c.add("divergent_fraction", max(r.divergent_fraction for r in tab.rows) < 0.05,
          max(r.divergent_fraction for r in tab.rows), "< 5%")
    if un["a4"] == 0:
        model = oracle.CompositeModel(SystemParams(M, math.sqrt(un["a2"] / M), 0.0), b)
        ref = stochastic.oracle_probe_defect(model, st, first.u, grid, win)
        c.add("harmonic_vs_oracle_2sigma", abs(first.defect - ref) <= 2 * first.stderr,
              (first.defect - ref) / first.stderr, "<= 2 sigma")
    return c


COMMANDS: dict[str, Callable] = {
    "oracle": cmd_oracle,
    "extract": cmd_extract,
    "boost-defect": cmd_boost_defect,
    "translation-defect": cmd_translation_defect,
    "timeshift-defect": cmd_timeshift_defect,
    "scan": cmd_scan,
    "fom": cmd_fom,
    "thresholds": cmd_thresholds,
    "unravel": cmd_unravel,
    "fdt-check": cmd_fdt_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="galboost", description="Galilean covariance diagnostics for "
                                "Caldeira-Leggett reduced dynamics.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None, help="sectioned key = value file")
        sp.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
        sp.add_argument("--out-dir", type=str, default=".", help="output directory (default: cwd)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        if name == "fom":
            sp.add_argument("--gamma", type=float, default=None, help="damping rate in Hz")
            sp.add_argument("--temp", type=float, default=None, help="temperature in K")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(run={"seed": args.seed})
        if args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.ini").write_text(cfg.echo())
        checks = COMMANDS[args.command](cfg, out, args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = {"command": args.command, "scenario": cfg.get("run", "scenario"), "checks": checks.items, "all_passed": checks.all_passed}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for name, item in checks.items.items():
        print(f"{'PASS' if item['passed'] else 'FAIL'} {name}: {item['value']} ({item['tolerance']})",
              file=sys.stderr)
    return 0 if checks.all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
