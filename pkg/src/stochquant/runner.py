"""
Experiment execution, verdicts and run outputs.

Each experiment kind reads a validated :class:`~stochquant.scenario.Scenario`,
writes columnar CSV data through an :class:`OutputWriter` and records
:class:`Verdict` rows.  :func:`run_scenario` wraps an experiment with the
manifest, verdict table and optional figures, and maps outcomes to exit
codes.
"""
from __future__ import annotations

import copy
import hashlib
import json
import platform
import shutil
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .classical import integrate_hamilton
from .fields import VortexError, WaveFunction, polar_decompose
from .locality import (OUT_OF_SCOPE, ProductScenario, check_decomposition,
                       check_transition_separability, marginal_invariance_test)
from .scenario import (Scenario, initial_params, load, make_grid, make_system,
                       read_number, validate)
from .schrodinger import (PropagationError, PropagatorConfig, analytic_state, iter_propagate,
                          l2_distance, product_state, product_system)
from .stats import (KS_COEFF, OBSERVABLES, ensemble_stats, expectation_compare, fisher_bound,
                    fit_scaling, ks_band, ks_distance, momentum_samples,
                    uncertainty_product)
from .stochastic import (RNG_SCHEME, FieldFrames, ModelParams, evolve_ensemble,
                         information_balance_residual, sample_deviation,
                         sign_averaged_balance_residual, spatial_balance_residual)

EXIT_OK = 0
EXIT_VERDICT = 1
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4

NUMERICAL_ERRORS = (PropagationError, VortexError, FloatingPointError)


@dataclass
class Verdict:
    name: str
    value: float
    tolerance: str
    passed: bool
    z: Optional[float] = None
    note: str = ""

    def as_dict(self):
        d = asdict(self)
        for key in ("value", "z"):
            v = d[key]
            if isinstance(v, (float, np.floating)) and not np.isfinite(v):
                d[key] = str(v)
            elif v is not None:
                d[key] = float(v)
        d["passed"] = bool(self.passed)
        return d


class OutputWriter:
    """Writes run files and keeps the index that goes into the manifest."""

    def __init__(self, out_dir: Path, data: bool = True):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.data = data
        self.files: List[Dict[str, Any]] = []

    def _register(self, name, kind, description, columns=None):
        if any(f["path"] == name for f in self.files):
            raise ValueError(f"output {name} written twice")
        entry = {"path": name, "kind": kind, "description": description}
        if columns is not None:
            entry["columns"] = columns
        self.files.append(entry)

    def csv(self, name: str, columns: Dict[str, Any], description: str,
            docs: Optional[Dict[str, str]] = None):
        """Write equal-length columns with full float precision.

        String columns are allowed; numbers are written with ``%.17g``.
        """
        if not self.data:
            return
        keys = list(columns)
        cols = [np.atleast_1d(np.asarray(columns[k])) for k in keys]
        n = {c.size for c in cols}
        if len(n) != 1:
            raise ValueError(f"{name}: columns have different lengths")
        lines = [",".join(keys)]
        for row in zip(*cols):
            lines.append(",".join(_fmt(v) for v in row))
        (self.out_dir / name).write_text("\n".join(lines) + "\n")
        docs = docs or {}
        self._register(name, "csv", description, {k: docs.get(k, "") for k in keys})

    def json(self, name: str, payload, description: str):
        (self.out_dir / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        self._register(name, "json", description)

    def external(self, name: str, kind: str, description: str):
        self._register(name, kind, description)


def _fmt(v):
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


@dataclass
class RunContext:
    scenario: Scenario
    writer: OutputWriter
    workers: int = 1
    verdicts: List[Verdict] = field(default_factory=list)
    figures: List[Dict[str, Any]] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    notes: Dict[str, Any] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.scenario.seed

    @property
    def params(self) -> Dict[str, Any]:
        return self.scenario.params

    def verdict(self, name, value, tolerance, passed, z=None, note=""):
        self.verdicts.append(Verdict(name, float(value), str(tolerance), bool(passed),
                                     None if z is None else float(z), note))

    def figure(self, name: str, kind: str, **data):
        self.figures.append({"name": name, "kind": kind, "data": data})

    def timed(self, label: str):
        return _Timer(self.timings, label)


class _Timer:
    def __init__(self, sink, label):
        self.sink, self.label = sink, label

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.label] = time.perf_counter() - self.t0


def _param(ctx, key, default):
    return ctx.params.get(key, default)


def _state(kind, params, grid, t=0.0, hbar=None):
    p = dict(params)
    if hbar is not None:
        p["hbar"] = hbar
    return analytic_state(kind, p, t, grid)


def _frames_at(psi, system, cfg: PropagatorConfig, times, hbar_eff=None, with_dt_s=False):
    """Polar fields at each requested time from one propagation."""
    steps = [int(round((t - psi.time) / cfg.dt_solver)) for t in times]
    c = PropagatorConfig(cfg.method, cfg.dt_solver, max(steps), cfg.hbar, record_every=1)
    want = set(steps)
    out = {}
    for k, w in enumerate(iter_propagate(psi, system, c)):
        if k in want:
            out[k] = (w, polar_decompose(w, cfg.hbar if hbar_eff is None else hbar_eff,
                                         system=system if with_dt_s else None))
    return [out[k] for k in steps]


# ---------------------------------------------------------------------------
# experiments


def exp_deviation_law(ctx: RunContext):
    """Sampled |dS - dA| against the exponential law with mean |lambda|/2."""
    lambdas = [float(x) for x in _param(ctx, "lambdas", [0.5, 1.0, 2.0])]
    n = int(_param(ctx, "n", 10 ** 6))
    neg = float(_param(ctx, "negative_lambda", -1.0))
    seqs = np.random.SeedSequence(ctx.seed).spawn(len(lambdas) + 1)
    band = KS_COEFF[0.99] / np.sqrt(n)
    rows = {k: [] for k in ("lambda", "n", "mean_abs", "target", "rel_err", "ks", "ks_band")}
    hist = {k: [] for k in ("lambda", "bin_lo", "bin_hi", "empirical", "exponential")}
    for lam, ss in zip(lambdas, seqs):
        d = sample_deviation(lam, np.random.default_rng(ss), n)
        a = np.abs(d.value)
        target = 0.5 * lam
        mean = float(a.mean())
        rel = abs(mean / target - 1)
        ks = ks_distance(a, lambda x, m=target: 1.0 - np.exp(-x / m))
        z = (mean - target) / (target / np.sqrt(n))
        ctx.verdict(f"mean |dS-dA| at lambda={lam:g}", rel, "rel_err < 0.01", rel < 0.01, z)
        ctx.verdict(f"KS vs exponential at lambda={lam:g}", ks, f"< {band:.6g} (99% band)",
                    ks < band)
        for k, v in zip(rows, (lam, n, mean, target, rel, ks, band)):
            rows[k].append(v)
        edges = np.linspace(0.0, 5 * target, 51)
        counts, _ = np.histogram(a, bins=edges)
        hist["lambda"] += [lam] * 50
        hist["bin_lo"] += list(edges[:-1])
        hist["bin_hi"] += list(edges[1:])
        hist["empirical"] += list(counts / (n * np.diff(edges)))
        hist["exponential"] += list((np.exp(-edges[:-1] / target) - np.exp(-edges[1:] / target))
                                    / np.diff(edges))
    d = sample_deviation(neg, np.random.default_rng(seqs[-1]), n)
    frac = float(np.mean(d.value <= 0))
    ctx.verdict(f"deviation carries the sign of lambda={neg:g}", frac, "fraction = 1",
                frac == 1.0)
    ctx.writer.csv("deviation_summary.csv", rows, "deviation law per |lambda|", {
        "lambda": "lambda magnitude", "n": "sample count", "mean_abs": "sample mean of |dS-dA|",
        "target": "|lambda|/2", "rel_err": "|mean/target - 1|",
        "ks": "KS distance to the exponential CDF", "ks_band": "99% KS band 1.63/sqrt(n)"})
    ctx.writer.csv("deviation_histogram.csv", hist, "histogram of |dS-dA| against the law", {
        "empirical": "sample density per bin", "exponential": "exact bin-averaged density"})
    ctx.figure("deviation_histogram.png", "deviation", hist=hist)


def _ensemble_setup(sc: Scenario, dt=None, hbar=None):
    grid, system = sc.grid, sc.system
    model = sc.model if dt is None else ModelParams(sc.model.lambda_mag, dt)
    lam = model.lambda_mag if hbar is None else hbar
    psi = _state(sc.initial_kind, sc.initial, grid, 0.0, hbar=lam)
    dt_solver = min(sc.propagator.dt_solver, model.dt) if sc.propagator else model.dt
    method = sc.propagator.method if sc.propagator else "split-step"
    return grid, system, model, psi, (method, dt_solver, lam)


def _born_run(ctx, sc, dt, sampling, label):
    grid, system, model, psi, (method, dt_solver, lam) = _ensemble_setup(sc, dt)
    # solver frames at the model step so field time and trajectory time match
    dt_solver = model.dt
    steps = int(round(max(sc.checkpoints) / dt_solver))
    cfg = PropagatorConfig(method, dt_solver, steps, lam)
    frames = FieldFrames(psi, system, cfg, hbar_eff=lam)
    with ctx.timed(f"ensemble {label}"):
        ens = evolve_ensemble(frames, system, model, sc.n, ctx.seed, sc.checkpoints,
                              sampling=sampling, workers=ctx.workers)
    refs = _frames_at(psi, system, PropagatorConfig(method, dt_solver, 0, lam),
                      list(ens.times), hbar_eff=lam)
    ks = [ks_distance(ens.positions[k, 0], f.omega, grid) for k, (_, f) in enumerate(refs)]
    return ens, refs, ks


def exp_born_rule(ctx: RunContext):
    """Ensemble position law against |psi(t)|^2 at each checkpoint."""
    sc = ctx.scenario
    n = sc.n
    band = ks_band(n, 0.95)
    ens, refs, ks = _born_run(ctx, sc, sc.model.dt, sc.sampling, "main")
    rows = {"t": [], "dt": [], "sampling": [], "ks": [], "tolerance": []}
    for t, k in zip(ens.times, ks):
        ctx.verdict(f"KS at t={t:.6g} ({sc.sampling}, dt={sc.model.dt:g})", k,
                    f"< {2 * band:.6g} (2x 95% band)", k < 2 * band)
        for key, v in zip(rows, (t, sc.model.dt, sc.sampling, k, 2 * band)):
            rows[key].append(v)
    grid = sc.grid
    dens = {"q": grid.axis(0)}
    for j, (t, (_, f)) in enumerate(zip(ens.times, refs)):
        st = ensemble_stats(ens.positions[j, 0], grid)
        dens[f"density_t{j}"] = np.asarray(f.omega)
        dens[f"histogram_t{j}"] = st.histogram
    ctx.writer.csv("born_density.csv", dens, "grid density and ensemble histogram per checkpoint",
                   {"q": "node coordinate", **{f"density_t{j}": f"|psi|^2 at t={t:.6g}"
                                                for j, t in enumerate(ens.times)},
                    **{f"histogram_t{j}": f"ensemble histogram (bin = dq) at t={t:.6g}"
                       for j, t in enumerate(ens.times)}})
    ctx.figure("born_density.png", "born", density=dens, times=list(ens.times))

    compare_dt = _param(ctx, "compare_dt", None)
    if compare_dt is not None:
        sampling = _param(ctx, "compare_sampling", "stratified")
        coarse = _born_run(ctx, sc, sc.model.dt, sampling, "coarse")[2]
        fine = _born_run(ctx, sc, float(compare_dt), sampling, "fine")[2]
        for t, kc, kf in zip(ens.times, coarse, fine):
            ctx.verdict(f"KS does not increase at t={t:.6g} (dt {sc.model.dt:g} -> "
                        f"{float(compare_dt):g}, {sampling})", kf - kc, "<= 0", kf <= kc)
            for dt, k in ((sc.model.dt, kc), (float(compare_dt), kf)):
                for key, v in zip(rows, (t, dt, sampling, k, float("nan"))):
                    rows[key].append(v)
    ctx.writer.csv("born_ks.csv", rows, "KS distance per checkpoint and run", {
        "t": "checkpoint time", "dt": "model step", "sampling": "initial sampling",
        "ks": "KS distance to |psi(t)|^2", "tolerance": "verdict threshold (nan: refinement row)"})
    ctx.notes["node_events"] = int(ens.node_events)


def exp_fluctuation_scaling(ctx: RunContext):
    """RMS gap between actual and Bohmian trajectories against dt."""
    sc = ctx.scenario
    dts = [float(x) for x in _param(ctx, "dts", [1e-2, 1e-3, 1e-4])]
    T = read_number(_param(ctx, "T", 1.0), "params.T")
    grid, system = sc.grid, sc.system
    lam = sc.model.lambda_mag
    psi = _state(sc.initial_kind, sc.initial, grid, 0.0, hbar=lam)
    rms = []
    for dt in dts:
        model = ModelParams(lam, dt)
        cfg = PropagatorConfig("split-step", dt, int(round(T / dt)), lam)
        frames = list(FieldFrames(psi, system, cfg, hbar_eff=lam))
        with ctx.timed(f"dt={dt:g}"):
            a = evolve_ensemble(frames, system, model, sc.n, ctx.seed, [T], workers=ctx.workers)
            b = evolve_ensemble(frames, system, model, sc.n, ctx.seed, [T], osmotic=False,
                                workers=ctx.workers)
        gap = a.positions[-1, 0] - b.positions[-1, 0]
        if grid.periodic:
            L = grid.extent[0]
            gap = (gap + 0.5 * L) % L - 0.5 * L
        rms.append(float(np.sqrt(np.mean(gap ** 2))))
    fit = fit_scaling(dts, rms)
    lo, hi = _param(ctx, "exponent_range", [0.4, 0.6])
    ctx.verdict("fluctuation exponent", fit.exponent, f"in [{lo}, {hi}]",
                lo <= fit.exponent <= hi, (fit.exponent - 0.5) / fit.stderr
                if fit.stderr > 0 else None, f"stderr {fit.stderr:.3g}")
    ctx.writer.csv("fluctuation_scaling.csv", {"dt": dts, "rms": rms,
                                               "fit": fit.prefactor * np.array(dts) ** fit.exponent},
                   "RMS actual-minus-Bohmian position at T", {
                       "dt": "model step", "rms": "RMS position gap over the ensemble",
                       "fit": "fitted power law"})
    ctx.figure("fluctuation_scaling.png", "scaling", dt=dts, rms=rms,
               exponent=fit.exponent, prefactor=fit.prefactor)


def exp_classical_limit(ctx: RunContext):
    """Ensemble-mean path against the classical path as |lambda| shrinks."""
    sc = ctx.scenario
    lambdas = [float(x) for x in _param(ctx, "lambdas", [1e-1, 1e-2, 1e-3])]
    T = read_number(_param(ctx, "T", 2 * np.pi), "params.T")
    dt = float(_param(ctx, "dt", 1e-3))
    every = int(_param(ctx, "record_every", 10))
    grid, system = sc.grid, sc.system
    q0 = float(sc.initial.get("q0", 0.0))
    p0 = float(sc.initial.get("p0", 0.0))
    steps = int(round(T / dt))
    ct = integrate_hamilton(q0, p0, system, dt, steps * dt, record_every=every)
    cq = np.ravel(ct.q)
    cols = {}
    devs = []
    for lam in lambdas:
        psi = _state(sc.initial_kind, sc.initial, grid, 0.0, hbar=lam)
        cfg = PropagatorConfig("split-step", dt, steps, lam)
        frames = FieldFrames(psi, system, cfg, hbar_eff=lam)
        with ctx.timed(f"lambda={lam:g}"):
            ens = evolve_ensemble(frames, system, ModelParams(lam, dt), sc.n, ctx.seed,
                                  [steps * dt], record_every=every, workers=ctx.workers)
        mean = ens.paths[:, 0, :].mean(axis=1)
        ref = np.interp(ens.path_times, ct.times, cq)
        devs.append(float(np.abs(mean - ref).max()))
        cols.setdefault("t", ens.path_times)
        cols.setdefault("classical_q", ref)
        cols[f"mean_q_lambda_{lam:g}"] = mean
    mono = all(b < a for a, b in zip(devs, devs[1:]))
    tol = float(_param(ctx, "final_tolerance", 1e-2))
    ctx.verdict("max deviation decreases with |lambda|", float(mono), "monotone", mono,
                note=", ".join(f"{d:.3g}" for d in devs))
    ctx.verdict(f"max deviation at lambda={lambdas[-1]:g}", devs[-1], f"< {tol:g}",
                devs[-1] < tol)
    ctx.writer.csv("classical_paths.csv", cols, "ensemble-mean and classical paths", {
        "t": "time", "classical_q": "velocity-Verlet classical path"})
    ctx.writer.csv("classical_deviation.csv", {"lambda": lambdas, "max_deviation": devs},
                   "max |mean path - classical path| per |lambda|")
    ctx.figure("classical_paths.png", "classical", paths=cols)


def exp_information_balance(ctx: RunContext):
    """Residual of the information balance on exact frames."""
    sc = ctx.scenario
    grid, system = sc.grid, sc.system
    lam = sc.model.lambda_mag
    dt_solver = sc.propagator.dt_solver
    states = _param(ctx, "states", [{"kind": "sho-ground"},
                                    {"kind": "sho-coherent", "q0": 1.0, "p0": 1.0}])
    t0 = float(_param(ctx, "t0", 0.3))
    tol = float(_param(ctx, "tolerance", 1e-4))
    refine = [float(x) for x in _param(ctx, "refine_dts", [8e-3, 4e-3, 2e-3, 1e-3])]
    order, order_tol = _param(ctx, "order", [2.0, 0.25])
    floor = float(_param(ctx, "roundoff_floor", 1e-9))
    params = ModelParams(lam, dt_solver)

    def frames(st, dt):
        kind = st["kind"]
        psi = _state(kind, {k: v for k, v in st.items() if k != "kind"}, grid, t0, hbar=lam)
        cfg = PropagatorConfig(sc.propagator.method, dt, 1, lam)
        w = list(iter_propagate(psi, system, cfg))
        return (polar_decompose(w[0], lam, system=system),
                polar_decompose(w[1], lam, system=system))

    prof = {"q": grid.axis(0)}
    ref_rows = {"state": [], "dt": [], "weighted_rms": [], "max_abs": []}
    for st in states:
        label = st["kind"]
        f0, f1 = frames(st, dt_solver)
        r = sign_averaged_balance_residual(f0, f1, params, system)
        mx = float(np.nanmax(np.abs(r)))
        ctx.verdict(f"sign-averaged residual, {label}", mx, f"< {tol:g}", mx < tol)
        prof[f"residual_{label}"] = r
        for s in (+1, -1):
            prof[f"single_sign_{s:+d}_{label}"] = information_balance_residual(f0, f1, s, params,
                                                                              system)
        sp = max(float(np.nanmax(np.abs(spatial_balance_residual(f0, s, params))))
                 for s in (+1, -1))
        ctx.verdict(f"spatial residual, {label}", sp, "< 1e-12", sp < 1e-12)

        ys = []
        for dt in refine:
            g0, g1 = frames(st, dt)
            rr = sign_averaged_balance_residual(g0, g1, ModelParams(lam, dt), system)
            ok = np.isfinite(rr)
            om = 0.5 * (np.asarray(g0.omega) + np.asarray(g1.omega))
            rms = float(np.sqrt(np.sum((om * rr * rr)[ok]) * grid.cell_volume))
            ys.append(rms)
            for key, v in zip(ref_rows, (label, dt, rms, float(np.nanmax(np.abs(rr))))):
                ref_rows[key].append(v)
        if min(ys) > floor:
            fit = fit_scaling(refine, ys)
            dec = all(b < a for a, b in zip(ys, ys[1:]))
            ctx.verdict(f"refinement order, {label}", fit.exponent,
                        f"{order} +/- {order_tol}, decreasing",
                        dec and abs(fit.exponent - order) <= order_tol,
                        note=f"stderr {fit.stderr:.3g}")
        else:
            ctx.notes[f"refinement {label}"] = (f"residual at roundoff (max weighted RMS "
                                                f"{max(ys):.3g}); no order to measure")
    ctx.writer.csv("balance_residual.csv", prof, "pointwise residuals (nan outside the mask)", {
        "q": "node coordinate"})
    ctx.writer.csv("balance_refinement.csv", ref_rows, "residual under dt refinement", {
        "weighted_rms": "sqrt(int Omega r^2)", "max_abs": "max |r| on the mask"})
    ctx.figure("balance_residual.png", "balance", profile=prof, refinement=ref_rows)


def _case_grid(case, default=None, location="params.cases"):
    return make_grid(case["grid"], f"{location}.grid") if "grid" in case else default


def exp_uncertainty(ctx: RunContext):
    """sigma_q sigma_p from position and sign samples."""
    sc = ctx.scenario
    n = sc.n
    cases = _param(ctx, "cases", [])
    rows = {k: [] for k in ("case", "t", "product", "stat_err", "rel_err", "fisher_bound",
                            "excluded")}
    for i, case in enumerate(cases):
        loc = f"params.cases[{i}]"
        label = case.get("label", case["initial"]["kind"])
        grid = _case_grid(case, sc.grid, loc)
        system = make_system(case["system"], f"{loc}.system")
        kind = case["initial"]["kind"]
        ip = initial_params(case["initial"], f"{loc}.initial")
        times = [float(t) for t in case.get("times", [0.0])]
        dt = float(case.get("dt", 1e-3))
        lam = sc.model.lambda_mag if sc.model else 1.0
        psi = _state(kind, ip, grid, 0.0, hbar=lam)
        cfg = PropagatorConfig("split-step", dt, int(round(max(times) / dt)), lam)
        with ctx.timed(label):
            ens = evolve_ensemble(FieldFrames(psi, system, cfg, hbar_eff=lam), system,
                                  ModelParams(lam, dt), n, ctx.seed + i, times,
                                  workers=ctx.workers)
        refs = _frames_at(psi, system, cfg, list(ens.times), hbar_eff=lam)
        for (_, f), t in zip(refs, ens.times):
            ms = momentum_samples(ens, f)
            u = uncertainty_product(ms.q[0], ms.p[0])
            fb = fisher_bound(f)
            name = f"{label} t={t:.6g}"
            bound = 0.5 * lam * (1 - 3 * u.rel_err)
            ctx.verdict(f"product >= bound, {name}", u.product, f">= {bound:.6g}",
                        u.satisfies_bound(lam), (u.product - 0.5 * lam) / u.stat_err)
            if "expect" in case and abs(t - float(case.get("expect_at", t))) < 0.5 * dt:
                target = read_number(case["expect"], f"{loc}.expect")
                rtol = float(case.get("expect_rtol", 0.02))
                rel = abs(u.product / target - 1)
                ctx.verdict(f"product = {target:.6g}, {name}", u.product,
                            f"rel_err < {rtol:g}", rel < rtol, (u.product - target) / u.stat_err)
            for key, v in zip(rows, (label, t, u.product, u.stat_err, u.rel_err, fb.bound,
                                     ms.excluded)):
                rows[key].append(v)
    ctx.writer.csv("uncertainty.csv", rows, "uncertainty products", {
        "product": "sigma_q * sigma_p", "stat_err": "delta-method standard error",
        "fisher_bound": "grid sigma_q times the osmotic momentum spread",
        "excluded": "samples dropped at node cells"})
    ctx.figure("uncertainty.png", "uncertainty", rows=rows)


def _plane_wave(grid, k):
    return WaveFunction(np.exp(1j * k * grid.axis(0)), grid).normalized()


def exp_operator_averages(ctx: RunContext):
    """Sample averages of p, p^2 and H against grid operator averages."""
    sc = ctx.scenario
    n = sc.n
    zmax = float(_param(ctx, "z_max", 3.0))
    rows = {k: [] for k in ("case", "observable", "model", "operator", "stderr", "z")}
    for i, case in enumerate(_param(ctx, "cases", [])):
        loc = f"params.cases[{i}]"
        grid = _case_grid(case, sc.grid, loc)
        system = make_system(case["system"], f"{loc}.system")
        init = case["initial"]
        if init.get("kind") == "plane-wave":
            psi = _plane_wave(grid, float(init.get("k", 1.0)))
        else:
            psi = _state(init["kind"], initial_params(init, f"{loc}.initial"), grid)
        label = case.get("label", init["kind"])
        lam = 1.0
        frames = [polar_decompose(psi, lam)]
        ens = evolve_ensemble(frames, system, ModelParams(lam, 1e-3), n, ctx.seed + i, [0.0])
        ms = momentum_samples(ens, frames[0])
        exact = bool(case.get("exact", False))
        for obs in case.get("observables", list(OBSERVABLES)):
            r = expectation_compare(ms, psi, obs, system, lam)
            if exact:
                gap = abs(r.model - r.operator)
                spread = float(np.ptp(ms.p[0]))
                ctx.verdict(f"{label} <{obs}> exact", gap, "< 1e-9, zero spread",
                            gap < 1e-9 and spread < 1e-9)
            else:
                ctx.verdict(f"{label} <{obs}>", abs(r.z), f"|z| < {zmax:g}", abs(r.z) < zmax, r.z)
            for key, v in zip(rows, (label, obs, r.model, r.operator, r.stderr, r.z)):
                rows[key].append(v)
    ctx.writer.csv("operator_averages.csv", rows, "sample vs operator averages", {
        "model": "mean over trajectory/sign samples", "operator": "grid quadrature",
        "stderr": "standard error of the sample mean", "z": "(model - operator) / stderr"})


def _two_body(ctx, grid, hbar):
    sc = ctx.scenario
    sys1 = sc.system
    sys2 = make_system(_param(ctx, "system2", {"potential": "harmonic"}), "params.system2")
    i2 = _param(ctx, "initial2", {"kind": "sho-ground"})
    psi1 = _state(sc.initial_kind, sc.initial, grid, hbar=hbar)
    psi2 = _state(i2["kind"], initial_params(i2, "params.initial2"), grid, hbar=hbar)
    return ProductScenario(sys1, sys2, psi1, psi2)


def exp_locality(ctx: RunContext):
    """Additivity, deviation independence and particle-1 marginal invariance."""
    sc = ctx.scenario
    grid = sc.grid
    lam = sc.model.lambda_mag
    cfg = PropagatorConfig(sc.propagator.method if sc.propagator else "split-step",
                           sc.model.dt, 0, lam)
    scen = _two_body(ctx, grid, lam)
    alt = make_system(_param(ctx, "alt_system2", {"potential": "quartic"}), "params.alt_system2")

    with ctx.timed("decomposition"):
        dec_rows = {k: [] for k in ("pair", "t", "product", "theta", "info", "grad_s", "dt_s",
                                    "sigma")}
        pairs = [("main", scen)]
        extra = _param(ctx, "decomposition_pair", None)
        if extra:
            s2 = make_system(extra["system2"], "params.decomposition_pair.system2")
            p2 = _state(extra["initial2"]["kind"], initial_params(
                extra["initial2"], "params.decomposition_pair.initial2"), grid, hbar=lam)
            pairs.append(("alt", ProductScenario(scen.system1, s2, scen.psi1, p2)))
        t_dec = float(_param(ctx, "decomposition_time", 0.5))
        for label, pair in pairs:
            rep = check_decomposition(pair, t_dec, cfg, seed=ctx.seed)
            worst = max(rep.product_defect, rep.theta_defect, rep.info_defect, rep.grad_s_defect,
                        rep.dt_s_defect, rep.sigma_defect)
            ctx.verdict(f"additivity defects ({label} pair)", worst, "< 1e-6", rep.passed())
            for key, v in zip(dec_rows, (label, rep.time, rep.product_defect, rep.theta_defect,
                                         rep.info_defect, rep.grad_s_defect, rep.dt_s_defect,
                                         rep.sigma_defect)):
                dec_rows[key].append(v)

    with ctx.timed("separability"):
        n_sep = int(_param(ctx, "separability_n", 10 ** 6))
        sep = check_transition_separability(lam, n_sep, ctx.seed)
        ctx.verdict("deviation correlation", abs(sep.correlation), f"< {sep.corr_band:.6g}",
                    abs(sep.correlation) < sep.corr_band, sep.correlation * np.sqrt(n_sep))
        for j, (m, e) in enumerate(zip(sep.means, sep.mean_rel_err)):
            ctx.verdict(f"particle {j + 1} deviation mean", e, "rel_err < 0.01", e < 0.01)
        ctx.verdict("deviation mutual information", sep.mutual_info,
                    f"< 3x bias floor {3 * sep.mi_floor:.3g}", sep.mutual_info < 3 * sep.mi_floor)

    with ctx.timed("marginal invariance"):
        rep = marginal_invariance_test(scen, alt, sc.model, cfg, sc.n, sc.checkpoints,
                                       (ctx.seed, ctx.seed), workers=ctx.workers)
    for t, k in zip(rep.times, rep.ks_two_sample):
        ctx.verdict(f"particle-1 two-sample KS at t={t:.6g}", k, f"< {rep.band:.6g} (99% band)",
                    k < rep.band)
    for j, k in enumerate(rep.ks_vs_density):
        ctx.verdict(f"particle-1 KS vs joint marginal (run {j})", k,
                    f"< {2 * rep.density_band:.6g}", k < 2 * rep.density_band)

    with ctx.timed("one-body comparison"):
        scen1 = scen.psi1
        sub = ModelParams(lam, sc.model.dt, sc.model.tau_xi, sc.model.tau_lambda)
        steps = int(round(max(sc.checkpoints) / sc.model.dt))
        frames1 = FieldFrames(scen1, scen.system1,
                              PropagatorConfig(cfg.method, sc.model.dt, steps, lam), hbar_eff=lam)
        pos2d = rep.details["positions"]
        one = evolve_ensemble(frames1, scen.system1, sub, sc.n, ctx.seed, sc.checkpoints,
                              initial=rep.details["initial"][0:1], workers=ctx.workers)
        gaps = []
        for k, t in enumerate(rep.times):
            d = np.abs(one.positions[k, 0] - pos2d[k, 0])
            if grid.periodic:
                d = np.minimum(d, grid.extent[0] - d)
            gaps.append(float(d.max()))
        ctx.verdict("1D vs 2D particle-1 paths", max(gaps), "< 1e-6", max(gaps) < 1e-6)

    with ctx.timed("entangled guard"):
        a = np.outer(scen.psi1.values, scen.psi2.values)
        ent = WaveFunction(a + a.T, scen.grid).normalized()
        guard = marginal_invariance_test(ProductScenario(scen.system1, scen.system2, scen.psi1,
                                                         scen.psi2, ent),
                                         alt, sc.model, cfg, 16, sc.checkpoints[:1],
                                         (ctx.seed, ctx.seed))
        ctx.verdict("entangled state reported out of scope", float(not guard.in_scope),
                    OUT_OF_SCOPE, not guard.in_scope)

    ctx.writer.csv("locality_decomposition.csv", dec_rows, "additivity defects", {
        "product": "max |psi12 - psi1 psi2|", "theta": "max |theta12 - theta1 - theta2|",
        "info": "max |dI12 - dI1 - dI2|", "grad_s": "max grad S gap", "dt_s": "max dS/dt gap",
        "sigma": "production additivity defect"})
    ctx.writer.csv("locality_marginal.csv", {
        "t": rep.times, "ks_two_sample": rep.ks_two_sample, "band": [rep.band] * len(rep.times),
        "max_path_gap": rep.max_path_gap, "one_body_gap": gaps},
        "particle-1 marginal with V2 swapped", {
            "ks_two_sample": "KS between particle-1 samples of the two runs",
            "max_path_gap": "largest particle-1 gap between runs",
            "one_body_gap": "largest gap to the one-particle simulation"})
    ctx.writer.csv("locality_separability.csv", {
        "n": sep.n, "correlation": sep.correlation, "corr_band": sep.corr_band,
        "mean_1": sep.means[0], "mean_2": sep.means[1], "ks_1": sep.ks[0], "ks_2": sep.ks[1],
        "ks_band": sep.ks_band, "mutual_info": sep.mutual_info, "mi_floor": sep.mi_floor},
        "independence of per-particle deviations")
    ctx.figure("locality_marginal.png", "locality", times=list(rep.times),
               ks=list(rep.ks_two_sample), band=rep.band)


def exp_solver_crossval(ctx: RunContext):
    """Split-step against Crank-Nicolson on each benchmark."""
    tol = float(_param(ctx, "l2_tolerance", 1e-5))
    ntol = float(_param(ctx, "norm_tolerance", 1e-8))
    rows = {k: [] for k in ("case", "dt", "T", "l2", "norm_drift_split", "norm_drift_cn")}
    for i, case in enumerate(_param(ctx, "cases", [])):
        loc = f"params.cases[{i}]"
        grid = _case_grid(case, None, loc)
        system = make_system(case["system"], f"{loc}.system")
        psi = _state(case["initial"]["kind"], initial_params(case["initial"], f"{loc}.initial"),
                     grid)
        if "second" in case:
            sys2 = make_system(case["second"]["system"], f"{loc}.second.system")
            psi2 = _state(case["second"]["initial"]["kind"],
                          initial_params(case["second"]["initial"], f"{loc}.second.initial"), grid)
            psi = product_state(psi, psi2)
            system = product_system(system, sys2)
        dt = float(case["dt"])
        T = float(case["T"])
        label = case.get("label", system.name)
        out = []
        with ctx.timed(label):
            for method in ("split-step", "crank-nicolson"):
                cfg = PropagatorConfig(method, dt, int(round(T / dt)), 1.0)
                last = None
                drift = 0.0
                for w in iter_propagate(psi, system, cfg):
                    drift = max(drift, abs(w.norm() - psi.norm()))
                    last = w
                out.append((last, drift))
        l2 = l2_distance(out[0][0], out[1][0])
        ctx.verdict(f"split vs CN L2, {label}", l2, f"< {tol:g}", l2 < tol)
        for m, (_, d) in zip(("split-step", "crank-nicolson"), out):
            ctx.verdict(f"norm drift {m}, {label}", d, f"< {ntol:g}", d < ntol)
        for key, v in zip(rows, (label, dt, T, l2, out[0][1], out[1][1])):
            rows[key].append(v)
    ctx.writer.csv("solver_crossval.csv", rows, "propagator agreement", {
        "l2": "L2 distance of final states", "norm_drift_split": "max |norm - norm0|",
        "norm_drift_cn": "max |norm - norm0|"})


def _deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def numeric_digest(run_dir: Path) -> Dict[str, str]:
    """SHA-256 of every CSV and of the verdict table in a run directory."""
    run_dir = Path(run_dir)
    names = sorted(p.name for p in run_dir.glob("*.csv")) + ["verdicts.json"]
    return {nm: hashlib.sha256((run_dir / nm).read_bytes()).hexdigest() for nm in names
            if (run_dir / nm).exists()}


def exp_determinism(ctx: RunContext):
    """Re-run a target scenario with the same seed and compare numeric outputs."""
    target = _param(ctx, "target", "sho-born-rule")
    raw = _deep_merge(load(target).raw, _param(ctx, "overrides", {}))
    raw["seed"] = ctx.seed
    raw["outputs"] = ["data"]
    sub = validate(raw, source=f"determinism target {target}")
    threads = [int(x) for x in _param(ctx, "threads", [1, 1, 2])]
    digests = []
    for j, th in enumerate(threads):
        name = f"rerun_{j}"
        d = ctx.writer.out_dir / name
        if d.exists():
            shutil.rmtree(d)
        with ctx.timed(name):
            run_scenario(sub, d, workers=th)
        digests.append(numeric_digest(d))
        ctx.writer.external(name, "run", f"rerun {j} of {target} with {th} worker(s)")
    files = sorted(set().union(*digests))
    rows = {"file": files}
    for j, dg in enumerate(digests):
        rows[f"sha256_run{j}"] = [dg.get(f, "") for f in files]
    same = [len({dg.get(f) for dg in digests}) == 1 and digests[0].get(f) for f in files]
    rows["identical"] = same
    ok = bool(files) and all(same)
    ctx.verdict(f"byte-identical numeric outputs ({len(files)} files, threads {threads})",
                float(ok), "all identical", ok)
    ctx.writer.csv("determinism.csv", rows, "hashes of rerun outputs", {
        "identical": "1 when every rerun produced the same bytes"})


EXPERIMENT_FUNCS: Dict[str, Callable[[RunContext], None]] = {
    "deviation-law": exp_deviation_law,
    "born-rule": exp_born_rule,
    "fluctuation-scaling": exp_fluctuation_scaling,
    "classical-limit": exp_classical_limit,
    "information-balance": exp_information_balance,
    "uncertainty": exp_uncertainty,
    "operator-averages": exp_operator_averages,
    "locality": exp_locality,
    "solver-crossval": exp_solver_crossval,
    "determinism": exp_determinism,
}


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RunResult:
    exit_code: int
    manifest: Dict[str, Any]
    verdicts: List[Verdict]
    out_dir: Path

    @property
    def passed(self) -> bool:
        return self.exit_code == EXIT_OK


def _versions():
    import matplotlib
    import numba
    import scipy
    import yaml
    return {"stochquant": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
            "matplotlib": matplotlib.__version__, "pyyaml": yaml.__version__}


def run_scenario(scenario: Scenario, out_dir, *, seed: Optional[int] = None,
                 workers: int = 1) -> RunResult:
    """Execute one scenario and write its outputs into ``out_dir``.

    The manifest is written in every case, including numerical aborts and
    unexpected errors (recorded under ``diagnostics``).
    """
    if seed is not None:
        scenario = copy.copy(scenario)
        scenario.seed = int(seed)
    out_dir = Path(out_dir)
    writer = OutputWriter(out_dir, data="data" in scenario.outputs)
    ctx = RunContext(scenario, writer, workers=max(1, int(workers)))
    t0 = time.perf_counter()
    status, diag = "completed", None
    try:
        EXPERIMENT_FUNCS[scenario.experiment](ctx)
    except NUMERICAL_ERRORS as exc:
        status, diag = "numerical-abort", f"{type(exc).__name__}: {exc}"
    except Exception as exc:
        status, diag = "error", traceback.format_exc()
        ctx.notes["exception"] = f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - t0

    if "plots" in scenario.outputs and ctx.figures:
        from .plotting import render

        for fig in ctx.figures:
            try:
                render(fig, out_dir / fig["name"])
                writer.external(fig["name"], "png", f"figure ({fig['kind']})")
            except Exception as exc:
                ctx.notes[f"plot {fig['name']}"] = f"not rendered: {exc}"

    if status == "completed":
        code = EXIT_OK if all(v.passed for v in ctx.verdicts) else EXIT_VERDICT
        if not ctx.verdicts:
            code = EXIT_VERDICT
            ctx.notes["verdicts"] = "experiment produced no verdicts"
    elif status == "numerical-abort":
        code = EXIT_NUMERICAL
    else:
        code = EXIT_VERDICT

    verdicts = [v.as_dict() for v in ctx.verdicts]
    writer.json("verdicts.json", verdicts, "verdict table")
    manifest = {
        "scenario": scenario.resolved(),
        "source": scenario.source,
        "status": status,
        "exit_code": code,
        "diagnostics": diag,
        "notes": ctx.notes,
        "versions": _versions(),
        "wall_time_s": {"total": wall, **ctx.timings},
        "workers": ctx.workers,
        "rng_scheme": RNG_SCHEME,
        "verdicts": verdicts,
        "files": writer.files + [{"path": "manifest.json", "kind": "json",
                                  "description": "this manifest"}],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return RunResult(code, manifest, ctx.verdicts, out_dir)
