"""Closed-loop engagement runs, Monte Carlo batches, variant comparison and CSV output."""

from __future__ import annotations

import csv
import json
import logging
import math
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .config import EngagementConfig
from .engagement import (
    Continue,
    Diverged,
    Hit,
    SingularGeometry,
    apply_fault,
    closest_approach,
    observe,
    step,
)
from .errors import CorruptFile, VersionMismatch
from .meta import ExperienceBuffer, adapt
from .mppi import ControlPlan, control_cycle, model_input
from .neural_model import DynamicsModel

log = logging.getLogger(__name__)

SERIES_COLUMNS = {
    "t": ("s", "time since launch"),
    "R": ("m", "interceptor-target range (truth)"),
    "R_dot": ("m/s", "range rate (truth)"),
    "theta_L": ("rad", "LOS elevation (truth)"),
    "phi_L": ("rad", "LOS azimuth (truth)"),
    "theta_L_dot": ("rad/s", "LOS elevation rate (truth)"),
    "phi_L_dot": ("rad/s", "LOS azimuth rate (truth)"),
    "theta_m": ("rad", "interceptor heading elevation relative to LOS"),
    "phi_m": ("rad", "interceptor heading azimuth relative to LOS"),
    "theta_t": ("rad", "target heading elevation relative to LOS"),
    "phi_t": ("rad", "target heading azimuth relative to LOS"),
    "V_M": ("m/s", "interceptor speed"),
    "x_M": ("m", "interceptor inertial x"),
    "y_M": ("m", "interceptor inertial y"),
    "z_M": ("m", "interceptor inertial z"),
    "x_T": ("m", "target inertial x"),
    "y_T": ("m", "target inertial y"),
    "z_T": ("m", "target inertial z"),
    "a_ym_cmd": ("m/s^2", "commanded lateral acceleration"),
    "a_zm_cmd": ("m/s^2", "commanded normal acceleration"),
    "a_ym": ("m/s^2", "achieved lateral acceleration (after fault and saturation)"),
    "a_zm": ("m/s^2", "achieved normal acceleration (after fault and saturation)"),
    "lambda": ("-", "MPPI temperature used for the weights"),
    "cost_min": ("-", "minimum sampled trajectory cost"),
    "cost_mean": ("-", "mean sampled trajectory cost"),
    "ess": ("-", "effective sample size 1/sum(w^2)"),
}

SUMMARY_COLUMNS = {
    "run": ("-", "run index"),
    "seed": ("-", "engagement seed"),
    "variant": ("-", "controller variant"),
    "outcome": ("-", "hit | miss (passed outside the hit radius) | diverged | error"),
    "miss_distance": ("m", "closest-approach range"),
    "theta_LT": ("rad", "terminal LOS elevation"),
    "phi_LT": ("rad", "terminal LOS azimuth"),
    "theta_LD": ("rad", "desired LOS elevation"),
    "phi_LD": ("rad", "desired LOS azimuth"),
    "impact_time": ("s", "time of closest approach"),
    "angle_error": ("rad", "max(|theta_LT - theta_LD|, |phi_LT - phi_LD|)"),
}


@dataclass
class RunReport:
    outcome: str
    miss_distance: float
    theta_LT: float
    phi_LT: float
    impact_time: float
    theta_LD: float
    phi_LD: float
    seed: int = 0
    variant: str = "proposed"
    series: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def hit(self) -> bool:
        return self.outcome == "hit"

    @property
    def angle_error(self) -> float:
        return max(abs(self.theta_LT - self.theta_LD), abs(_wrap(self.phi_LT - self.phi_LD)))

    def summary(self) -> dict:
        return {
            "seed": self.seed, "variant": self.variant, "outcome": self.outcome,
            "miss_distance": self.miss_distance, "theta_LT": self.theta_LT, "phi_LT": self.phi_LT,
            "theta_LD": self.theta_LD, "phi_LD": self.phi_LD, "impact_time": self.impact_time,
            "angle_error": self.angle_error,
        }


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def _inertial_velocities(s):
    cL, sL = math.cos(s.theta_L), math.sin(s.theta_L)
    cp, sp = math.cos(s.phi_L), math.sin(s.phi_L)
    e = np.array([cL * cp, cL * sp, sL])
    y = np.array([-sp, cp, 0.0])
    z = np.array([-sL * cp, -sL * sp, cL])

    def v(V, th, ph):
        return V * (math.cos(th) * math.cos(ph) * e + math.cos(th) * math.sin(ph) * y + math.sin(th) * z)

    return e, v(s.V_M, s.theta_m, s.phi_m), v(s.V_T, s.theta_t, s.phi_t)


def run_engagement(
    config: EngagementConfig,
    model: Optional[DynamicsModel],
    seed: int = 0,
    adapt_fn: Callable = adapt,
    controller: Optional[Callable] = None,
) -> RunReport:
    """Closed loop at the control period: observe, plan, actuate (with fault), integrate.

    ``controller(obs_features, t) -> (a_ym, a_zm)`` replaces the learned MPPI
    loop when given (used for baselines and tests).
    """
    if not config.is_resolved():
        raise ValueError("run_engagement needs a resolved config (no ranges)")
    dt = config.sim.dt
    state = config.initial_state()
    maneuver, speed, fault = config.target_maneuver(), config.speed_model(), config.actuator_fault()
    noise = config.noise_config()
    monitor = config.monitor()
    ctrl = config.controller_config()
    plan = ControlPlan.zeros(ctrl.mppi.horizon)
    buffer = ExperienceBuffer(ctrl.adaptation.M)
    cols = {k: [] for k in SERIES_COLUMNS}
    pos_M = np.zeros(3)
    e, vM, vT = _inertial_velocities(state)
    pos_T = state.R * e

    def log_row(s, cmd, act, diag):
        R_dot, thd, phd = _los_rates_safe(s)
        vals = dict(t=s.t, R=s.R, R_dot=R_dot, theta_L=s.theta_L, phi_L=s.phi_L, theta_L_dot=thd,
                    phi_L_dot=phd, theta_m=s.theta_m, phi_m=s.phi_m, theta_t=s.theta_t, phi_t=s.phi_t,
                    V_M=s.V_M, x_M=pos_M[0], y_M=pos_M[1], z_M=pos_M[2], x_T=pos_T[0], y_T=pos_T[1],
                    z_T=pos_T[2], a_ym_cmd=cmd[0], a_zm_cmd=cmd[1], a_ym=act[0], a_zm=act[1],
                    **{k: diag.get(k, math.nan) for k in ("lambda", "cost_min", "cost_mean", "ess")})
        for k, v in vals.items():
            cols[k].append(float(v))

    verdict = monitor.check(state)
    prev = None
    k = 0
    nan2 = (math.nan, math.nan)
    n_adapt = 0
    while isinstance(verdict, Continue):
        obs = observe(state, noise, [seed, 1, k]).features()
        if prev is not None:
            buffer.record(prev[0], prev[1], obs[4:6], dt)
        if controller is None:
            res = control_cycle(obs, model, buffer, plan, ctrl, [seed, 2, k], adapt_fn=adapt_fn)
            cmd, plan, diag = res.command, res.plan, res.diagnostics
            n_adapt += int(ctrl.adapt and len(buffer) > 0)
        else:
            cmd, diag = controller(obs, state.t), {}
        act = apply_fault(cmd, fault, state.t, config.sim.a_max)
        log_row(state, cmd, act, diag)
        prev = (model_input(obs, cmd), obs[4:6].copy())
        try:
            new = step(state, cmd, fault, maneuver, speed, dt, config.sim.a_max)
        except SingularGeometry:
            verdict = monitor.finish_singular()
            break  # the current state is already logged
        e0, vM0, vT0 = _inertial_velocities(state)
        e1, vM1, vT1 = _inertial_velocities(new)
        pos_M = pos_M + 0.5 * dt * (vM0 + vM1)
        pos_T = pos_M + new.R * e1
        state = new
        verdict = monitor.check(state)
        k += 1
    else:
        log_row(state, nan2, nan2, {})
    series = {k: np.asarray(v) for k, v in cols.items()}
    info = {"steps": k, "adapt_calls": n_adapt, "config": config.name}
    if isinstance(verdict, Hit):
        return RunReport("hit", verdict.miss_distance, verdict.theta_LT, verdict.phi_LT, verdict.t,
                         config.desired.theta_LD, config.desired.phi_LD, seed, config.variant, series, info)
    assert isinstance(verdict, Diverged)
    info["reason"] = verdict.reason
    i = int(np.argmin(series["R"]))
    return RunReport("diverged", float(series["R"][i]), float(series["theta_L"][i]), float(series["phi_L"][i]),
                     float(series["t"][i]), config.desired.theta_LD, config.desired.phi_LD, seed,
                     config.variant, series, info)


def _los_rates_safe(s):
    from .engagement import los_rates
    try:
        return los_rates(s)
    except SingularGeometry:
        return math.nan, math.nan, math.nan


def miss_from_series(series: dict) -> float:
    """Closest approach recomputed from the logged range samples.

    When the run ends while still closing (integration stopped inside the
    near-singular zone) the parabola is extrapolated up to one more step.
    """
    R, t = series["R"], series["t"]
    i = int(np.argmin(R))
    if i == len(R) - 1 and len(R) >= 3:
        tt, r2 = t[-3:] - t[-1], R[-3:] ** 2
        c2, c1, c0 = np.polyfit(tt, r2, 2)
        if c2 > 0:
            tau = min(max(-c1 / (2 * c2), 0.0), tt[-1] - tt[-2])
            return math.sqrt(max(c0 + c1 * tau + c2 * tau * tau, 0.0))
        return float(R[-1])
    lo, hi = max(i - 1, 0), min(i + 2, len(R))
    return closest_approach(t[lo:hi], R[lo:hi])[1]


# --- batches ----------------------------------------------------------------------

@dataclass
class MonteCarloResult:
    reports: list
    stats: dict
    histograms: dict


def _mc_worker(args):
    cfg, model, seed = args
    try:
        return run_engagement(cfg, model, seed)
    except Exception as exc:  # a failed run must not stop the batch
        log.exception("run with seed %s failed", seed)
        return RunReport("error", math.nan, math.nan, math.nan, math.nan, cfg.desired.theta_LD,
                         cfg.desired.phi_LD, seed, cfg.variant, {}, {"error": repr(exc)})


def histogram(values, bins: int = 20) -> dict:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if len(v) == 0:
        return {"edges": np.zeros(0), "counts": np.zeros(0, dtype=int), "invalid": len(list(values))}
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return {"edges": edges, "counts": counts, "invalid": int(len(values) - len(v))}


def batch_stats(reports: Sequence[RunReport]) -> dict:
    n = len(reports)
    miss = np.array([r.miss_distance for r in reports], dtype=float)
    err = np.array([r.angle_error for r in reports], dtype=float)
    hits = [r for r in reports if r.hit]
    return {
        "n_runs": n,
        "hit_rate": len(hits) / n if n else math.nan,
        "median_miss": float(np.nanmedian(miss)) if n else math.nan,
        "max_miss": float(np.nanmax(miss)) if n else math.nan,
        "median_angle_error": float(np.nanmedian(err)) if n else math.nan,
        "mean_impact_time": float(np.nanmean([r.impact_time for r in reports])) if n else math.nan,
    }


def run_monte_carlo(config: EngagementConfig, n_runs: int, model: DynamicsModel, seed: int = 0,
                    workers: int = 1, hit_radius: float = 1.0, run_offset: int = 0) -> MonteCarloResult:
    """Independent runs with every ranged field drawn per run.

    Run ``i`` draws its scenario from ``default_rng([seed, i])``, so any run of
    a batch can be repeated alone with ``run_offset=i, n_runs=1``.  A run
    counts towards ``hit_rate`` when it intercepts with miss distance below
    ``hit_radius``; closer approaches that stay outside it are labelled "miss".
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    jobs = []
    for i in range(run_offset, run_offset + n_runs):
        cfg = config.resolve(np.random.default_rng([seed, i]))
        jobs.append((cfg, model, seed * 100003 + i))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(_mc_worker, jobs))
    else:
        reports = [_mc_worker(j) for j in jobs]
    for i, r in enumerate(reports, start=run_offset):
        r.info["run"] = i
        if r.hit and not r.miss_distance < hit_radius:
            r.outcome = "miss"
    hists = {
        "miss_distance": histogram([r.miss_distance for r in reports]),
        "theta_LT": histogram([r.theta_LT for r in reports]),
        "phi_LT": histogram([r.phi_LT for r in reports]),
    }
    return MonteCarloResult(reports, batch_stats(reports), hists)


def compare_variants(config: EngagementConfig, variants: Iterable, seeds: Sequence[int],
                     model: DynamicsModel) -> tuple[list[dict], dict]:
    """Run each variant on identical configs and seeds.

    ``variants`` holds names or ``(name, fixed_temperature)`` pairs.  Returns the
    per-variant table (means over seeds) and the raw reports.
    """
    rows, reports = [], {}
    for v in variants:
        name, temp = (v, None) if isinstance(v, str) else v
        cfg = config.with_variant(name, temp)
        label = name if temp is None else f"{name}({temp:g})"
        reps = [run_engagement(cfg, model, s) for s in seeds]
        reports[label] = reps
        st = batch_stats(reps)
        rows.append({
            "variant": label,
            "miss_distance": float(np.nanmean([r.miss_distance for r in reps])),
            "theta_LT": float(np.nanmean([r.theta_LT for r in reps])),
            "phi_LT": float(np.nanmean([r.phi_LT for r in reps])),
            "impact_time": float(np.nanmean([r.impact_time for r in reps])),
            "hit_rate": st["hit_rate"],
            "n": len(reps),
        })
    return rows, reports


def mean_los_rate_magnitude(report: RunReport, t_from: float) -> float:
    """Mean of sqrt(theta_L_dot^2 + phi_L_dot^2) from ``t_from`` to the end of the run."""
    s = report.series
    m = (s["t"] >= t_from) & np.isfinite(s["theta_L_dot"])
    return float(np.mean(np.hypot(s["theta_L_dot"][m], s["phi_L_dot"][m])))


# --- persistence ------------------------------------------------------------------

REPORT_MAGIC = "MGUIDE-REPORT"
REPORT_VERSION = 1
_SCALARS = ("outcome", "miss_distance", "theta_LT", "phi_LT", "impact_time", "theta_LD", "phi_LD",
            "seed", "variant", "info")


def save_report(report: RunReport, path) -> Path:
    head = {"magic": REPORT_MAGIC, "version": REPORT_VERSION}
    head.update({k: getattr(report, k) for k in _SCALARS})
    arrays = {f"series__{k}": np.asarray(v) for k, v in report.series.items()}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(head, allow_nan=True)), **arrays)
    return path


def load_report(path) -> RunReport:
    try:
        with np.load(path, allow_pickle=False) as z:
            files = set(z.files)
            if "header" not in files:
                raise VersionMismatch(f"{path}: not a run report")
            head = json.loads(str(z["header"]))
            series = {k[len("series__"):]: z[k] for k in z.files if k.startswith("series__")}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise CorruptFile(f"{path}: unreadable report ({exc})") from exc
    if head.get("magic") != REPORT_MAGIC or head.get("version") != REPORT_VERSION:
        raise VersionMismatch(f"{path}: unsupported report format")
    return RunReport(**{k: head[k] for k in _SCALARS}, series=series)


# --- CSV emission -------------------------------------------------------------------

def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow(r)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def emit_outputs(reports: Sequence[RunReport], out_dir, histograms: Optional[dict] = None,
                 prefix: str = "run") -> list[Path]:
    """Write per-run time series, a batch summary, histograms and a data dictionary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, r in enumerate(reports):
        if not r.series:
            continue
        names = [k for k in SERIES_COLUMNS if k in r.series]
        rows = zip(*[[_fmt(float(x)) for x in r.series[k]] for k in names])
        written.append(_write_csv(out / f"{prefix}_{i:04d}_timeseries.csv", names, rows))
    summ = []
    for i, r in enumerate(reports):
        d = r.summary()
        summ.append([i] + [_fmt(d[k]) for k in list(SUMMARY_COLUMNS)[1:]])
    written.append(_write_csv(out / "summary.csv", list(SUMMARY_COLUMNS), summ))
    if histograms is None and len(reports) > 1:
        histograms = {
            "miss_distance": histogram([r.miss_distance for r in reports]),
            "theta_LT": histogram([r.theta_LT for r in reports]),
            "phi_LT": histogram([r.phi_LT for r in reports]),
        }
    for name, h in (histograms or {}).items():
        e, c = h["edges"], h["counts"]
        rows = [[_fmt(float(e[j])), _fmt(float(e[j + 1])), int(c[j])] for j in range(len(c))]
        written.append(_write_csv(out / f"hist_{name}.csv", ["bin_low", "bin_high", "count"], rows))
    dd = [["timeseries", k, u, d] for k, (u, d) in SERIES_COLUMNS.items()]
    dd += [["summary", k, u, d] for k, (u, d) in SUMMARY_COLUMNS.items()]
    dd += [["histogram", "bin_low", "(of variable)", "lower bin edge"],
           ["histogram", "bin_high", "(of variable)", "upper bin edge"],
           ["histogram", "count", "-", "runs in bin"]]
    written.append(_write_csv(out / "data_dictionary.csv", ["file", "column", "unit", "description"], dd))
    return written
