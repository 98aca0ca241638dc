"""Command-line entry point: one subcommand per pipeline stage.

    metaguide collect    --config case1 --runs 200 --out data/
    metaguide train      --dataset data/dataset.mgd --out model/
    metaguide run        --config case1 --weights model/weights.mgw --out out/case1
    metaguide montecarlo --config montecarlo --weights model/weights.mgw --runs 50 --out out/mc
    metaguide compare    --config case1 --weights model/weights.mgw --runs 20 --out out/cmp
    metaguide emit       --reports out/mc/reports --out out/mc/csv

Every stage persists its artifact, so a later stage can start from files
written earlier; ``montecarlo`` and ``compare`` skip runs whose report already
exists in ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import PRESETS, ConfigError, EngagementConfig, load_config
from .errors import CorruptFile, MetaGuideError, VersionMismatch
from .harness import (
    RunReport,
    batch_stats,
    emit_outputs,
    histogram,
    load_report,
    run_engagement,
    run_monte_carlo,
    save_report,
)
from .meta import meta_train
from .neural_model import load_params, save_params
from .pipeline import collect, export_csv, load_dataset, preprocess, save_dataset

log = logging.getLogger("metaguide")

FULL_SCALE_RUNS = 3500
# Measured on one CPU core: about 13 s per engagement at N = 1000 samples.
SECONDS_PER_RUN = 13.0
VARIANTS = ("proposed", "fixed_temperature", "no_adaptation")


def _config(args) -> EngagementConfig:
    cfg = load_config(args.config)
    if getattr(args, "variant", None):
        cfg = cfg.with_variant(args.variant, getattr(args, "temperature", None))
    return cfg


def _model(path):
    if not path:
        raise ConfigError("--weights is required for this command")
    model, _ = load_params(path)
    return model


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_collect(args) -> int:
    cfg = load_config(args.config)
    n = args.runs if args.runs is not None else cfg.collection.n_trajectories
    t0 = time.time()
    ds = collect(cfg, n, args.seed)
    out = _out(args)
    path = save_dataset(ds, out / "dataset.mgd")
    print(f"collected {ds.meta['n_trajectories']} trajectories ({len(ds)} rows, "
          f"{ds.meta['n_discarded']} discarded) in {time.time() - t0:.1f} s -> {path}")
    if args.csv:
        rows = export_csv(ds, out / "dataset.csv")
        print(f"wrote {rows} rows -> {out / 'dataset.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = cfg.training
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    tcfg = replace(tcfg, seed=args.seed)
    raw = load_dataset(args.dataset)
    data, norm = preprocess(raw, cfg.collection.augment_sigma, args.seed, tcfg.scale_floor)
    resume = load_params(args.weights) if args.weights else None
    t0 = time.time()
    res = meta_train(data, tcfg, norm, resume=resume)
    out = _out(args)
    path = save_params(out / "weights.mgw", res.model, res.adam)
    with open(out / "training_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mae", "val_mae"])
        for i, (a, b) in enumerate(zip(res.train_loss, res.val_loss)):
            w.writerow([i, repr(a), repr(b)])
    print(f"trained {len(res.train_loss)} epochs in {time.time() - t0:.1f} s "
          f"(best epoch {res.best_epoch}, val MAE {min(res.val_loss):.5f}) -> {path}")
    return 0


def _print_report(r: RunReport, label: str = "") -> None:
    print(f"{label}{r.outcome}: miss {r.miss_distance:.4g} m, theta_LT {r.theta_LT:.4f}, "
          f"phi_LT {r.phi_LT:.4f}, impact {r.impact_time:.3f} s")


def cmd_run(args) -> int:
    cfg = _config(args)
    if not cfg.is_resolved():
        cfg = cfg.resolve(np.random.default_rng(args.seed))
    model = _model(args.weights)
    r = run_engagement(cfg, model, args.seed)
    _print_report(r)
    out = _out(args)
    save_report(r, out / "report.npz")
    for p in emit_outputs([r], out):
        print(p)
    return 0


def _cached(path: Path):
    if path.exists():
        try:
            return load_report(path)
        except (CorruptFile, VersionMismatch):
            log.warning("ignoring unreadable report %s", path)
    return None


def cmd_montecarlo(args) -> int:
    cfg = _config(args)
    n = FULL_SCALE_RUNS if args.full_scale else (args.runs or 50)
    if args.full_scale:
        print(f"full-scale batch: {n} runs, roughly {n * SECONDS_PER_RUN / 3600 / max(args.workers, 1):.1f} h")
    model = _model(args.weights)
    out = _out(args)
    rep_dir = out / "reports"
    rep_dir.mkdir(exist_ok=True)
    reports = [None] * n
    todo = []
    for i in range(n):
        reports[i] = _cached(rep_dir / f"run_{i:04d}.npz")
        if reports[i] is None:
            todo.append(i)
    if todo:
        print(f"running {len(todo)} of {n} engagements")
    # run_monte_carlo draws run i from rng([seed, i]); run the missing indices one at a time
    # so completed runs survive an interruption.
    for i in todo:
        one = run_monte_carlo(cfg, 1, model, args.seed, hit_radius=args.hit_radius,
                              run_offset=i, workers=1)
        reports[i] = one.reports[0]
        save_report(reports[i], rep_dir / f"run_{i:04d}.npz")
        _print_report(reports[i], f"[{i + 1}/{n}] ")
    stats = batch_stats(reports)
    hists = {k: histogram([getattr(r, k) for r in reports]) for k in ("miss_distance", "theta_LT", "phi_LT")}
    errs = np.array([r.angle_error for r in reports])
    hists["angle_error"] = histogram(errs)
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    emit_outputs(reports, out, hists)
    print(json.dumps(stats, indent=2))
    print(f"outputs in {out}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    model = _model(args.weights)
    seeds = list(range(args.seed, args.seed + (args.runs or 5)))
    variants = args.variants or ["proposed", "no_adaptation"]
    out = _out(args)
    table = []
    for v in variants:
        name, _, temp = v.partition(":")
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
        vcfg = cfg.with_variant(name, float(temp) if temp else None)
        label = v.replace(":", "_")
        reps = []
        for s in seeds:
            path = out / f"{label}_seed{s}.npz"
            r = _cached(path)
            if r is None:
                r = run_engagement(vcfg, model, s)
                save_report(r, path)
            reps.append(r)
            _print_report(r, f"{v} seed {s}: ")
        row = {"variant": v, **{k: float(np.nanmean([getattr(r, k) for r in reps]))
                                for k in ("miss_distance", "theta_LT", "phi_LT", "impact_time")},
               "hit_rate": batch_stats(reps)["hit_rate"], "n": len(reps)}
        table.append(row)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    for row in table:
        print(row)
    print(f"table -> {out / 'comparison.csv'}")
    return 0


def cmd_emit(args) -> int:
    paths = sorted(Path(args.reports).glob("*.npz"))
    if not paths:
        raise ConfigError(f"no reports in {args.reports}")
    reports = [load_report(p) for p in paths]
    for p in emit_outputs(reports, _out(args)):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaguide", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_default="case1"):
        sp.add_argument("--config", default=config_default,
                        help=f"YAML file or preset name ({', '.join(PRESETS)})")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out")
        return sp

    sp = common(sub.add_parser("collect", help="roll out random controls and save a dataset"))
    sp.add_argument("--runs", type=int, help="number of trajectories")
    sp.add_argument("--csv", action="store_true", help="also export the dataset as CSV")
    sp.set_defaults(func=cmd_collect)

    sp = common(sub.add_parser("train", help="train the prior dynamics model"))
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--weights", help="resume from this weight file")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("run", help="one closed-loop engagement"))
    sp.add_argument("--weights", required=True)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--temperature", type=float, help="lambda for the fixed_temperature variant")
    sp.set_defaults(func=cmd_run)

    sp = common(sub.add_parser("montecarlo", help="batch of randomized engagements"), "montecarlo")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--full-scale", action="store_true", help=f"{FULL_SCALE_RUNS} runs")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--hit-radius", type=float, default=1.0)
    sp.set_defaults(func=cmd_montecarlo)

    sp = common(sub.add_parser("compare", help="controller variants on identical seeds"))
    sp.add_argument("--weights", required=True)
    sp.add_argument("--runs", type=int, help="number of seeds")
    sp.add_argument("--variants", nargs="+",
                    help="e.g. proposed no_adaptation fixed_temperature:0.001")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("emit", help="write CSV outputs from saved reports")
    sp.add_argument("--reports", required=True, help="directory of report .npz files")
    sp.add_argument("--out", default="out")
    sp.set_defaults(func=cmd_emit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CorruptFile, VersionMismatch) as exc:
        print(f"bad input file: {exc}", file=sys.stderr)
        return 3
    except MetaGuideError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
