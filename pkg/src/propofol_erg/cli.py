"""Command-line entry point: ``propofol-erg cohort|calibrate|run``.

Exit codes: 0 ok, 2 invalid input, 3 calibration failure, 4 strict-mode
acceptance failure. ``PROPOFOL_ERG_WORKERS`` sets the number of worker
processes used for cohort simulations (default 1).
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import calibration, patient_model as pm
from .config import ConfigError, ExperimentConfig, load_experiment_config
from .controller import ControllerConfig, SaturationLimits
from .patient_model import mlph_to_mgps
from .simkit import MODES, SimConfig, hill_linearization_error, run_cohort_experiment, write_metrics_csv

EXIT_OK, EXIT_INVALID, EXIT_CALIBRATION, EXIT_STRICT = 0, 2, 3, 4
WORKERS_ENV = "PROPOFOL_ERG_WORKERS"

SHIPPED_COHORT = "cohort44.csv"
SHIPPED_BOUNDS = "bounds44.txt"
SHIPPED_SPREAD = 0.04
SHIPPED_SEED = 1

# thresholds checked by --strict (cohort means, noise-free runs)
ENVELOPE = {"rise_time": 360.0, "settling_time": 600.0, "overshoot": 15.0}
MIN_BASELINE_OVERDOSE_FRACTION = 0.75


def data_path(name: str) -> Path:
    return Path(str(resources.files("propofol_erg") / "data" / name))


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


# --- cohort -------------------------------------------------------------------

def _cohort_summary(cohort) -> str:
    lines = []
    for g in range(1, 5):
        members = [p for p in cohort if p.group == g]
        lines.append(f"group {g}: {len(members)} patients")
        if not members:
            continue
        for col in pm.COHORT_COLUMNS[2:]:
            vals = np.array([pm._patient_row(p)[pm.COHORT_COLUMNS.index(col)] for p in members], dtype=float)
            lines.append(f"  {col:>5s}  {vals.min():.6g} .. {vals.max():.6g}")
    return "\n".join(lines)


def cmd_cohort(args) -> int:
    if args.action == "generate":
        try:
            cohort = pm.generate_cohort(args.n, args.spread, args.seed)
        except ValueError as exc:
            return _fail(EXIT_INVALID, str(exc))
        pm.save_cohort(cohort, args.out, comment=f"generated n={args.n} seed={args.seed} spread={args.spread!r}")
        print(f"wrote {args.out}")
    else:
        try:
            cohort = pm.load_cohort(args.path)
        except OSError as exc:
            return _fail(EXIT_INVALID, str(exc))
        except pm.CohortError as exc:
            return _fail(EXIT_INVALID, f"{args.path}: {exc}")
        print(f"{args.path}: {len(cohort)} patients, valid")
    print(_cohort_summary(cohort))
    return EXIT_OK


# --- calibrate ------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    try:
        cohort = pm.load_cohort(args.cohort)
    except (OSError, pm.CohortError) as exc:
        return _fail(EXIT_INVALID, f"{args.cohort}: {exc}")
    if args.runs < 1:
        return _fail(EXIT_INVALID, "--runs must be >= 1")
    try:
        bounds = calibration.calibrate(cohort, args.runs, args.seed, inflation=args.inflation, sided=args.sided)
    except calibration.CalibrationError as exc:
        return _fail(EXIT_CALIBRATION, str(exc))
    calibration.write_bounds(bounds, args.out)
    print(f"wrote {args.out}")
    print(calibration.format_bounds(bounds), end="")
    return EXIT_OK


# --- run --------------------------------------------------------------------------

def _mode_job(job):
    cohort, mode, sim, erg, ctrl = job
    return run_cohort_experiment(cohort, [mode], sim, erg, ctrl, keep_trajectories=True)[mode]


def _run_modes(cohort, modes, sim, erg, ctrl, workers):
    """Simulate each mode, fanning patients out over worker processes if asked."""
    if workers == 1:
        return run_cohort_experiment(cohort, modes, sim, erg, ctrl, keep_trajectories=True)
    chunks = [list(c) for c in np.array_split(np.array(cohort, dtype=object), min(workers, len(cohort))) if len(c)]
    jobs = [(c, m, sim, erg if m == "erg" else None, ctrl) for m in modes for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_mode_job, jobs))
    out = {}
    for i, mode in enumerate(modes):
        mine = parts[i * len(chunks):(i + 1) * len(chunks)]
        merged = mine[0]
        for p in mine[1:]:
            merged.metrics.update(p.metrics)
            merged.failed.update(p.failed)
            merged.trajectories.update(p.trajectories)
        out[mode] = merged
    return out


def _fmt(agg, name, scale):
    a = agg[name]
    if a["n"] == 0:
        return "n/a"
    return f"{a['mean'] / scale:.2f} ± {a['sd'] / scale:.2f}"


def format_report(results: dict, n_patients: int, erg_cfg=None, noise_std: float = 0.0) -> str:
    modes = list(results)
    w = 22
    lines = [f"cohort: {n_patients} patients; monitor noise std: {noise_std:g}", ""]
    lines.append("Overdosed patients (y > 0.6)")
    lines.append(" " * 16 + "".join(f"{m:>{w}s}" for m in modes))
    lines.append(f"{'overdosed':16s}" + "".join(f"{results[m].overdosed:>{w}d}" for m in modes))
    lines.append(f"{'failed':16s}" + "".join(f"{len(results[m].failed):>{w}d}" for m in modes))
    lines += ["", "Induction performance (mean ± SD)"]
    lines.append(" " * 16 + "".join(f"{m:>{w}s}" for m in modes))
    aggs = {m: results[m].aggregate() for m in modes}
    for name, label, scale in (("rise_time", "rise time [min]", 60.0),
                               ("settling_time", "settling [min]", 60.0),
                               ("overshoot", "overshoot [%]", 1.0)):
        lines.append(f"{label:16s}" + "".join(f"{_fmt(aggs[m], name, scale):>{w}s}" for m in modes))
    lines += ["", "Drug used in the first 8 min [ml]"]
    lines.append(" " * 16 + "".join(f"{m:>{w}s}" for m in modes))
    lines.append(f"{'mean ± SD':16s}" + "".join(f"{_fmt(aggs[m], 'drug_used_8min', 1.0):>{w}s}" for m in modes))
    for m in modes:
        if results[m].failed:
            lines.append(f"partial results for {m}: " + ", ".join(
                f"{k} ({v})" for k, v in sorted(results[m].failed.items())))
    if erg_cfg is not None and "erg" in modes:
        d0 = ", ".join(f"G{g}={erg_cfg.delta0_used(g):.4f}" for g in sorted(erg_cfg.delta0))
        lines += ["", f"governor bounds (inflated): delta0 {d0}; delta2={erg_cfg.delta2_used:.4f}"]
    return "\n".join(lines) + "\n"


def strict_violations(results: dict, noise_free: bool) -> list[str]:
    out = []
    for m, res in results.items():
        if res.failed:
            out.append(f"{m}: {len(res.failed)} simulations diverged")
    if "erg" in results:
        erg = results["erg"]
        if erg.overdosed:
            out.append(f"erg: {erg.overdosed} patients overdosed")
        if noise_free:
            agg = erg.aggregate()
            for name, limit in ENVELOPE.items():
                a = agg[name]
                if a["n"] < len(erg.metrics) or not a["mean"] <= limit:
                    out.append(f"erg: mean {name} {a['mean']:.3g} outside envelope (<= {limit:g}, all reached)")
    if "noPrefilter" in results and noise_free:
        base = results["noPrefilter"]
        n = len(base.metrics)
        if any(m.overshoot <= 0 for m in base.metrics.values()):
            out.append("noPrefilter: some patients do not overshoot r")
        if base.overdosed < MIN_BASELINE_OVERDOSE_FRACTION * n:
            out.append(f"noPrefilter: only {base.overdosed}/{n} patients overdosed")
        if "passivePrefilter" in results and not results["passivePrefilter"].overdosed < base.overdosed:
            out.append("passivePrefilter: not fewer overdoses than noPrefilter")
    return out


def _experiment_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = load_experiment_config(args.config)
    else:
        cfg = ExperimentConfig(cohort_file=args.cohort or str(data_path(SHIPPED_COHORT)))
    if args.cohort:
        cfg = replace(cfg, cohort_file=args.cohort, cohort_generate=None)
    if args.out:
        cfg.output_dir = args.out
    return cfg


def _resolve_bounds(args, cfg: ExperimentConfig) -> str | None:
    if args.bounds:
        return args.bounds
    if "bounds" in cfg.erg:
        return str(cfg.erg["bounds"])
    if cfg.cohort_file and Path(cfg.cohort_file).resolve() == data_path(SHIPPED_COHORT).resolve():
        return str(data_path(SHIPPED_BOUNDS))
    return None


def cmd_run(args) -> int:
    try:
        cfg = _experiment_from_args(args)
        workers = _workers()
        if cfg.cohort_file:
            cohort = pm.load_cohort(cfg.cohort_file)
        else:
            gen = cfg.cohort_generate
            cohort = pm.generate_cohort(gen["n"], gen["spread"], gen["seed"])
        sim_kw = dict(cfg.sim)
        if args.noise is not None:
            sim_kw["noise_variance"] = args.noise
        if args.noise_is_std:
            sim_kw["noise_is_std"] = True
        if args.seed is not None:
            sim_kw["seed"] = args.seed
        if "noise_is_std" in sim_kw:
            sim_kw["noise_is_std"] = str(sim_kw["noise_is_std"]).lower() in ("1", "true", "yes")
        sim = SimConfig(**sim_kw)
        ctrl = ControllerConfig()
        if "u_max_mlph" in cfg.controller:
            ctrl = replace(ctrl, sat=SaturationLimits(u_max=mlph_to_mgps(float(cfg.controller["u_max_mlph"]))))
        modes = list(MODES) if args.mode == "all" else [args.mode]
        erg_cfg = None
        if "erg" in modes:
            bpath = _resolve_bounds(args, cfg)
            if bpath is None:
                return _fail(EXIT_INVALID, "erg mode needs a bounds file (--bounds or [erg] bounds)")
            overrides = {k: v for k, v in cfg.erg.items() if k not in ("bounds", "inflation")}
            bounds = calibration.read_bounds(bpath)
            if "inflation" in cfg.erg:
                bounds = replace(bounds, inflation=float(cfg.erg["inflation"]))
            erg_cfg = bounds.erg_config(**overrides)
    except (OSError, ValueError, TypeError) as exc:
        return _fail(EXIT_INVALID, str(exc))

    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_INVALID, f"cannot create output directory {out}: {exc}")

    results = _run_modes(cohort, modes, sim, erg_cfg, ctrl, workers)
    write_metrics_csv(results, out / "metrics.csv")
    if args.trajectories:
        for mode, res in results.items():
            for pid, tr in res.trajectories.items():
                tr.to_csv(out / f"traj_{mode}_{pid}.csv")
    report = format_report(results, len(cohort), erg_cfg, sim.noise_std)

    appendix_problems = []
    if args.appendix:
        report += "\n" + _appendix(cohort, sim, ctrl, out, appendix_problems)
    (out / "report.txt").write_text(report)
    print(report, end="")

    if args.strict:
        problems = strict_violations(results, sim.noise_std == 0) + appendix_problems
        if problems:
            for p in problems:
                print(f"strict: {p}", file=sys.stderr)
            return EXIT_STRICT
    return EXIT_OK


def _appendix(cohort, sim, ctrl, out: Path, problems: list) -> str:
    """Hill-versus-linear-gain error for each group's first patient, both gain modes."""
    base = replace(sim, mode="noPrefilter", noise_variance=None)
    lines = ["Hill linearization error e_H (noPrefilter, terminal 5 min max |e_H|)",
             f"{'patient':10s}{'unity':>14s}{'halfGamma':>14s}"]
    for g in range(1, 5):
        members = sorted((p for p in cohort if p.group == g), key=lambda p: p.id)
        if not members:
            continue
        p = members[0]
        term = {}
        for mode in ("unity", "halfGamma"):
            t, e = hill_linearization_error(p, mode, base, ctrl)
            np.savetxt(out / f"appendix_eH_{mode}_{p.id}.csv", np.column_stack([t, e]), delimiter=",",
                       header="t_s,e_H", comments="")
            term[mode] = float(np.max(np.abs(e[t >= t[-1] - 300.0])))
        lines.append(f"{p.id:10s}{term['unity']:>14.3e}{term['halfGamma']:>14.3e}")
        if not (term["halfGamma"] < 0.01 and term["halfGamma"] <= term["unity"]):
            problems.append(f"appendix: {p.id} terminal |e_H| with gamma/2 gain is {term['halfGamma']:.3g}")
    return "\n".join(lines) + "\n"


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="propofol-erg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cohort", help="generate or validate a cohort file")
    csub = p.add_subparsers(dest="action", required=True)
    g = csub.add_parser("generate", help="write a seeded synthetic cohort")
    g.add_argument("--n", type=int, default=44, help="number of patients (default 44)")
    g.add_argument("--seed", type=int, default=SHIPPED_SEED, help="random seed")
    g.add_argument("--spread", type=float, default=SHIPPED_SPREAD,
                   help="relative SD of every parameter around the group anchor")
    g.add_argument("--out", default="cohort.csv", help="output path (default cohort.csv)")
    v = csub.add_parser("validate", help="check a cohort file")
    v.add_argument("path")

    c = sub.add_parser("calibrate", help="Monte Carlo estimate of the governor's safety bounds")
    c.add_argument("--cohort", default=str(data_path(SHIPPED_COHORT)), help="cohort file (default: shipped)")
    c.add_argument("--runs", type=int, default=200, help="staircase runs per patient (default 200)")
    c.add_argument("--seed", type=int, default=7, help="master seed (default 7)")
    c.add_argument("--inflation", type=float, default=1.05, help="safety factor applied by the governor")
    c.add_argument("--sided", choices=("upper", "abs"), default="upper",
                   help="bound y - y_nominal from above only (default) or in absolute value")
    c.add_argument("--out", default="bounds.txt", help="output path (default bounds.txt)")

    r = sub.add_parser("run", help="simulate the cohort and write metrics and a report")
    r.add_argument("--mode", choices=(*MODES, "all"), default="all")
    r.add_argument("--config", help="experiment config file")
    r.add_argument("--cohort", help="cohort file (overrides the config; default: shipped)")
    r.add_argument("--bounds", help="bounds file for erg mode (default: shipped, for the shipped cohort)")
    r.add_argument("--noise", type=float, help="monitor noise variance")
    r.add_argument("--noise-is-std", action="store_true", help="read --noise as a standard deviation")
    r.add_argument("--seed", type=int, help="noise seed")
    r.add_argument("--out", help="output directory (default: config value or ./out)")
    r.add_argument("--trajectories", action="store_true", help="also write one CSV per patient and mode")
    r.add_argument("--appendix", action="store_true", help="emit Hill-linearization error traces")
    r.add_argument("--strict", action="store_true", help="exit 4 if an acceptance check fails")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"cohort": cmd_cohort, "calibrate": cmd_calibrate, "run": cmd_run}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        return _fail(EXIT_INVALID, str(exc))


if __name__ == "__main__":
    sys.exit(main())
