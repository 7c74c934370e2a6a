"""Run the shipped 44-patient cohort in every mode and print the summary table.

    python3 scripts/reproduce_tables.py [--out results/] [--noise 0.0]
"""
import argparse
import time
from pathlib import Path

from propofol_erg import cli
from propofol_erg.calibration import read_bounds
from propofol_erg.controller import ControllerConfig
from propofol_erg.patient_model import load_cohort
from propofol_erg.simkit import MODES, SimConfig, run_cohort_experiment, write_metrics_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None, help="directory for metrics.csv and report.txt")
    ap.add_argument("--noise", type=float, default=0.0, help="measurement-noise variance")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cohort = load_cohort(cli.data_path(cli.SHIPPED_COHORT))
    bounds = read_bounds(cli.data_path(cli.SHIPPED_BOUNDS))
    t0 = time.perf_counter()
    sim = SimConfig(noise_variance=args.noise, seed=args.seed)
    erg_cfg = bounds.erg_config()
    results = run_cohort_experiment(cohort, MODES, sim, erg_cfg, ControllerConfig())
    text = cli.format_report(results, len(cohort), erg_cfg, sim.noise_std)
    print(text)
    print(f"({time.perf_counter() - t0:.1f} s)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(results, out / "metrics.csv")
        (out / "report.txt").write_text(text + "\n")


if __name__ == "__main__":
    main()
