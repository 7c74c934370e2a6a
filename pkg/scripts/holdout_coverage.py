"""Coverage of the shipped inflated delta0 on fresh staircase runs (not used in calibration).

    python3 scripts/holdout_coverage.py [--runs 19] [--seed 12345]
"""
import argparse

from propofol_erg import cli
from propofol_erg.calibration import read_bounds, truth_vs_nominal
from propofol_erg.patient_model import load_cohort


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=19, help="runs per patient")
    ap.add_argument("--seed", type=int, default=12345)
    args = ap.parse_args()
    cohort = load_cohort(cli.data_path(cli.SHIPPED_COHORT))
    b = read_bounds(cli.data_path(cli.SHIPPED_BOUNDS))
    print("group  threshold  cover|y-y~|  cover(y-y~)  sup|y-y~|  sup(y-y~)")
    for g in range(1, 5):
        members = [p for p in cohort if p.group == g]
        thr = b.delta0[g] * b.inflation
        s = truth_vs_nominal(members, args.runs, args.seed, threshold=thr, stream=(99,))
        print(f"{g:5d}  {thr:9.4f}  {100 * s.coverage('abs'):10.2f}%  {100 * s.coverage('upper'):10.2f}%  "
              f"{s.sup_abs.max():9.4f}  {s.sup_over.max():9.4f}")


if __name__ == "__main__":
    main()
