"""Regenerate the shipped cohort and its calibrated bounds and compare with the packaged copies.

    python3 scripts/calibrate_shipped.py [--out build/]
"""
import argparse
import filecmp
from pathlib import Path

from propofol_erg import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="build")
    ap.add_argument("--runs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort, bounds = out / cli.SHIPPED_COHORT, out / cli.SHIPPED_BOUNDS
    cli.main(["cohort", "generate", "--n", "44", "--seed", str(cli.SHIPPED_SEED),
              "--spread", str(cli.SHIPPED_SPREAD), "--out", str(cohort)])
    code = cli.main(["calibrate", "--cohort", str(cohort), "--runs", str(args.runs), "--seed", str(args.seed),
                     "--out", str(bounds)])
    if code:
        raise SystemExit(code)
    for path in (cohort, bounds):
        same = filecmp.cmp(path, cli.data_path(path.name), shallow=False)
        print(f"{path.name}: {'identical to' if same else 'DIFFERS from'} packaged copy")


if __name__ == "__main__":
    main()
