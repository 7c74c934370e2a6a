"""Compare the unit-slope and gamma/2-slope linearizations of the Hill curve along closed-loop runs.

Prints the terminal (last 5 min) and peak |e_H| for each anchor patient and mode.

    python3 scripts/appendix_study.py [--mode noPrefilter]
"""
import argparse

import numpy as np

from propofol_erg import erg as ergmod
from propofol_erg.patient_model import anchor_patient
from propofol_erg.simkit import MODES, SimConfig, hill_linearization_error


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", choices=MODES, default="noPrefilter")
    args = ap.parse_args()
    cfg = SimConfig(mode=args.mode)
    erg = ergmod.ErgConfig() if args.mode == "erg" else None
    print("patient   gamma  terminal(unity)  terminal(gamma/2)  peak(unity)  peak(gamma/2)")
    for g in range(1, 5):
        p = anchor_patient(g)
        t, eu = hill_linearization_error(p, "unity", cfg, erg=erg)
        _, eh = hill_linearization_error(p, "halfGamma", cfg, erg=erg)
        tail = t >= t[-1] - 300.0
        print(f"{p.id:8s}  {p.pd.gamma:5.2f}  {np.abs(eu[tail]).max():15.2e}  {np.abs(eh[tail]).max():17.2e}  "
              f"{np.abs(eu).max():11.3f}  {np.abs(eh).max():13.3f}")


if __name__ == "__main__":
    main()
