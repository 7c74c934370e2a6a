"""Monte Carlo calibration of the governor's safety bounds.

Each run drives a closed loop from rest with a random staircase reference
(random number of steps, levels and switching times). ``delta0`` bounds the
gap between the nonlinear truth and the group's nominal linear loop;
``delta2`` bounds the gap between the nominal loop and each patient's own
linearized loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import erg as ergmod
from .config import parse_sections
from .controller import ControllerConfig
from .patient_model import PatientModel, group_nominal, linearize
from .simkit import TruthBatch


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StaircaseProtocol:
    duration: float = 1800.0  # s
    max_steps: int = 3
    level_max: float = 0.5
    switch_window: float = 1200.0  # later switches fall in (0, switch_window]
    switch_grid: float = 10.0  # s; switching instants are multiples of this
    # the governor only raises v during induction, so staircases climb by default
    monotone: bool = True

    def draw(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """(switch times, levels); the first switch is at t = 0."""
        k = int(rng.integers(1, self.max_steps + 1))
        slots = int(self.switch_window // self.switch_grid)
        later = np.sort(rng.choice(np.arange(1, slots + 1), size=k - 1, replace=False)) * self.switch_grid
        times = np.concatenate([[0.0], later])
        levels = rng.uniform(0.0, self.level_max, size=k)
        if self.monotone:
            levels.sort()
        return times, levels


def _draw_profiles(protocol: StaircaseProtocol, n_runs: int, seed: int, stream: Sequence[int]):
    k = protocol.max_steps
    times = np.full((n_runs, k), np.inf)
    levels = np.zeros((n_runs, k))
    for i in range(n_runs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, *stream, i]))
        t, lv = protocol.draw(rng)
        times[i, : len(t)] = t
        levels[i, : len(lv)] = lv
        levels[i, len(lv):] = lv[-1]
    return times, levels


def _staircase_at(t: float, times: np.ndarray, levels: np.ndarray) -> np.ndarray:
    idx = np.sum(times <= t + 1e-9, axis=1) - 1
    return levels[np.arange(len(levels)), np.maximum(idx, 0)]


@dataclass
class ErrorStats:
    sup_abs: np.ndarray  # per run, sup_t |y - y_nominal|
    sup_over: np.ndarray  # per run, sup_t (y - y_nominal), floored at 0
    n_samples: int
    n_within_abs: int = 0  # samples with |y - y_nominal| <= threshold
    n_within_over: int = 0  # samples with y - y_nominal <= threshold

    def coverage(self, sided: str = "abs") -> float:
        n = self.n_within_abs if sided == "abs" else self.n_within_over
        return n / self.n_samples


def truth_vs_nominal(patients: Sequence[PatientModel], runs: int, seed: int, *,
                     ctrl: ControllerConfig | None = None, nominal: ergmod.LinearClosedLoop | None = None,
                     dt: float = 0.1, protocol: StaircaseProtocol = StaircaseProtocol(),
                     threshold: float | None = None, stream: Sequence[int] = ()) -> ErrorStats:
    """Run ``runs`` staircase experiments per patient (all in one group) and
    compare the nonlinear output with the nominal linear loop's output."""
    ctrl = ctrl or ControllerConfig()
    groups = {p.group for p in patients}
    if len(groups) != 1:
        raise ValueError("patients must share one age group")
    g = groups.pop()
    if nominal is None:
        nominal = ergmod.build_closed_loop(group_nominal(g), ctrl.pid[g])
    batch = [p for p in patients for _ in range(runs)]
    times, levels = [], []
    for j, p in enumerate(patients):
        tt, lv = _draw_profiles(protocol, runs, seed, (*stream, g, j))
        times.append(tt)
        levels.append(lv)
    times, levels = np.concatenate(times), np.concatenate(levels)
    truth = TruthBatch(batch, ctrl, dt)
    prop = nominal.propagator(dt)
    Phi_T, Gam = prop.Phi.T, prop.Gamma
    c = nominal.C[0]
    x = np.zeros((len(batch), nominal.n))
    steps = int(round(protocol.duration / dt))
    sup_abs = np.zeros(len(batch))
    sup_over = np.zeros(len(batch))
    within_abs = within_over = 0
    for k in range(steps + 1):
        t = k * dt
        err = truth.y - x @ c
        np.maximum(sup_over, err, out=sup_over)
        np.maximum(sup_abs, np.abs(err), out=sup_abs)
        if threshold is not None:
            within_abs += int(np.count_nonzero(np.abs(err) <= threshold))
            within_over += int(np.count_nonzero(err <= threshold))
        if k == steps:
            break
        v = _staircase_at(t, times, levels)
        truth.advance(v)
        x = x @ Phi_T + np.multiply.outer(v, Gam)
        if k % 500 == 0 and truth.diverged().any():
            bad = [batch[i].id for i in np.flatnonzero(truth.diverged())]
            raise CalibrationError(f"calibration simulation diverged for {sorted(set(bad))}")
    return ErrorStats(sup_abs, sup_over, (steps + 1) * len(batch), within_abs, within_over)


def estimate_delta0(cohort: Sequence[PatientModel], group: int, runs: int, seed: int, *,
                    ctrl: ControllerConfig | None = None, nominal: ergmod.LinearClosedLoop | None = None,
                    dt: float = 0.1, protocol: StaircaseProtocol = StaircaseProtocol(),
                    sided: str = "upper") -> float:
    """Largest truth-vs-nominal output gap over the group's patients and runs.

    ``sided="upper"`` bounds only the excess of the true output over the
    prediction, the direction that can break ``y <= y_limit``; ``"abs"``
    bounds the absolute gap.
    """
    if sided not in ("upper", "abs"):
        raise ValueError("sided must be 'upper' or 'abs'")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    members = [p for p in cohort if p.group == group]
    if not members:
        raise ValueError(f"no patients in group {group}")
    stats = truth_vs_nominal(members, runs, seed, ctrl=ctrl, nominal=nominal, dt=dt, protocol=protocol)
    return float((stats.sup_over if sided == "upper" else stats.sup_abs).max())


def estimate_delta2(cohort: Sequence[PatientModel], runs: int, seed: int, *,
                    ctrl: ControllerConfig | None = None, nominals: dict | None = None,
                    patient_systems: dict | None = None, step: float = 1.0,
                    protocol: StaircaseProtocol = StaircaseProtocol()) -> float:
    """Largest gap between each group's nominal loop and its patients' own linear loops.

    ``patient_systems`` maps patient id to a :class:`LinearClosedLoop`; by
    default each patient's loop is built from :func:`linearize`. A patient
    whose own loop is not Hurwitz under the group gains makes the gap
    unbounded and the result ``inf``.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    ctrl = ctrl or ControllerConfig()
    nominals = nominals or {}
    patient_systems = patient_systems or {}
    steps = int(round(protocol.duration / step))
    worst = 0.0
    for g in sorted({p.group for p in cohort}):
        nom = nominals.get(g) or ergmod.build_closed_loop(group_nominal(g), ctrl.pid[g])
        members = [p for p in cohort if p.group == g]
        for j, p in enumerate(members):
            own = patient_systems.get(p.id)
            if own is None:
                try:
                    own = ergmod.build_closed_loop(linearize(p), ctrl.pid[g])
                except ergmod.NotHurwitzError:
                    return math.inf
            n1, n2 = nom.n, own.n
            A = np.zeros((n1 + n2, n1 + n2))
            A[:n1, :n1], A[n1:, n1:] = nom.A, own.A
            B = np.vstack([nom.B, own.B])
            Phi, Gam = ergmod._zoh(A, B, step)
            Phi_T, Gam = Phi.T, Gam[:, 0]
            c = np.concatenate([nom.C[0], -own.C[0]])
            times, levels = _draw_profiles(protocol, runs, seed, (g, j))
            x = np.zeros((runs, n1 + n2))
            for k in range(steps + 1):
                worst = max(worst, float(np.abs(x @ c).max()))
                v = _staircase_at(k * step, times, levels)
                x = x @ Phi_T + np.multiply.outer(v, Gam)
    return worst


# --- bounds file ---------------------------------------------------------------

@dataclass(frozen=True)
class Bounds:
    delta0: dict  # group -> raw bound
    delta2: float
    inflation: float
    seed: int
    runs: int

    def erg_config(self, **overrides) -> ergmod.ErgConfig:
        return ergmod.ErgConfig(delta0=dict(self.delta0), delta2=self.delta2, inflation=self.inflation, **overrides)


def calibrate(cohort: Sequence[PatientModel], runs: int, seed: int, *, inflation: float = 1.05,
              ctrl: ControllerConfig | None = None, dt: float = 0.1,
              protocol: StaircaseProtocol = StaircaseProtocol(), sided: str = "upper") -> Bounds:
    groups = sorted({p.group for p in cohort})
    d0 = {g: estimate_delta0(cohort, g, runs, seed, ctrl=ctrl, dt=dt, protocol=protocol, sided=sided)
          for g in groups}
    d2 = estimate_delta2(cohort, runs, seed, ctrl=ctrl, protocol=protocol)
    if not math.isfinite(d2):
        ctrl = ctrl or ControllerConfig()
        bad = []
        for p in cohort:
            try:
                ergmod.build_closed_loop(linearize(p), ctrl.pid[p.group])
            except ergmod.NotHurwitzError:
                bad.append(p.id)
        raise CalibrationError(f"linearized loop unstable under the group gains for {', '.join(bad)}")
    return Bounds(d0, d2, inflation, seed, runs)


def format_bounds(b: Bounds) -> str:
    lines = [
        "# safety bounds for the reference governor; *_inflated = raw * inflation",
        "[calibration]",
        f"seed = {b.seed}",
        f"runs = {b.runs}",
        f"inflation = {b.inflation!r}",
        f"delta2 = {b.delta2!r}",
        f"delta2_inflated = {b.delta2 * b.inflation!r}",
    ]
    for g in sorted(b.delta0):
        lines += ["", f"[group {g}]", f"delta0 = {b.delta0[g]!r}", f"delta0_inflated = {b.delta0[g] * b.inflation!r}"]
    return "\n".join(lines) + "\n"


def write_bounds(b: Bounds, path) -> None:
    Path(path).write_text(format_bounds(b))


def read_bounds(path) -> Bounds:
    sec = parse_sections(Path(path).read_text())
    cal = sec.get("calibration")
    if cal is None:
        raise ValueError(f"{path}: missing [calibration] section")
    d0 = {}
    for name, vals in sec.items():
        if name.startswith("group "):
            d0[int(name.split()[1])] = float(vals["delta0"])
    if not d0:
        raise ValueError(f"{path}: no [group N] sections")
    return Bounds(d0, float(cal["delta2"]), float(cal["inflation"]), int(cal["seed"]), int(cal["runs"]))
