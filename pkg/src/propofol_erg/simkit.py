"""Fixed-step closed-loop simulation of virtual induction, metrics and experiments.

All patients of a batch are integrated together with numpy; every per-patient
quantity is an array over the batch axis. Plant ODEs use RK4 with the infusion,
the delayed plasma sample and any monitor noise held over each step; the
controller, prefilter and governor run once per step at the same rate.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from types import SimpleNamespace
from typing import Sequence

import numpy as np

from . import erg as ergmod
from .controller import ControllerConfig, ControllerState, pid_output
from .patient_model import MONITOR_TAU, PatientModel, delay_steps, group_nominal, hill, mgps_to_mlph

MODES = ("noPrefilter", "passivePrefilter", "erg")
DIVERGENCE_LIMIT = 1e6


class SimulationDiverged(RuntimeError):
    def __init__(self, patient_ids, t):
        super().__init__(f"state exceeded {DIVERGENCE_LIMIT:g} at t={t:.1f}s for {', '.join(patient_ids)}")
        self.patient_ids = list(patient_ids)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    duration: float = 1800.0
    mode: str = "erg"
    r: float = 0.5
    noise_variance: float | None = None
    # read noise_variance as a standard deviation instead
    noise_is_std: bool = False
    seed: int = 0
    # None -> Hill curve; "unity" / "halfGamma" -> line of slope 1 / gamma/2 through Er = Eo = 0.5
    hill_gain: str | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.duration < self.dt:
            raise ValueError("duration must be at least one step")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.r < 1:
            raise ValueError("r must lie in [0, 1)")
        if self.noise_variance is not None and self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        if self.hill_gain not in (None, "unity", "halfGamma"):
            raise ValueError("hill_gain must be None, 'unity' or 'halfGamma'")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def noise_std(self) -> float:
        if not self.noise_variance:
            return 0.0
        return self.noise_variance if self.noise_is_std else math.sqrt(self.noise_variance)


@dataclass
class Trajectory:
    t: np.ndarray
    r: np.ndarray
    v: np.ndarray
    u: np.ndarray  # mg/s, saturated
    C1: np.ndarray
    Er: np.ndarray
    Eo: np.ndarray
    y: np.ndarray
    Delta: np.ndarray | None = None
    patient_id: str = ""

    @property
    def DOH(self) -> np.ndarray:
        return 100.0 * (1.0 - self.y)

    def to_csv(self, path) -> None:
        header = "t_s,r,v,u_mgps,u_mlph,C1_ugml,Er,Eo,y,DOH,Delta"
        u_mlph = mgps_to_mlph(self.u)
        doh = self.DOH
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i in range(len(self.t)):
                delta = "" if self.Delta is None else repr(float(self.Delta[i]))
                row = (self.t[i], self.r[i], self.v[i], self.u[i], u_mlph[i], self.C1[i],
                       self.Er[i], self.Eo[i], self.y[i], doh[i])
                fh.write(",".join(repr(float(x)) for x in row) + "," + delta + "\n")


# --- batched truth model ----------------------------------------------------

def _stack_params(patients: Sequence[PatientModel]) -> SimpleNamespace:
    get = lambda f: np.array([f(p) for p in patients], dtype=float)  # noqa: E731
    return SimpleNamespace(
        V1=get(lambda p: p.pk.V1),
        k10=get(lambda p: p.pk.k10), k12=get(lambda p: p.pk.k12), k13=get(lambda p: p.pk.k13),
        k21=get(lambda p: p.pk.k21), k31=get(lambda p: p.pk.k31),
        Td=get(lambda p: p.pd.Td), kd=get(lambda p: p.pd.kd),
        EC50=get(lambda p: p.pd.EC50), gamma=get(lambda p: p.pd.gamma),
    )


def _stack_pid(patients, ctrl: ControllerConfig) -> SimpleNamespace:
    pids = [ctrl.pid[p.group] for p in patients]
    return SimpleNamespace(**{f: np.array([getattr(q, f) for q in pids]) for f in ("kp", "ki", "kd", "Tt", "Tf")})


class TruthBatch:
    """Nonlinear PKPD + monitor + 2-DOF PID for a batch of patients.

    State columns: C1, C2, C3, Er, m1, m2. ``advance(v)`` applies one control
    step and integrates the plant over ``dt``.
    """

    def __init__(self, patients: Sequence[PatientModel], ctrl: ControllerConfig, dt: float,
                 hill_gain: str | None = None):
        self.patients = list(patients)
        n = len(self.patients)
        self.dt = dt
        self.par = par = _stack_params(self.patients)
        self.pid = _stack_pid(self.patients, ctrl)
        self.sat = ctrl.sat
        self.hill_gain = hill_gain
        if hill_gain == "unity":
            self.lin_gain = np.ones(n)
        elif hill_gain == "halfGamma":
            self.lin_gain = par.gamma / 2.0
        else:
            self.lin_gain = None
        a = 1.0 / MONITOR_TAU
        A = np.zeros((n, 6, 6))
        A[:, 0, 0] = -(par.k10 + par.k12 + par.k13)
        A[:, 0, 1] = par.k12
        A[:, 0, 2] = par.k13
        A[:, 1, 0] = par.k21
        A[:, 1, 1] = -par.k21
        A[:, 2, 0] = par.k31
        A[:, 2, 2] = -par.k31
        A[:, 3, 3] = -par.kd
        A[:, 4, 4] = -a
        A[:, 5, 4] = a
        A[:, 5, 5] = -a
        self.A = A
        self.in_gain = 1.0 / par.V1
        self.pd_gain = par.kd / (2.0 * par.EC50)
        self.S = np.zeros((n, 6))
        self.ctrl = ControllerState(np.zeros(n), np.zeros(n))
        self.delay = np.array([delay_steps(td, dt) for td in par.Td], dtype=int)
        self.buf = np.zeros((n, int(self.delay.max()) + 1))
        self.head = 0
        self.rows = np.arange(n)

    @property
    def y(self) -> np.ndarray:
        return self.S[:, 5]

    @property
    def Er(self) -> np.ndarray:
        return self.S[:, 3]

    def effect(self, Er):
        if self.lin_gain is None:
            return hill(Er, self.par.gamma)
        # straight line through the operating point (0.5, 0.5); unit slope also passes the origin
        return 0.5 + self.lin_gain * (Er - 0.5)

    def _rhs(self, S, const):
        d = np.matmul(self.A, S[:, :, None])[:, :, 0] + const
        d[:, 4] += self.effect(S[:, 3]) / MONITOR_TAU
        return d

    def advance(self, v, noise=None):
        """Control step at the current sample, then RK4 over one ``dt``. Returns (u_sat, u_unsat)."""
        dt = self.dt
        L = self.buf.shape[1]
        self.buf[:, self.head] = self.S[:, 0]
        c1_delayed = self.buf[self.rows, (self.head - self.delay) % L]
        self.head = (self.head + 1) % L
        y = self.S[:, 5]
        st = self.ctrl
        u_sat, u_unsat = pid_output(st, v, y, self.pid, self.sat)
        st.integrator = st.integrator + dt * (self.pid.ki * (v - y) + (u_sat - u_unsat) / self.pid.Tt)
        st.deriv_filter = st.deriv_filter + dt * (y - st.deriv_filter) / self.pid.Tf
        const = np.zeros_like(self.S)
        const[:, 0] = u_sat * self.in_gain
        const[:, 3] = self.pd_gain * c1_delayed
        if noise is not None:
            const[:, 4] = noise / MONITOR_TAU
        S = self.S
        k1 = self._rhs(S, const)
        k2 = self._rhs(S + 0.5 * dt * k1, const)
        k3 = self._rhs(S + 0.5 * dt * k2, const)
        k4 = self._rhs(S + dt * k3, const)
        self.S = S + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return u_sat, u_unsat

    def diverged(self) -> np.ndarray:
        big = np.abs(self.S).max(axis=1) > DIVERGENCE_LIMIT
        big |= np.abs(self.ctrl.integrator) > DIVERGENCE_LIMIT
        return big | ~np.isfinite(self.S).all(axis=1)


def _noise_rng(seed: int, patient_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(patient_id.encode())]))


class GovernorBatch:
    """ERG for a batch; each patient uses its age group's nominal loop and bounds."""

    def __init__(self, patients: Sequence[PatientModel], ctrl: ControllerConfig, cfg: ergmod.ErgConfig, dt: float,
                 nominals: dict | None = None):
        self.cfg = cfg
        groups = sorted({p.group for p in patients})
        nominals = nominals or {}
        preds, props = {}, {}
        for g in groups:
            nom = nominals.get(g) or group_nominal(g)
            sys = ergmod.build_closed_loop(nom, ctrl.pid[g], cfg.pade_order)
            preds[g] = ergmod.Predictor.build(sys, cfg.horizon, cfg.grid_step)
            props[g] = sys.propagator(dt)
        idx = [p.group for p in patients]
        self.state_map = np.stack([preds[g].state_map for g in idx])
        self.input_map = np.stack([preds[g].input_map for g in idx])
        self.Phi = np.stack([props[g].Phi for g in idx])
        self.Gamma = np.stack([props[g].Gamma for g in idx])
        self.delta0 = np.array([cfg.delta0_used(g) for g in idx])
        self.delta2 = cfg.delta2_used
        n = len(idx)
        self.gov = ergmod.GovernorState(np.zeros(n), np.zeros((n, self.Phi.shape[1])), np.zeros(n), 0.0)

    def update(self, t: float, r: float, dt: float):
        """Compute the margin at the current reference, move v, propagate the internal model."""
        gov, cfg = self.gov, self.cfg
        anchor = gov.t_ref_change if cfg.delta1_anchor == "reference" else gov.t_last_move
        d1 = ergmod.delta1(t, anchor, self.delta0, cfg.delta1_hold, cfg.delta1_tau)
        base = np.matmul(self.state_map, gov.x[:, :, None])[:, :, 0]
        pred = base + self.input_map * gov.v[:, None]
        margin = ergmod.dsm(pred, d1, self.delta2, cfg.y_limit)
        level = cfg.y_limit - d1 - self.delta2
        bounds = ergmod.admissible_interval(base, self.input_map, level)
        ergmod.erg_step(gov, r, margin, cfg, dt, t=t, bounds=bounds)
        gov.x = np.matmul(self.Phi, gov.x[:, :, None])[:, :, 0] + self.Gamma * gov.v[:, None]
        return gov.v, margin


@dataclass
class BatchResult:
    trajectories: list
    failed: dict = field(default_factory=dict)  # patient id -> message


def simulate(patients: Sequence[PatientModel], ctrl: ControllerConfig, sim: SimConfig,
             erg: ergmod.ErgConfig | None = None, nominals: dict | None = None) -> BatchResult:
    """Simulate every patient of ``patients`` under one configuration.

    Patients whose states blow up are frozen at rest, excluded from the
    returned trajectories and listed in ``failed``.
    """
    if (sim.mode == "erg") != (erg is not None):
        raise ValueError("an ErgConfig is required for, and only for, mode='erg'")
    patients = list(patients)
    n, steps, dt = len(patients), sim.n_steps, sim.dt
    truth = TruthBatch(patients, ctrl, dt, sim.hill_gain)
    governor = GovernorBatch(patients, ctrl, erg, dt, nominals) if erg is not None else None
    if sim.mode == "passivePrefilter":
        tsp = np.array([ctrl.prefilter[p.group].Tsp for p in patients])
        pre_decay = np.exp(-dt / tsp)
    noise = None
    if sim.noise_std > 0:
        noise = np.stack([_noise_rng(sim.seed, p.id).standard_normal(steps) for p in patients]) * sim.noise_std

    rec = {k: np.empty((n, steps + 1)) for k in ("v", "u", "C1", "Er", "Eo", "y", "Delta")}
    v = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    failed = {}
    for k in range(steps + 1):
        t = k * dt
        if sim.mode == "noPrefilter":
            v = np.full(n, sim.r)
        elif sim.mode == "erg":
            v, margin = governor.update(t, sim.r, dt)
            rec["Delta"][:, k] = margin
        rec["v"][:, k] = v
        rec["C1"][:, k] = truth.S[:, 0]
        rec["Er"][:, k] = truth.Er
        rec["Eo"][:, k] = truth.effect(truth.Er)
        rec["y"][:, k] = truth.y
        if k == steps:
            u, _ = pid_output(truth.ctrl, v, truth.y, truth.pid, truth.sat)
        else:
            u, _ = truth.advance(v, None if noise is None else noise[:, k])
        rec["u"][:, k] = u
        if sim.mode == "passivePrefilter":
            v = sim.r + (v - sim.r) * pre_decay
        if k % 50 == 0 or k == steps:
            bad = truth.diverged() & alive
            if bad.any():
                for i in np.flatnonzero(bad):
                    failed[patients[i].id] = f"diverged at t={t:.1f}s"
                alive &= ~bad
                truth.S[bad] = 0.0
                truth.ctrl.integrator[bad] = 0.0

    t_grid = np.arange(steps + 1) * dt
    trajs = []
    for i, p in enumerate(patients):
        if not alive[i]:
            continue
        trajs.append(Trajectory(
            t_grid, np.full(steps + 1, sim.r), rec["v"][i], rec["u"][i], rec["C1"][i], rec["Er"][i],
            rec["Eo"][i], rec["y"][i], rec["Delta"][i] if sim.mode == "erg" else None, p.id))
    return BatchResult(trajs, failed)


def run_induction(patient: PatientModel, ctrl: ControllerConfig, sim: SimConfig,
                  erg: ergmod.ErgConfig | None = None, nominals: dict | None = None) -> Trajectory:
    """One virtual induction from a fully awake patient; raises on divergence."""
    res = simulate([patient], ctrl, sim, erg, nominals)
    if res.failed:
        raise SimulationDiverged(list(res.failed), sim.duration)
    return res.trajectories[0]


# --- metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class InductionMetrics:
    """Induction-phase figures of merit. Times in seconds, None when never reached."""

    rise_time: float | None
    settling_time: float | None
    overshoot: float  # percent of r
    drug_used_8min: float  # ml of 10 mg/ml propofol
    overdosed: bool
    max_y: float


def compute_metrics(traj: Trajectory, r: float, y_limit: float = 0.6, band: float = 0.05) -> InductionMetrics:
    y, t = traj.y, traj.t
    if len(y) == 0:
        raise ValueError("empty trajectory")

    def first_reach(level):
        idx = np.flatnonzero(y >= level)
        return t[idx[0]] if idx.size else None

    t10, t90 = first_reach(0.1 * r), first_reach(0.9 * r)
    rise = None if t10 is None or t90 is None else float(t90 - t10)
    outside = np.flatnonzero(np.abs(y - r) > band * r)
    if outside.size == 0:
        settling = 0.0
    elif outside[-1] == len(y) - 1:
        settling = None
    else:
        settling = float(t[outside[-1] + 1])
    overshoot = max(0.0, 100.0 * (float(y.max()) - r) / r)
    mask = t <= 480.0 + 1e-9
    u, tt = traj.u[mask], t[mask]
    mg = float(np.sum(u[:-1] * np.diff(tt))) if len(tt) > 1 else 0.0
    return InductionMetrics(rise, settling, overshoot, mg / 10.0, bool(np.any(y > y_limit)), float(y.max()))


# --- appendix ---------------------------------------------------------------

def hill_linearization_error(patient: PatientModel, gain_mode: str, sim: SimConfig,
                             ctrl: ControllerConfig | None = None,
                             erg: ergmod.ErgConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Closed-loop output difference between Hill-curve and linear-gain effect models.

    Returns ``(t, e_H)`` with ``e_H = y_nonlinear - y_linear``.
    """
    if gain_mode not in ("unity", "halfGamma"):
        raise ValueError("gain_mode must be 'unity' or 'halfGamma'")
    ctrl = ctrl or ControllerConfig()
    base = replace(sim, hill_gain=None)
    nl = run_induction(patient, ctrl, base, erg)
    lin = run_induction(patient, ctrl, replace(sim, hill_gain=gain_mode), erg)
    return nl.t, nl.y - lin.y


# --- cohort experiment --------------------------------------------------------

METRIC_NAMES = ("rise_time", "settling_time", "overshoot", "drug_used_8min")


@dataclass
class ModeResult:
    mode: str
    metrics: dict  # patient id -> InductionMetrics
    failed: dict
    trajectories: dict

    @property
    def overdosed(self) -> int:
        return sum(m.overdosed for m in self.metrics.values())

    @property
    def partial(self) -> bool:
        return bool(self.failed)

    def aggregate(self) -> dict:
        """mean, SD, min, max per metric over patients that reached it."""
        out = {}
        for name in METRIC_NAMES:
            vals = np.array([getattr(m, name) for m in self.metrics.values() if getattr(m, name) is not None],
                            dtype=float)
            if vals.size == 0:
                out[name] = dict(mean=math.nan, sd=math.nan, min=math.nan, max=math.nan, n=0)
            else:
                out[name] = dict(mean=float(vals.mean()), sd=float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                                 min=float(vals.min()), max=float(vals.max()), n=int(vals.size))
        return out


def run_cohort_experiment(cohort: Sequence[PatientModel], modes: Sequence[str], sim: SimConfig,
                          erg: ergmod.ErgConfig | None = None, ctrl: ControllerConfig | None = None,
                          keep_trajectories: bool = False) -> dict:
    """Simulate every patient under each mode; returns ``{mode: ModeResult}``."""
    if not cohort:
        raise ValueError("cohort is empty")
    ctrl = ctrl or ControllerConfig()
    cohort = sorted(cohort, key=lambda p: p.id)
    out = {}
    for mode in modes:
        cfg = replace(sim, mode=mode)
        res = simulate(cohort, ctrl, cfg, erg if mode == "erg" else None)
        metrics = {tr.patient_id: compute_metrics(tr, sim.r) for tr in res.trajectories}
        trajs = {tr.patient_id: tr for tr in res.trajectories} if keep_trajectories else {}
        out[mode] = ModeResult(mode, metrics, res.failed, trajs)
    return out


def write_metrics_csv(results: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("patient,mode,rise_time_s,settling_time_s,overshoot_pct,drug_used_8min_ml,max_y,overdosed\n")
        for mode, res in results.items():
            for pid in sorted(res.metrics):
                m = res.metrics[pid]
                cells = [pid, mode,
                         "" if m.rise_time is None else repr(m.rise_time),
                         "" if m.settling_time is None else repr(m.settling_time),
                         repr(m.overshoot), repr(m.drug_used_8min), repr(m.max_y), str(int(m.overdosed))]
                fh.write(",".join(cells) + "\n")
