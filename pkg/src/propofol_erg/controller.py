"""Two-degrees-of-freedom PID with back-calculation anti-windup and the passive prefilter.

Control law: ``u = Gff(v) - Gc(y)`` with ``Gff = kp + ki/s`` and
``Gc = kp + ki/s + kd s/(Tf s + 1)``. The two integrators act on the same
error ``v - y`` so they are carried as one state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .patient_model import mlph_to_mgps

U_MAX_MLPH = 600.0


@dataclass(frozen=True)
class PidParams:
    kp: float
    ki: float
    kd: float
    Tt: float  # anti-windup reset time [s]
    Tf: float | None = None  # derivative filter; defaults to kd / (10 kp)

    def __post_init__(self):
        if self.Tf is None:
            object.__setattr__(self, "Tf", self.kd / (10.0 * self.kp))
        for name in ("kp", "ki", "kd", "Tt", "Tf"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be strictly positive, got {val!r}")


@dataclass(frozen=True)
class PrefilterParams:
    Tsp: float

    def __post_init__(self):
        if not (math.isfinite(self.Tsp) and self.Tsp > 0):
            raise ValueError(f"Tsp must be strictly positive, got {self.Tsp!r}")


@dataclass(frozen=True)
class SaturationLimits:
    u_min: float = 0.0
    u_max: float = mlph_to_mgps(U_MAX_MLPH)  # mg/s

    def __post_init__(self):
        if not (self.u_max > self.u_min >= 0):
            raise ValueError("need 0 <= u_min < u_max")


GROUP_GAINS = {
    1: PidParams(2.610, 0.026, 65.09, 49.819),
    2: PidParams(3.947, 0.046, 85.29, 43.024),
    3: PidParams(10.207, 0.107, 202.38, 43.397),
    4: PidParams(4.455, 0.058, 104.83, 42.416),
}

TABLE_III = {
    1: PrefilterParams(156.81),
    2: PrefilterParams(129.90),
    3: PrefilterParams(111.95),
    4: PrefilterParams(124.96),
}


@dataclass(frozen=True)
class ControllerConfig:
    """Per-group gains and prefilter constants plus the pump limits."""

    pid: dict = field(default_factory=lambda: dict(GROUP_GAINS))
    prefilter: dict = field(default_factory=lambda: dict(TABLE_III))
    sat: SaturationLimits = field(default_factory=SaturationLimits)


@dataclass
class ControllerState:
    integrator: float | np.ndarray = 0.0  # mg/s, already scaled by ki
    deriv_filter: float | np.ndarray = 0.0  # filtered measurement
    prefilter: float | np.ndarray = 0.0


def prefilter_step(state: ControllerState, r, Tsp, dt):
    """Advance the low-pass set-point prefilter one step; returns the new v.

    Uses the exact zero-order-hold discretization, so the filter has unity DC
    gain and never overshoots r for any dt.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = np.exp(-dt / np.asarray(Tsp, dtype=float))
    state.prefilter = r + (state.prefilter - r) * a
    return state.prefilter


def pid_output(state: ControllerState, v, y, pid: PidParams, sat: SaturationLimits):
    """Unsaturated and saturated command for the current state (no state update)."""
    deriv = pid.kd * (y - state.deriv_filter) / pid.Tf
    u_unsat = pid.kp * (v - y) + state.integrator - deriv
    return np.clip(u_unsat, sat.u_min, sat.u_max), u_unsat


def two_dof_pid_step(state: ControllerState, v, y, pid: PidParams, sat: SaturationLimits, dt):
    """One forward-Euler step of the 2-DOF PID; returns ``(u_sat, u_unsat)`` in mg/s.

    The integrator rate is ``ki (v - y) + (u_sat - u_unsat) / Tt``.
    Works elementwise when the state, signals and gains are arrays.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    u_sat, u_unsat = pid_output(state, v, y, pid, sat)
    state.integrator = state.integrator + dt * (pid.ki * (v - y) + (u_sat - u_unsat) / pid.Tt)
    state.deriv_filter = state.deriv_filter + dt * (y - state.deriv_filter) / pid.Tf
    return u_sat, u_unsat
