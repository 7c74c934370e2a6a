"""Explicit Reference Governor for the overdose constraint ``y <= y_limit``.

The governor keeps an internal copy of the nominal linear closed loop driven by
the applied auxiliary reference ``v``, predicts its output over a fixed horizon
with an exact matrix-exponential propagator, and lets ``v`` move toward ``r``
only while the resulting dynamic safety margin stays non-negative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import expm

from .controller import PidParams
from .patient_model import MONITOR_TAU, NominalLinearModel

DELTA0_DEFAULT = {1: 0.1350, 2: 0.1888, 3: 0.1907, 4: 0.1354}
DELTA2_DEFAULT = 0.08


class NotHurwitzError(ValueError):
    pass


@dataclass(frozen=True)
class ErgConfig:
    kappa: float = 1e5
    eta: float = 0.01
    horizon: float = 300.0  # s
    grid_step: float = 1.0  # s
    delta0: dict = field(default_factory=lambda: dict(DELTA0_DEFAULT))  # raw, per group
    delta2: float = DELTA2_DEFAULT  # raw
    inflation: float = 1.05
    y_limit: float = 0.6
    delta1_hold: float = 120.0  # s
    delta1_tau: float = 300.0  # s
    # "reference": delta1 clock restarts when r changes; "move": whenever v moves
    delta1_anchor: str = "reference"
    pade_order: int = 2

    def __post_init__(self):
        if not (self.kappa > 0 and self.eta > 0 and self.horizon > 0 and self.grid_step > 0):
            raise ValueError("kappa, eta, horizon and grid_step must be positive")
        if not 0 < self.y_limit < 1:
            raise ValueError("y_limit must lie in (0, 1)")
        if self.inflation < 1:
            raise ValueError("inflation must be >= 1")
        if self.delta2 < 0 or any(d < 0 for d in self.delta0.values()):
            raise ValueError("safety bounds must be non-negative")
        if self.delta1_hold < 0 or self.delta1_tau <= 0:
            raise ValueError("delta1_hold must be >= 0 and delta1_tau > 0")
        if self.delta1_anchor not in ("reference", "move"):
            raise ValueError("delta1_anchor must be 'reference' or 'move'")
        n = self.horizon / self.grid_step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("grid_step must divide the horizon")

    def delta0_used(self, group: int) -> float:
        return self.delta0[group] * self.inflation

    @property
    def delta2_used(self) -> float:
        return self.delta2 * self.inflation


# --- state-space plumbing --------------------------------------------------

@dataclass(frozen=True)
class StateSpace:
    A: np.ndarray
    B: np.ndarray  # (n, 1)
    C: np.ndarray  # (1, n)
    D: float = 0.0

    @property
    def n(self) -> int:
        return self.A.shape[0]


def _series(first: StateSpace, second: StateSpace) -> StateSpace:
    """``second`` fed by the output of ``first``."""
    n1, n2 = first.n, second.n
    A = np.zeros((n1 + n2, n1 + n2))
    A[:n1, :n1] = first.A
    A[n1:, :n1] = second.B @ first.C
    A[n1:, n1:] = second.A
    B = np.vstack([first.B, second.B * first.D])
    C = np.hstack([second.D * first.C, second.C])
    return StateSpace(A, B, C, second.D * first.D)


def _lead_lag(zero: float | None, pole: float) -> StateSpace:
    # (s + zero)/(s + pole), or 1/(s + pole) when zero is None
    A = np.array([[-pole]])
    B = np.array([[1.0]])
    if zero is None:
        return StateSpace(A, B, np.array([[1.0]]), 0.0)
    return StateSpace(A, B, np.array([[zero - pole]]), 1.0)


def _tf_to_ss(num: np.ndarray, den: np.ndarray) -> StateSpace:
    """Controllable canonical form of a proper rational function."""
    num = np.atleast_1d(np.asarray(num, dtype=float))
    den = np.atleast_1d(np.asarray(den, dtype=float))
    num, den = num / den[0], den / den[0]
    n = len(den) - 1
    if n == 0:
        return StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), float(num[-1]))
    num = np.concatenate([np.zeros(n + 1 - len(num)), num])
    d = num[0]
    rem = num[1:] - d * den[1:]
    A = np.zeros((n, n))
    A[0, :] = -den[1:]
    A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    return StateSpace(A, B, rem.reshape(1, n), float(d))


def pade_delay(Td: float, order: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal Pade approximant of exp(-Td s) as (num, den), highest power first."""
    if Td < 0:
        raise ValueError("Td must be non-negative")
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    if Td == 0:
        return np.array([1.0]), np.array([1.0])
    c = [math.factorial(2 * order - k) * math.factorial(order)
         / (math.factorial(2 * order) * math.factorial(k) * math.factorial(order - k))
         for k in range(order + 1)]
    num = np.array([c[k] * (-Td) ** k for k in range(order, -1, -1)])
    den = np.array([c[k] * Td ** k for k in range(order, -1, -1)])
    return num, den


def pkpd_state_space(nom: NominalLinearModel, pade_order: int = 2) -> StateSpace:
    """Cascade realization of the linear PKPD model with the delay Pade-approximated."""
    p1, p2, p3, p4 = nom.poles
    z1, z2 = nom.zeros
    sys = _lead_lag(None, p1)
    sys = _series(sys, _lead_lag(z1, p2))
    sys = _series(sys, _lead_lag(z2, p3))
    sys = _series(sys, _lead_lag(None, p4))
    sys = StateSpace(sys.A, sys.B * nom.K, sys.C, sys.D * nom.K)
    if nom.Td > 0:
        sys = _series(sys, _tf_to_ss(*pade_delay(nom.Td, pade_order)))
    return sys


def monitor_state_space() -> StateSpace:
    a = 1.0 / MONITOR_TAU
    return StateSpace(np.array([[-a, 0.0], [a, -a]]), np.array([[a], [0.0]]), np.array([[0.0, 1.0]]), 0.0)


@dataclass(frozen=True)
class LinearClosedLoop:
    """``x' = A x + B v``, ``y = C x``; the nominal pre-stabilized loop."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float = 0.0

    def __post_init__(self):
        eig = np.linalg.eigvals(self.A)
        if not np.all(eig.real < 0):
            raise NotHurwitzError(f"closed-loop matrix is not Hurwitz; max Re(eig) = {eig.real.max():.3e}")
        if self.D != 0:
            raise ValueError("closed loop must be strictly proper (D = 0)")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @cached_property
    def dc_gain(self) -> float:
        return float(-(self.C @ np.linalg.solve(self.A, self.B))[0, 0])

    def propagator(self, h: float) -> "Propagator":
        return Propagator.from_system(self, h)


def build_closed_loop(nom: NominalLinearModel, pid: PidParams, pade_order: int = 2) -> LinearClosedLoop:
    """Assemble the nominal loop: controller, Pade-approximated PKPD, monitor.

    Controller states are ``[integral, derivative filter]`` with
    ``u = kp (v - y) + integral - kd (y - xf)/Tf``; PKPD states follow, then
    the two monitor states. Raises :class:`NotHurwitzError` if unstable.
    """
    plant = pkpd_state_space(nom, pade_order)
    sensor = monitor_state_space()
    n3, n4 = plant.n, sensor.n
    n = 2 + n3 + n4
    i3, i4 = slice(2, 2 + n3), slice(2 + n3, n)
    Cy = np.zeros((1, n))
    Cy[:, i4] = sensor.C
    # u = Kx x + kp v
    Kx = np.zeros((1, n))
    Kx[0, 0] = 1.0
    Kx[0, 1] = pid.kd / pid.Tf
    Kx -= (pid.kp + pid.kd / pid.Tf) * Cy
    A = np.zeros((n, n))
    B = np.zeros((n, 1))
    A[0, :] = -pid.ki * Cy
    B[0, 0] = pid.ki
    A[1, :] = Cy / pid.Tf
    A[1, 1] -= 1.0 / pid.Tf
    A[i3, :] = plant.B @ Kx
    A[i3, i3] += plant.A
    B[i3, :] = plant.B * pid.kp
    A[i4, i3] = sensor.B @ plant.C
    A[i4, i4] = sensor.A
    # plant.D is zero: the PKPD model has relative degree >= 2
    return LinearClosedLoop(A, B, Cy, 0.0)


def _zoh(A: np.ndarray, B: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A * h
    M[:n, n:] = B * h
    E = expm(M)
    return E[:n, :n], E[:n, n:]


@dataclass(frozen=True)
class Propagator:
    """Exact one-step map ``x+ = Phi x + Gamma v`` for ``v`` held over ``h``."""

    h: float
    Phi: np.ndarray
    Gamma: np.ndarray  # (n,)

    @classmethod
    def from_system(cls, sys: LinearClosedLoop, h: float) -> "Propagator":
        Phi, Gamma = _zoh(sys.A, sys.B, h)
        return cls(h, Phi, Gamma[:, 0])

    def step(self, x, v):
        return x @ self.Phi.T + np.multiply.outer(v, self.Gamma)


@dataclass(frozen=True)
class Predictor:
    """Output prediction over ``[t, t + horizon]`` on a uniform grid.

    ``predict(x, v)`` returns ``state_map @ x + input_map * v``; both maps
    are built once by iterating the grid propagator.
    """

    sys: LinearClosedLoop
    horizon: float
    grid_step: float
    state_map: np.ndarray  # (K+1, n): C Phi^k
    input_map: np.ndarray  # (K+1,): C sum_{j<k} Phi^j Gamma

    @classmethod
    def build(cls, sys: LinearClosedLoop, horizon: float = 300.0, grid_step: float = 1.0) -> "Predictor":
        k_max = int(round(horizon / grid_step))
        if abs(k_max * grid_step - horizon) > 1e-9 * horizon:
            raise ValueError("grid_step must divide the horizon")
        prop = sys.propagator(grid_step)
        n = sys.n
        state_map = np.empty((k_max + 1, n))
        input_map = np.empty(k_max + 1)
        row = sys.C[0].copy()
        acc = np.zeros(n)  # sum_{j<k} Phi^j Gamma
        power_gamma = prop.Gamma.copy()
        for k in range(k_max + 1):
            state_map[k] = row
            input_map[k] = sys.C[0] @ acc + sys.D
            row = row @ prop.Phi
            acc = acc + power_gamma
            power_gamma = prop.Phi @ power_gamma
        return cls(sys, horizon, grid_step, state_map, input_map)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.input_map)) * self.grid_step

    def predict(self, x, v):
        """Predicted outputs; ``x`` may be (n,) or (N, n) with ``v`` scalar or (N,)."""
        x = np.asarray(x, dtype=float)
        return x @ self.state_map.T + np.multiply.outer(v, self.input_map)


def predict_output(sys: LinearClosedLoop, x, v, horizon: float = 300.0, grid_step: float = 1.0) -> np.ndarray:
    """Held-reference output prediction; builds a fresh :class:`Predictor`."""
    return Predictor.build(sys, horizon, grid_step).predict(x, v)


def predict_output_direct(sys: LinearClosedLoop, x, v, times) -> np.ndarray:
    """Same prediction evaluated independently at each time with its own exponential."""
    x = np.asarray(x, dtype=float)
    out = np.empty(len(times))
    for i, tau in enumerate(times):
        Phi, Gam = _zoh(sys.A, sys.B, float(tau))
        out[i] = sys.C[0] @ (Phi @ x + Gam[:, 0] * v) + sys.D * v
    return out


def equilibrium(sys: LinearClosedLoop, v) -> np.ndarray:
    return -np.linalg.solve(sys.A, sys.B[:, 0]) * v


# --- governor laws -----------------------------------------------------------

def navigation_field(r, v, eta):
    diff = np.asarray(r, dtype=float) - v
    return diff / np.maximum(np.abs(diff), eta)


def delta1(t, t_anchor, delta0, hold: float = 120.0, tau: float = 300.0):
    """Time-varying linearization bound: ``delta0`` for ``hold`` seconds after the
    anchor time, then decaying exponentially with time constant ``tau``."""
    elapsed = np.asarray(t, dtype=float) - t_anchor
    return delta0 * np.exp(-np.maximum(elapsed - hold, 0.0) / tau)


def dsm(prediction, delta1_now, delta2, y_limit: float = 0.6):
    """Dynamic safety margin: worst predicted distance to the limit over the grid."""
    prediction = np.asarray(prediction, dtype=float)
    return y_limit - np.max(prediction, axis=-1) - delta1_now - delta2


def admissible_interval(base, slope, level):
    """Interval of held references ``w`` with ``base + slope * w <= level`` on every grid point.

    ``base``/``slope`` are the state and input parts of the prediction. Returns
    (lo, hi); lo > hi means no admissible reference exists.
    """
    base = np.asarray(base, dtype=float)
    room = np.asarray(level, dtype=float)[..., None] - base
    pos, neg = slope > 0, slope < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = room / np.where(slope == 0, 1.0, slope)
    hi = np.min(np.where(pos, ratio, np.inf), axis=-1)
    lo = np.max(np.where(neg, ratio, -np.inf), axis=-1)
    flat_bad = np.any((slope == 0) & (room < 0), axis=-1)
    lo = np.where(flat_bad, np.inf, lo)
    return lo, hi


@dataclass
class GovernorState:
    v: float | np.ndarray = 0.0
    x: np.ndarray | None = None  # internal nominal-model state
    t_last_move: float | np.ndarray = 0.0
    t_ref_change: float = 0.0


def erg_step(gov: GovernorState, r, delta, cfg: ErgConfig, dt, t=None, bounds=None):
    """Integrate ``v' = kappa max(delta, 0) rho`` over one step.

    The result is clamped to ``[0, r]`` and, when ``bounds = (lo, hi)`` is
    given, to the interval of references whose own margin stays non-negative;
    the plain Euler step would otherwise jump straight to ``r`` for large kappa.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    v_old = gov.v
    rho = navigation_field(r, v_old, cfg.eta)
    v_new = v_old + cfg.kappa * np.maximum(delta, 0.0) * rho * dt
    if bounds is not None:
        lo, hi = bounds
        v_new = np.where(delta > 0, np.clip(v_new, np.minimum(lo, v_old), np.maximum(hi, v_old)), v_old)
    v_new = np.clip(v_new, 0.0, np.maximum(r, 0.0))
    moved = v_new != v_old
    if t is not None:
        gov.t_last_move = np.where(moved, t, gov.t_last_move)
    gov.v = v_new if np.ndim(v_new) else float(v_new)
    return gov.v


def internal_model_step(gov: GovernorState, prop: Propagator, v):
    gov.x = prop.step(gov.x, v)
    return gov.x


def peak_time(sys: LinearClosedLoop, v_step: float = 1.0, samples: int = 200_000) -> float:
    """Time of the maximum of the zero-state step response over 4x the slowest time constant.

    A monotone response peaks at the window end by this convention.
    """
    if v_step <= 0:
        raise ValueError("v_step must be positive")
    slowest = 1.0 / np.min(-np.linalg.eigvals(sys.A).real)
    window = 4.0 * slowest
    h = window / samples
    prop = sys.propagator(h)
    Phi_T = prop.Phi.T
    x = np.zeros(sys.n)
    best, t_best = -np.inf, 0.0
    c = sys.C[0]
    for k in range(samples + 1):
        y = c @ x
        if y > best:
            best, t_best = y, k * h
        x = x @ Phi_T + prop.Gamma * v_step
    return t_best
