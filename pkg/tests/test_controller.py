import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from propofol_erg.controller import (
    GROUP_GAINS, TABLE_III, ControllerConfig, ControllerState, PidParams, PrefilterParams, SaturationLimits,
    pid_output, prefilter_step, two_dof_pid_step,
)

SAT = SaturationLimits()


def test_tables():
    assert TABLE_III[1].Tsp == 156.81
    assert GROUP_GAINS[3].kp == 10.207
    assert SAT.u_max == pytest.approx(1.6667, abs=1e-4)
    assert ControllerConfig().pid[2] == GROUP_GAINS[2]


def test_derivative_filter_default():
    pid = PidParams(2.0, 0.1, 40.0, 30.0)
    assert pid.Tf == pytest.approx(2.0)
    assert PidParams(2.0, 0.1, 40.0, 30.0, Tf=0.5).Tf == 0.5


@pytest.mark.parametrize("field", ["kp", "ki", "kd", "Tt"])
def test_gains_must_be_positive(field):
    kw = dict(kp=1.0, ki=0.1, kd=10.0, Tt=40.0)
    kw[field] = -1.0
    with pytest.raises(ValueError, match=field):
        PidParams(**kw)
    with pytest.raises(ValueError):
        PrefilterParams(0.0)


def test_prefilter_step_response():
    tsp = TABLE_III[1].Tsp
    dt = tsp / 1000
    st_ = ControllerState()
    for _ in range(1000):
        v = prefilter_step(st_, 1.0, tsp, dt)
    assert v == pytest.approx(1.0 - math.exp(-1.0), abs=1e-12)
    for _ in range(100000):
        v = prefilter_step(st_, 1.0, tsp, dt)
    assert v == pytest.approx(1.0, abs=1e-12)


@given(st.floats(0.01, 10), st.floats(1, 500), st.floats(0, 1))
def test_prefilter_never_overshoots(dt, tsp, r):
    s = ControllerState()
    for _ in range(5):
        v = prefilter_step(s, r, tsp, dt)
        assert 0 <= v <= r + 1e-15


def test_rest_gives_zero_command():
    u, u_unsat = pid_output(ControllerState(), 0.0, 0.0, GROUP_GAINS[1], SAT)
    assert u == 0.0 and u_unsat == 0.0


def test_large_error_saturates_at_pump_limit():
    u, u_unsat = pid_output(ControllerState(), 1.0, 0.0, GROUP_GAINS[3], SAT)
    assert u_unsat > SAT.u_max
    assert u == pytest.approx(1.6667, abs=1e-4)


@given(st.floats(-5, 5), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.sampled_from([1, 2, 3, 4]))
def test_output_within_limits_and_unclipped_when_in_range(integ, xf, v, y, g):
    s = ControllerState(integ, xf)
    u, u_unsat = pid_output(s, v, y, GROUP_GAINS[g], SAT)
    assert SAT.u_min <= u <= SAT.u_max
    if SAT.u_min <= u_unsat <= SAT.u_max:
        assert u == u_unsat


def test_back_calculation_bounds_integrator():
    pid, dt = GROUP_GAINS[1], 0.1
    s = ControllerState()
    history = []
    for _ in range(6000):  # 10 min with v = 1, y = 0: saturated throughout
        u, _ = two_dof_pid_step(s, 1.0, 0.0, pid, SAT, dt)
        history.append(s.integrator)
        assert u == SAT.u_max
    history = np.array(history)
    # the fixed point of the integrator ODE under saturation
    fixed = SAT.u_max - pid.kp + pid.Tt * pid.ki
    assert np.all(np.abs(history) <= abs(fixed) + 1e-9)
    rate = (history[-1] - history[-2]) / dt
    assert abs(rate) < 1e-6
    assert history[-1] == pytest.approx(fixed, rel=1e-4)  # converges with time constant Tt


def test_step_works_elementwise():
    pids = [GROUP_GAINS[g] for g in range(1, 5)]
    from types import SimpleNamespace
    pid = SimpleNamespace(**{f: np.array([getattr(p, f) for p in pids]) for f in ("kp", "ki", "kd", "Tt", "Tf")})
    s = ControllerState(np.zeros(4), np.zeros(4))
    u, _ = two_dof_pid_step(s, np.full(4, 0.5), np.full(4, 0.4), pid, SAT, 0.1)
    for i, p in enumerate(pids):
        si = ControllerState()
        ui, _ = two_dof_pid_step(si, 0.5, 0.4, p, SAT, 0.1)
        assert u[i] == ui
        assert s.integrator[i] == si.integrator


def test_invalid_step():
    with pytest.raises(ValueError):
        two_dof_pid_step(ControllerState(), 0, 0, GROUP_GAINS[1], SAT, 0.0)
    with pytest.raises(ValueError):
        SaturationLimits(1.0, 0.5)
