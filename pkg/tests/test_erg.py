import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from propofol_erg import erg
from propofol_erg.controller import GROUP_GAINS
from propofol_erg.patient_model import GROUP_NOMINALS, group_nominal

GROUPS = [1, 2, 3, 4]


@pytest.fixture(scope="module")
def loops():
    return {g: erg.build_closed_loop(group_nominal(g), GROUP_GAINS[g]) for g in GROUPS}


@dataclass
class Plain:
    """Duck-typed LTI system without the Hurwitz check (for closed-form cases)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float = 0.0

    @property
    def n(self):
        return self.A.shape[0]

    def propagator(self, h):
        return erg.Propagator.from_system(self, h)


def rk4_lti(A, B, x, v, h, n):
    f = lambda z: z @ A.T + np.multiply.outer(v, B[:, 0])  # noqa: E731
    for _ in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


# --- navigation field -------------------------------------------------------------

def test_navigation_field_examples():
    assert erg.navigation_field(0.5, 0.5, 0.01) == 0.0
    assert erg.navigation_field(0.5, 0.3, 0.01) == 1.0
    assert erg.navigation_field(0.5, 0.495, 0.01) == pytest.approx(0.5)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-4, 0.1))
def test_navigation_field_is_unit_bounded(r, v, eta):
    rho = erg.navigation_field(r, v, eta)
    assert abs(rho) <= 1.0
    assert np.sign(rho) == np.sign(r - v)


# --- Pade -------------------------------------------------------------------------------

def test_pade_zero_delay_is_identity():
    num, den = erg.pade_delay(0.0, 2)
    assert list(num) == [1.0] and list(den) == [1.0]


def test_pade_first_order_textbook_form():
    Td = 4.0
    num, den = erg.pade_delay(Td, 1)
    np.testing.assert_allclose(num / den[-1], [-Td / 2, 1.0])
    np.testing.assert_allclose(den / den[-1], [Td / 2, 1.0])


@pytest.mark.parametrize("Td", [g.Td for g in GROUP_NOMINALS.values()])
def test_pade_second_order_frequency_error(Td):
    num, den = erg.pade_delay(Td, 2)
    w = np.linspace(0, 1.0 / Td, 500)
    s = 1j * w
    approx = np.polyval(num, s) / np.polyval(den, s)
    assert np.max(np.abs(np.exp(-s * Td) - approx)) < 0.01


def test_pade_rejects_bad_arguments():
    with pytest.raises(ValueError):
        erg.pade_delay(-1.0)
    with pytest.raises(ValueError):
        erg.pade_delay(1.0, 5)


# --- closed loop -------------------------------------------------------------------------

@pytest.mark.parametrize("g", GROUPS)
def test_closed_loop_hurwitz_dimension_and_unity_gain(loops, g):
    sys = loops[g]
    assert sys.n == 2 + (4 + 2) + 2
    assert np.all(np.linalg.eigvals(sys.A).real < 0)
    assert sys.dc_gain == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("g", GROUPS)
def test_pkpd_realization_matches_transfer_function(g):
    nom = group_nominal(g)
    ss = erg.pkpd_state_space(nom, 2)
    pnum, pden = erg.pade_delay(nom.Td, 2)
    for w in (1e-4, 1e-3, 1e-2):
        s = 1j * w
        H = (ss.C @ np.linalg.solve(s * np.eye(ss.n) - ss.A, ss.B))[0, 0] + ss.D
        ref = nom.K * (s + nom.zeros[0]) * (s + nom.zeros[1]) / np.prod([s + p for p in nom.poles])
        ref *= np.polyval(pnum, s) / np.polyval(pden, s)
        assert abs(H - ref) < 1e-9 * max(1.0, abs(ref))


def test_unstable_loop_rejected():
    with pytest.raises(erg.NotHurwitzError):
        erg.LinearClosedLoop(np.array([[0.1]]), np.array([[1.0]]), np.array([[1.0]]))


@pytest.mark.parametrize("g", GROUPS)
def test_equilibrium(loops, g):
    sys = loops[g]
    assert np.all(erg.equilibrium(sys, 0.0) == 0.0)
    rng = np.random.default_rng(g)
    for v in rng.uniform(0, 1, 5):
        xb = erg.equilibrium(sys, v)
        assert np.linalg.norm(sys.A @ xb + sys.B[:, 0] * v) < 1e-10
        assert sys.C[0] @ xb == pytest.approx(v, abs=1e-6)


# --- prediction --------------------------------------------------------------------

def test_prediction_at_current_time_is_output(loops):
    sys = loops[1]
    x = np.random.default_rng(0).normal(size=sys.n)
    pred = erg.Predictor.build(sys).predict(x, 0.3)
    assert pred[0] == pytest.approx(sys.C[0] @ x, abs=1e-14)
    assert len(pred) == 301


def test_prediction_of_integrator_closed_form():
    sys = Plain(np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)))
    p = erg.Predictor.build(sys, horizon=10.0, grid_step=0.5)
    np.testing.assert_allclose(p.predict(np.array([2.0]), 0.25), 2.0 + 0.25 * p.times, atol=1e-13)
    np.testing.assert_allclose(erg.predict_output_direct(sys, np.array([2.0]), 0.25, p.times),
                               2.0 + 0.25 * p.times, atol=1e-13)


def _random_states(sys, rng, k):
    """Physically scaled random states: equilibria for random references plus perturbations."""
    v = rng.uniform(0, 0.6, k)
    xb = np.stack([erg.equilibrium(sys, vi) for vi in v])
    return xb * rng.uniform(0, 1.5, (k, sys.n)), rng.uniform(0, 0.6, k)


@pytest.mark.parametrize("g", GROUPS)
def test_predictor_matches_fine_integration(loops, g):
    sys = loops[g]
    rng = np.random.default_rng(100 + g)
    x0, v = _random_states(sys, rng, 100)
    pred = erg.Predictor.build(sys).predict(x0, v)  # (100, 301)
    # RK4 with a step 100x finer than the prediction grid
    x, h = x0, 0.01
    worst = np.max(np.abs(pred[:, 0] - x @ sys.C[0]))
    for k in range(1, 301):
        x = rk4_lti(sys.A, sys.B, x, v, h, 100)
        worst = max(worst, np.max(np.abs(pred[:, k] - x @ sys.C[0])))
    assert worst < 1e-8


@pytest.mark.parametrize("g", GROUPS)
def test_propagator_and_direct_paths_agree(loops, g):
    sys = loops[g]
    rng = np.random.default_rng(200 + g)
    x0, v = _random_states(sys, rng, 5)
    p = erg.Predictor.build(sys)
    for xi, vi in zip(x0, v):
        direct = erg.predict_output_direct(sys, xi, vi, p.times)
        assert np.max(np.abs(p.predict(xi, vi) - direct)) < 1e-10


def test_zoh_matches_augmented_exponential():
    A = np.array([[-1.0, 2.0], [0.0, -3.0]])
    B = np.array([[0.5], [1.0]])
    Phi, Gam = erg._zoh(A, B, 0.7)
    np.testing.assert_allclose(Phi, expm(A * 0.7), atol=1e-14)
    np.testing.assert_allclose(Gam, np.linalg.solve(A, (Phi - np.eye(2)) @ B), atol=1e-14)


# --- peak time ----------------------------------------------------------------------

def test_peak_time_underdamped_second_order():
    wn, zeta = 1.0, 0.5
    sys = erg.LinearClosedLoop(np.array([[0.0, 1.0], [-wn**2, -2 * zeta * wn]]),
                               np.array([[0.0], [wn**2]]), np.array([[1.0, 0.0]]))
    wd = wn * math.sqrt(1 - zeta**2)
    assert erg.peak_time(sys) == pytest.approx(math.pi / wd, abs=1e-3)


def test_peak_time_monotone_response_is_window_end():
    sys = erg.LinearClosedLoop(np.array([[-0.5]]), np.array([[0.5]]), np.array([[1.0]]))
    assert erg.peak_time(sys) == pytest.approx(8.0)


@pytest.mark.parametrize("g", GROUPS)
def test_peak_times_within_horizon(loops, g):
    assert erg.peak_time(loops[g], samples=20000) < 300.0


# --- safety margins -----------------------------------------------------------------

def test_delta1_shape():
    d0 = 0.135
    assert erg.delta1(50.0, 50.0, d0) == d0
    assert erg.delta1(170.0, 50.0, d0) == d0
    assert erg.delta1(170.0 + 300.0, 50.0, d0) == pytest.approx(d0 / math.e)
    assert erg.delta1(1e6, 0.0, d0) < 1e-12


@given(st.floats(0, 5000), st.floats(0, 5000))
def test_delta1_nonincreasing(t1, t2):
    a, b = sorted((t1, t2))
    assert erg.delta1(b, 0.0, 0.2) <= erg.delta1(a, 0.0, 0.2)


def test_dsm_examples():
    assert erg.dsm(np.full(301, 0.45), 0.0, 0.08 * 1.05) == pytest.approx(0.066)
    pred = np.full(301, 0.3)
    pred[120] = 0.55
    d = erg.dsm(pred, erg.DELTA0_DEFAULT[1] * 1.05, 0.084)
    assert d == pytest.approx(0.6 - 0.55 - 0.14175 - 0.084)
    assert d == pytest.approx(-0.17575)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0, 0.3), st.floats(0, 0.3))
def test_dsm_nonpositive_when_any_point_reaches_the_limit(pred, d1, d2):
    pred = np.array(pred)
    if np.any(pred >= 0.6 - d1 - d2):
        assert erg.dsm(pred, d1, d2) <= 1e-15


@given(st.lists(st.floats(0, 1), min_size=5, max_size=5), st.lists(st.floats(-0.1, 0.1), min_size=5, max_size=5),
       st.floats(0, 0.2), st.floats(0, 0.2))
def test_dsm_lipschitz_and_monotone_in_delta2(pred, bump, d2a, d2b):
    p, q = np.array(pred), np.array(pred) + np.array(bump)
    assert abs(erg.dsm(p, 0.1, 0.05) - erg.dsm(q, 0.1, 0.05)) <= np.max(np.abs(p - q)) + 1e-12
    lo, hi = sorted((d2a, d2b))
    assert erg.dsm(p, 0.1, hi) <= erg.dsm(p, 0.1, lo)


SLOPES = st.one_of(st.just(0.0), st.floats(1e-3, 2), st.floats(-2, -1e-3))


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.lists(SLOPES, min_size=4, max_size=4),
       st.floats(0, 1))
def test_admissible_interval_is_exact(base, slope, level):
    base, slope = np.array(base), np.array(slope)
    lo, hi = erg.admissible_interval(base, slope, level)
    for w in np.linspace(-3, 3, 61):
        ok = np.all(base + slope * w <= level)
        inside = lo - 1e-9 <= w <= hi + 1e-9
        assert ok == inside or abs(w - lo) < 1e-6 or abs(w - hi) < 1e-6


# --- governor update ----------------------------------------------------------------

CFG = erg.ErgConfig()


def test_erg_step_zero_margin_freezes():
    gov = erg.GovernorState(v=0.2)
    assert erg.erg_step(gov, 0.5, 0.0, CFG, 0.1) == 0.2
    assert erg.erg_step(gov, 0.5, -0.3, CFG, 0.1) == 0.2


def test_erg_step_at_target_is_fixed():
    gov = erg.GovernorState(v=0.5)
    assert erg.erg_step(gov, 0.5, 0.2, CFG, 0.1) == 0.5


def test_erg_step_large_gain_clamps_at_reference():
    gov = erg.GovernorState(v=0.1)
    # unclamped increment: 1e5 * 0.066 * 1 * 0.1 = 660
    assert CFG.kappa * 0.066 * 1.0 * 0.1 == pytest.approx(660.0)
    assert erg.erg_step(gov, 0.5, 0.066, CFG, 0.1) == 0.5


def test_erg_step_respects_admissible_bound_and_records_move():
    gov = erg.GovernorState(v=0.1, t_last_move=0.0)
    v = erg.erg_step(gov, 0.5, 0.066, CFG, 0.1, t=3.0, bounds=(0.0, 0.25))
    assert v == 0.25
    assert gov.t_last_move == 3.0
    erg.erg_step(gov, 0.5, 0.0, CFG, 0.1, t=4.0, bounds=(0.0, 0.3))
    assert gov.t_last_move == 3.0


@given(st.floats(0, 0.5), st.floats(-0.2, 0.2), st.floats(0, 0.5), st.floats(0.01, 1))
def test_erg_step_never_leaves_zero_to_r_and_never_decreases(v0, delta, bound, dt):
    gov = erg.GovernorState(v=v0)
    v = erg.erg_step(gov, 0.5, delta, CFG, dt, bounds=(0.0, bound))
    assert 0.0 <= v <= 0.5
    assert v >= v0


def test_internal_model_step(loops):
    sys = loops[2]
    prop = sys.propagator(0.1)
    gov = erg.GovernorState(v=0.4, x=erg.equilibrium(sys, 0.4))
    np.testing.assert_allclose(erg.internal_model_step(gov, prop, 0.4), erg.equilibrium(sys, 0.4), atol=1e-12)
    gov.x = np.zeros(sys.n)
    assert np.all(erg.internal_model_step(gov, prop, 0.0) == 0.0)
    x0 = _random_states(sys, np.random.default_rng(5), 1)[0][0]
    gov.x = x0.copy()
    x1 = erg.internal_model_step(gov, prop, 0.3)
    direct = erg.predict_output_direct(sys, x0, 0.3, [0.1])[0]
    assert sys.C[0] @ x1 == pytest.approx(direct, abs=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        erg.ErgConfig(kappa=0)
    with pytest.raises(ValueError):
        erg.ErgConfig(inflation=0.9)
    with pytest.raises(ValueError):
        erg.ErgConfig(horizon=300, grid_step=7)
    assert erg.ErgConfig().delta2_used == pytest.approx(0.084)
    assert erg.ErgConfig().delta0_used(1) == pytest.approx(0.14175)
