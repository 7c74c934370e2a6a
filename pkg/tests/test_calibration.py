import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propofol_erg import calibration as cal
from propofol_erg.patient_model import anchor_patient, generate_cohort

ANCHORS = [anchor_patient(g) for g in range(1, 5)]


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_staircase_draws_are_well_formed(seed):
    proto = cal.StaircaseProtocol()
    times, levels = proto.draw(np.random.default_rng(seed))
    assert times[0] == 0.0
    assert 1 <= len(times) <= proto.max_steps
    assert np.all(np.diff(times) > 0) and times[-1] <= proto.switch_window
    assert np.all(np.fmod(times, proto.switch_grid) == 0)
    assert np.all((levels >= 0) & (levels <= proto.level_max))
    assert np.all(np.diff(levels) >= 0)


def test_profiles_are_seed_streams():
    a = cal._draw_profiles(cal.StaircaseProtocol(), 4, 3, (1, 0))
    b = cal._draw_profiles(cal.StaircaseProtocol(), 6, 3, (1, 0))
    c = cal._draw_profiles(cal.StaircaseProtocol(), 4, 3, (1, 1))
    np.testing.assert_array_equal(a[1], b[1][:4])  # run i does not depend on the run count
    assert not np.array_equal(a[1], c[1])


def test_staircase_lookup():
    times = np.array([[0.0, 100.0, np.inf]])
    levels = np.array([[0.1, 0.3, 0.3]])
    assert cal._staircase_at(99.9, times, levels)[0] == 0.1
    assert cal._staircase_at(100.0, times, levels)[0] == 0.3


def test_delta0_positive_for_anchor_patients():
    d0 = cal.estimate_delta0(ANCHORS, 1, 2, 0)
    assert 0 < d0 < 0.3


def test_delta0_sides():
    stats = cal.truth_vs_nominal([ANCHORS[2]], 3, 0, threshold=0.05)
    assert np.all(stats.sup_abs >= stats.sup_over)
    assert stats.coverage("abs") <= stats.coverage("upper") <= 1.0
    with pytest.raises(ValueError):
        cal.estimate_delta0(ANCHORS, 1, 1, 0, sided="lower")


def test_delta0_needs_one_group():
    with pytest.raises(ValueError):
        cal.truth_vs_nominal(ANCHORS[:2], 1, 0)
    with pytest.raises(ValueError):
        cal.estimate_delta0(ANCHORS[:1], 2, 1, 0)


def test_delta2_vanishes_without_variability():
    assert cal.estimate_delta2(generate_cohort(8, 0.0, 1), 5, 3) < 1e-9


def test_delta2_nondecreasing_in_spread():
    vals = [cal.estimate_delta2(generate_cohort(8, s, 1), 5, 3) for s in (0.1, 0.2, 0.3)]
    assert vals[0] <= vals[1] <= vals[2]
    assert vals[0] > 0


def test_unstable_patient_loop_fails_calibration():
    cohort = generate_cohort(8, 0.3, 1)  # P05's own linear loop is unstable under the group gains
    assert math.isinf(cal.estimate_delta2(cohort, 1, 0))
    with pytest.raises(cal.CalibrationError, match="P05"):
        cal.calibrate(cohort, 1, 0)


def test_bounds_file_round_trip(tmp_path):
    b = cal.Bounds({1: 0.1, 2: 0.2, 3: 0.15, 4: 0.12}, 0.08, 1.05, 7, 200)
    path = tmp_path / "b.txt"
    cal.write_bounds(b, path)
    text = path.read_text()
    assert "delta0_inflated = " in text and "runs = 200" in text and "seed = 7" in text
    assert cal.read_bounds(path) == b
    cfg = b.erg_config()
    assert cfg.delta0_used(2) == pytest.approx(0.21)
    assert cfg.delta2_used == pytest.approx(0.084)


def test_bounds_file_needs_sections(tmp_path):
    path = tmp_path / "b.txt"
    path.write_text("[calibration]\nseed = 1\nruns = 1\ninflation = 1.05\ndelta2 = 0.1\n")
    with pytest.raises(ValueError, match="group"):
        cal.read_bounds(path)


def test_calibration_is_deterministic():
    cohort = generate_cohort(4, 0.05, 2)
    a = cal.format_bounds(cal.calibrate(cohort, 2, 11))
    b = cal.format_bounds(cal.calibrate(cohort, 2, 11))
    assert a == b
