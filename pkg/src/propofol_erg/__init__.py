"""Closed-loop propofol induction with an explicit reference governor.

Modules: :mod:`patient_model` (PKPD truth model and cohorts), :mod:`controller`
(2-DOF PID, prefilter), :mod:`erg` (nominal closed loop, predictor, governor),
:mod:`simkit` (batched simulation and metrics), :mod:`calibration` (Monte Carlo
safety bounds) and :mod:`cli`.
"""
__version__ = "0.1.0"
