"""Nonlinear PKPD virtual patient, WAV_CNS monitor and cohort handling.

Units are SI throughout: seconds, mg, litres and ug/ml (== mg/l). Infusion
rates are mg/s; conversion to pump units (ml/h of 10 mg/ml propofol) lives in
:func:`mgps_to_mlph` / :func:`mlph_to_mgps`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PROPOFOL_MG_PER_ML = 10.0
MONITOR_TAU = 8.0  # s, each of the two cascaded monitor lags

# (lower, upper) age in years, inclusive
AGE_BRACKETS = ((18, 29), (30, 39), (40, 49), (50, 60))

COHORT_COLUMNS = ("id", "age", "V1", "V2", "V3", "Cl1", "Cl2", "Cl3", "Td", "kd", "EC50", "gamma")


def mgps_to_mlph(u):
    return u * 3600.0 / PROPOFOL_MG_PER_ML


def mlph_to_mgps(u):
    return u * PROPOFOL_MG_PER_ML / 3600.0


def age_group(age: float) -> int:
    """Age bracket index (1-4) for an adult aged 18-60."""
    for g, (lo, hi) in enumerate(AGE_BRACKETS, start=1):
        if lo <= age < hi + 1:
            return g
    raise ValueError(f"age {age} outside the supported 18-60 year range")


@dataclass(frozen=True)
class PkParams:
    """Three-compartment mammillary PK model (volumes in l, clearances in l/s)."""

    V1: float
    V2: float
    V3: float
    Cl1: float
    Cl2: float
    Cl3: float
    k10: float = field(init=False)
    k12: float = field(init=False)
    k21: float = field(init=False)
    k13: float = field(init=False)
    k31: float = field(init=False)

    def __post_init__(self):
        for name in ("V1", "V2", "V3", "Cl1", "Cl2", "Cl3"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be strictly positive, got {val!r}")
        object.__setattr__(self, "k10", self.Cl1 / self.V1)
        object.__setattr__(self, "k12", self.Cl2 / self.V1)
        object.__setattr__(self, "k21", self.Cl2 / self.V2)
        object.__setattr__(self, "k13", self.Cl3 / self.V1)
        object.__setattr__(self, "k31", self.Cl3 / self.V3)

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [-(self.k10 + self.k12 + self.k13), self.k12, self.k13],
                [self.k21, -self.k21, 0.0],
                [self.k31, 0.0, -self.k31],
            ]
        )


@dataclass(frozen=True)
class PdParams:
    """Effect-site lag/delay and Hill curve parameters."""

    Td: float  # transport delay [s]
    kd: float  # distribution rate [1/s]
    EC50: float  # [ug/ml]
    gamma: float

    def __post_init__(self):
        if not (math.isfinite(self.Td) and self.Td >= 0):
            raise ValueError(f"Td must be non-negative, got {self.Td!r}")
        for name in ("kd", "EC50", "gamma"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be strictly positive, got {val!r}")


@dataclass(frozen=True)
class PatientModel:
    id: str
    age: float
    pk: PkParams
    pd: PdParams

    def __post_init__(self):
        age_group(self.age)

    @property
    def group(self) -> int:
        return age_group(self.age)


@dataclass(frozen=True)
class NominalLinearModel:
    """Linearized PKPD: exp(-Td s) K (s+z1)(s+z2) / prod(s+p_i)."""

    group: int
    Td: float
    K: float
    zeros: tuple[float, float]
    poles: tuple[float, float, float, float]

    def __post_init__(self):
        if self.Td < 0 or self.K <= 0:
            raise ValueError("Td must be >= 0 and K > 0")
        if any(z <= 0 for z in self.zeros) or any(p <= 0 for p in self.poles):
            raise ValueError("stored zeros and poles must be strictly positive")

    @property
    def dc_gain(self) -> float:
        return self.K * float(np.prod(self.zeros)) / float(np.prod(self.poles))


# Identified group nominal models (per-second units).
GROUP_NOMINALS = {
    1: NominalLinearModel(1, 18.6, 1.698e-4, (1.477e-3, 2.572e-5), (3.239e-2, 6.961e-3, 2.803e-4, 2.703e-5)),
    2: NominalLinearModel(2, 16.5, 1.928e-4, (1.478e-3, 2.703e-5), (3.843e-2, 7.735e-3, 2.912e-4, 2.787e-5)),
    3: NominalLinearModel(3, 8.3, 1.438e-4, (1.486e-3, 3.627e-5), (2.870e-2, 7.748e-3, 2.843e-4, 2.121e-5)),
    4: NominalLinearModel(4, 17.8, 1.823e-4, (1.478e-3, 2.651e-5), (3.656e-2, 9.100e-3, 2.962e-4, 2.710e-5)),
}

# Repo convention for the PD quantities the group models only carry as a product.
ANCHOR_EC50 = 3.0
ANCHOR_GAMMA = 1.7
# Slowest PK pole is kept below the slow zero so a positive PK model exists.
SLOW_POLE_MARGIN = 0.9


def _pk_rates_from_roots(k21: float, k31: float, roots: Sequence[float]) -> tuple[float, float, float]:
    # Match the characteristic polynomial of the PK matrix to prod(s + root).
    a, b, c = roots
    s1, s2, s3 = a + b + c, a * b + b * c + a * c, a * b * c
    k10 = s3 / (k21 * k31)
    rest = s1 - k10 - k21 - k31  # k12 + k13
    q = s2 - k10 * (k21 + k31) - k21 * k31  # k12*k31 + k13*k21
    k12 = (q - rest * k21) / (k31 - k21)
    return k10, k12, rest - k12


def anchor_patient(group: int) -> PatientModel:
    """Representative patient whose linearization reproduces its group's nominal model.

    Gain, delay, both zeros and the three fastest poles are matched exactly;
    the slowest PK pole is capped at 0.9*z2 because the nominal models of groups 1, 2 and
    4 violate the pole/zero interlacing every positive mammillary model obeys.
    """
    nom = GROUP_NOMINALS[group]
    p_fast, kd, p_mid, p_slow = nom.poles
    z1, z2 = nom.zeros
    p_slow = min(p_slow, SLOW_POLE_MARGIN * z2)
    k10, k12, k13 = _pk_rates_from_roots(z1, z2, (p_fast, p_mid, p_slow))
    gamma, ec50 = ANCHOR_GAMMA, ANCHOR_EC50
    V1 = (gamma / 2.0) * kd / (2.0 * ec50 * nom.K)
    V2, V3 = k12 * V1 / z1, k13 * V1 / z2
    pk = PkParams(V1, V2, V3, k10 * V1, k12 * V1, k13 * V1)
    lo, hi = AGE_BRACKETS[group - 1]
    return PatientModel(f"anchor{group}", (lo + hi) / 2.0, pk, PdParams(nom.Td, kd, ec50, gamma))


def linearize(patient: PatientModel) -> NominalLinearModel:
    """Linear PKPD of a patient with the Hill curve replaced by its slope gamma/2 at Er = 0.5."""
    pk, pd = patient.pk, patient.pd
    pk_poles = np.sort(-np.linalg.eigvals(pk.matrix()).real)
    poles = tuple(float(p) for p in sorted([*pk_poles, pd.kd], reverse=True))
    K = (pd.gamma / 2.0) * pd.kd / (2.0 * pd.EC50 * pk.V1)
    return NominalLinearModel(patient.group, pd.Td, K, (pk.k21, pk.k31), poles)


def group_nominal(group: int) -> NominalLinearModel:
    """Nominal model used by the governor: the anchor patient's linearization."""
    return linearize(anchor_patient(group))


# --- dynamics -------------------------------------------------------------

def pk_derivative(C, infusion, pk):
    """Right-hand side of the PK model. ``C`` has shape (..., 3); broadcasts over params."""
    C = np.asarray(C, dtype=float)
    c1, c2, c3 = C[..., 0], C[..., 1], C[..., 2]
    d1 = -(pk.k10 + pk.k12 + pk.k13) * c1 + pk.k12 * c2 + pk.k13 * c3 + infusion / pk.V1
    d2 = pk.k21 * (c1 - c2)
    d3 = pk.k31 * (c1 - c3)
    return np.stack([d1, d2, d3], axis=-1)


def pd_derivative(Er, delayed_c1, pd):
    return -pd.kd * Er + pd.kd / (2.0 * pd.EC50) * delayed_c1


def hill(Er, gamma):
    """Hill curve with half effect at Er = 0.5."""
    x = (np.maximum(Er, 0.0) / 0.5) ** gamma
    return x / (1.0 + x)


def monitor_derivative(m1, m2, Eo):
    return (Eo - m1) / MONITOR_TAU, (m1 - m2) / MONITOR_TAU


def delay_steps(Td: float, dt: float) -> int:
    return int(math.ceil(Td / dt - 1e-9))


@dataclass
class PlantState:
    """Mutable state of one virtual patient. ``delay_line`` holds past C1 samples."""

    C: np.ndarray
    Er: float
    m1: float
    m2: float
    delay_line: np.ndarray

    @classmethod
    def at_rest(cls, pd: PdParams, dt: float) -> "PlantState":
        return cls(np.zeros(3), 0.0, 0.0, 0.0, np.zeros(max(delay_steps(pd.Td, dt), 1)))


# --- cohorts --------------------------------------------------------------

class CohortError(ValueError):
    pass


class CohortParseError(CohortError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class CohortValidationError(CohortError):
    def __init__(self, patient_id: str, fld: str, detail: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}patient {patient_id}: {fld}: {detail}")
        self.patient_id, self.field, self.detail, self.line = patient_id, fld, detail, line


def make_patient(pid: str, age: float, values: dict) -> PatientModel:
    """Build a patient, re-raising invariant failures with the offending field named."""
    for name in COHORT_COLUMNS[2:]:
        v = values[name]
        if name == "Td":
            ok = math.isfinite(v) and v >= 0
        else:
            ok = math.isfinite(v) and v > 0
        if not ok:
            raise CohortValidationError(pid, name, f"invalid value {v!r}")
    try:
        age_group(age)
    except ValueError as exc:
        raise CohortValidationError(pid, "age", str(exc)) from None
    pk = PkParams(*(values[k] for k in ("V1", "V2", "V3", "Cl1", "Cl2", "Cl3")))
    pd = PdParams(values["Td"], values["kd"], values["EC50"], values["gamma"])
    return PatientModel(pid, age, pk, pd)


def _patient_row(p: PatientModel) -> list:
    return [p.id, p.age, p.pk.V1, p.pk.V2, p.pk.V3, p.pk.Cl1, p.pk.Cl2, p.pk.Cl3,
            p.pd.Td, p.pd.kd, p.pd.EC50, p.pd.gamma]


def parse_cohort(lines: Iterable[str]) -> list[PatientModel]:
    patients, seen = [], set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(COHORT_COLUMNS):
            raise CohortParseError(lineno, f"expected {len(COHORT_COLUMNS)} columns "
                                           f"({','.join(COHORT_COLUMNS)}), got {len(cells)}")
        pid = cells[0]
        if not pid:
            raise CohortParseError(lineno, "empty patient id")
        if pid in seen:
            raise CohortParseError(lineno, f"duplicate patient id {pid!r}")
        seen.add(pid)
        try:
            nums = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise CohortParseError(lineno, str(exc)) from None
        values = dict(zip(COHORT_COLUMNS[1:], nums))
        try:
            patients.append(make_patient(pid, values.pop("age"), values))
        except CohortValidationError as exc:
            raise CohortValidationError(exc.patient_id, exc.field, exc.detail, lineno) from None
    return patients


def load_cohort(path) -> list[PatientModel]:
    with open(path) as fh:
        return parse_cohort(fh)


def format_cohort(patients: Sequence[PatientModel], comment: str | None = None) -> str:
    out = []
    if comment:
        out += [f"# {c}" for c in comment.splitlines()]
    out.append("# " + ",".join(COHORT_COLUMNS))
    for p in patients:
        out.append(",".join(repr(float(v)) if not isinstance(v, str) else v for v in _patient_row(p)))
    return "\n".join(out) + "\n"


def save_cohort(patients: Sequence[PatientModel], path, comment: str | None = None) -> None:
    Path(path).write_text(format_cohort(patients, comment))


def group_sizes(n: int) -> list[int]:
    base, extra = divmod(n, 4)
    return [base + (1 if g < extra else 0) for g in range(4)]


_VARIED = ("V1", "V2", "V3", "Cl1", "Cl2", "Cl3", "Td", "kd", "EC50", "gamma")


def generate_cohort(n: int, spread: float, seed: int, anchors: dict[int, PatientModel] | None = None
                    ) -> list[PatientModel]:
    """Seeded synthetic cohort, log-normal around each group's anchor patient.

    ``spread`` is the relative standard deviation of every parameter; medians
    equal the anchor values. Patients are split over the four age groups as
    evenly as possible, lower groups taking any remainder. The same seed
    draws the same standard-normal scores at every spread, so cohorts at
    different spreads are scaled copies of each other in log space; with
    ``spread == 0`` every row of a group equals its anchor apart from the id.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (math.isfinite(spread) and spread >= 0):
        raise ValueError("spread must be a non-negative finite number")
    anchors = anchors or {g: anchor_patient(g) for g in range(1, 5)}
    sigma = math.sqrt(math.log1p(spread**2))
    rng = np.random.default_rng(seed)
    patients = []
    idx = 0
    width = max(2, len(str(n)))
    for g, size in enumerate(group_sizes(n), start=1):
        lo, hi = AGE_BRACKETS[g - 1]
        base = dict(zip(COHORT_COLUMNS[2:], _patient_row(anchors[g])[2:]))
        for _ in range(size):
            idx += 1
            age = int(rng.integers(lo, hi + 1))
            z = rng.standard_normal(len(_VARIED))
            if spread == 0:
                age = anchors[g].age
            values = {k: base[k] * math.exp(sigma * zk) for k, zk in zip(_VARIED, z)}
            patients.append(make_patient(f"P{idx:0{width}d}", age, values))
    return patients


def with_id(p: PatientModel, pid: str) -> PatientModel:
    return replace(p, id=pid)
