"""Prediction-date selection, labelling, censoring, splitting and the
Kaplan-Meier curve of censoring lengths."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .event_log import CodeCategory, PatientRecord, Snapshot

POSITIVE = "positive"
NEGATIVE = "negative"
SPLITS = ("train", "validation", "test")

COHORT_HEADER = ("patient_id", "prediction_date", "label", "admitted", "split")


@dataclass(frozen=True)
class CohortConfig:
    lead_min: int = 90  # 3 months
    lead_max: int = 365  # 12 months
    history_min: int = 365
    followup_min: int = 365
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lead_min < self.lead_max:
            raise ValueError("need 0 < lead_min < lead_max")
        if self.history_min <= 0 or self.followup_min <= 0:
            raise ValueError("history_min and followup_min must be positive")
        _check_ratios(self.split_ratios)


def _check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive fractions summing to 1, got {ratios}")


@dataclass(frozen=True)
class PredictionPoint:
    patient_id: str
    prediction_date: int
    label: str
    admitted: bool = False
    split: str | None = None

    @property
    def y(self) -> int:
        return int(self.label == POSITIVE)


@dataclass
class CohortStats:
    in_ehr: dict[str, int]
    selected: dict[str, int]
    admitted: dict[str, int]

    def format(self) -> str:
        rows = [("In EHR", self.in_ehr), ("Selected", self.selected), ("Admitted", self.admitted)]
        out = ["\tAlive\tDeceased\tTotal"]
        for name, d in rows:
            out.append(f"{name}\t{d['alive']}\t{d['deceased']}\t{d['alive'] + d['deceased']}")
        return "\n".join(out) + "\n"


def _timeline(patient: PatientRecord) -> tuple[list[int], set[int]]:
    enc = patient.encounter_dates()
    return enc, patient.inpatient_dates()


def _choose(candidates: list[int], inpatient: set[int], latest: bool) -> int | None:
    if not candidates:
        return None
    preferred = [d for d in candidates if d in inpatient]
    pool = preferred or candidates
    return max(pool) if latest else min(pool)


def select_prediction_date_positive(patient: PatientRecord, config: CohortConfig) -> int | None:
    """Earliest encounter date 3-12 months before death with a year of history.

    Inpatient-admission dates win over other encounters when any qualify.
    Returns ``None`` if no encounter date satisfies the constraints.
    """
    if patient.death_date is None:
        raise ValueError(f"patient {patient.patient_id} has no death_date")
    enc, inpatient = _timeline(patient)
    if not enc:
        return None
    first = enc[0]
    death = patient.death_date
    cands = [d for d in enc
             if config.lead_min <= death - d <= config.lead_max and d - first >= config.history_min]
    return _choose(cands, inpatient, latest=False)


def select_prediction_date_negative(patient: PatientRecord, config: CohortConfig) -> int | None:
    """Latest encounter date with a year of history and a year of follow-up."""
    if patient.death_date is not None:
        raise ValueError(f"patient {patient.patient_id} has a death_date")
    enc, inpatient = _timeline(patient)
    if not enc:
        return None
    first, last = enc[0], enc[-1]
    cands = [d for d in enc
             if last - d >= config.followup_min and d - first >= config.history_min]
    return _choose(cands, inpatient, latest=True)


def point_is_valid(point: PredictionPoint, patient: PatientRecord, config: CohortConfig) -> bool:
    """Check the label constraints that must hold for a (possibly shifted) date."""
    enc = patient.encounter_dates()
    if not enc:
        return False
    pd_ = point.prediction_date
    if pd_ - enc[0] < config.history_min:
        return False
    if point.label == POSITIVE:
        if patient.death_date is None:
            return False
        return config.lead_min <= patient.death_date - pd_ <= config.lead_max
    if patient.death_date is not None:
        return False
    return enc[-1] - pd_ >= config.followup_min


def adjust_admitted(point: PredictionPoint, patient: PatientRecord,
                    config: CohortConfig | None = None) -> PredictionPoint | None:
    """Move an inpatient prediction date to the second day of admission.

    The shifted point is re-checked against its label constraints and
    ``None`` is returned if it no longer satisfies them.
    """
    config = config or CohortConfig()
    if point.prediction_date not in patient.inpatient_dates():
        return dataclasses.replace(point, admitted=False)
    shifted = dataclasses.replace(point, prediction_date=point.prediction_date + 1, admitted=True)
    if not point_is_valid(shifted, patient, config):
        return None
    return shifted


def censor(patient: PatientRecord, prediction_date: int) -> PatientRecord:
    """Drop every event dated after ``prediction_date`` (the date itself is kept)."""
    if patient.events and patient.events[-1].date <= prediction_date:
        return patient
    return patient.with_events(e for e in patient.events if e.date <= prediction_date)


def select_point(patient: PatientRecord, config: CohortConfig) -> PredictionPoint | None:
    if patient.death_date is not None:
        d = select_prediction_date_positive(patient, config)
        label = POSITIVE
    else:
        d = select_prediction_date_negative(patient, config)
        label = NEGATIVE
    if d is None:
        return None
    return adjust_admitted(PredictionPoint(patient.patient_id, d, label), patient, config)


def build_cohort(snapshot: Snapshot, config: CohortConfig) -> tuple[list[PredictionPoint], CohortStats]:
    """Select one prediction point per eligible patient, sorted by patient_id."""
    points = []
    in_ehr = {"alive": 0, "deceased": 0}
    selected = {"alive": 0, "deceased": 0}
    admitted = {"alive": 0, "deceased": 0}
    for pid in sorted(snapshot.patients):
        patient = snapshot.patients[pid]
        key = "deceased" if patient.death_date is not None else "alive"
        in_ehr[key] += 1
        point = select_point(patient, config)
        if point is None:
            continue
        selected[key] += 1
        admitted[key] += point.admitted
        points.append(point)
    return points, CohortStats(in_ehr, selected, admitted)


def split_cohort(points: Sequence[PredictionPoint], ratios=(0.8, 0.1, 0.1),
                 seed: int = 0) -> list[PredictionPoint]:
    """Assign train/validation/test by a seeded random permutation of patients.

    Sizes are ``round(n * ratio)`` for train and validation with the remainder
    going to test, so realised fractions match the ratios to within 1/n.
    """
    _check_ratios(ratios)
    ordered = sorted(points, key=lambda p: p.patient_id)
    n = len(ordered)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    assign = np.empty(n, dtype=object)
    assign[perm[:n_train]] = SPLITS[0]
    assign[perm[n_train:n_train + n_val]] = SPLITS[1]
    assign[perm[n_train + n_val:]] = SPLITS[2]
    return [dataclasses.replace(p, split=str(s)) for p, s in zip(ordered, assign)]


# --------------------------------------------------------------------------
# Kaplan-Meier
# --------------------------------------------------------------------------

def kaplan_meier(durations: Iterable[float], events: Iterable[bool]) -> list[tuple[float, float]]:
    """Product-limit survival estimate as ``(time, S(time))`` steps.

    The curve starts at ``(0, 1.0)`` and has one point per distinct observed
    time (death or censoring). Subjects censored at ``t`` are still at risk
    at ``t``.
    """
    t = np.asarray(list(durations), dtype=float)
    e = np.asarray(list(events), dtype=bool)
    if t.shape != e.shape:
        raise ValueError("durations and events differ in length")
    if np.any(t <= 0):
        raise ValueError("durations must be positive")
    curve = [(0.0, 1.0)]
    if t.size == 0:
        return curve
    times, inverse = np.unique(t, return_inverse=True)
    deaths = np.bincount(inverse, weights=e, minlength=times.size)
    exits = np.bincount(inverse, minlength=times.size)
    at_risk = t.size - np.concatenate(([0], np.cumsum(exits)[:-1]))
    s = 1.0
    for time, d, n in zip(times, deaths, at_risk):
        if d:
            s *= 1.0 - d / n
        curve.append((float(time), float(s)))
    return curve


def km_censor_curve(points: Sequence[PredictionPoint], snapshot: Snapshot) -> dict[str, list[tuple[float, float]]]:
    """KM curves of time from prediction date to death (event) or to the last
    recorded event (censoring), one per label class."""
    out = {}
    for label in (POSITIVE, NEGATIVE):
        durations, events = [], []
        for p in points:
            if p.label != label:
                continue
            patient = snapshot.patients[p.patient_id]
            if patient.death_date is not None:
                durations.append(patient.death_date - p.prediction_date)
                events.append(True)
            else:
                last_seen = patient.events[-1].date if patient.events else p.prediction_date
                durations.append(last_seen - p.prediction_date)
                events.append(False)
        out[label] = kaplan_meier(durations, events)
    return out


def survival_at(curve: Sequence[tuple[float, float]], time: float) -> float:
    s = 1.0
    for t, v in curve:
        if t > time:
            break
        s = v
    return s


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------

def write_cohort(points: Sequence[PredictionPoint], path) -> None:
    from .event_log import format_date

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(COHORT_HEADER) + "\n")
        for p in points:
            fh.write(f"{p.patient_id}\t{format_date(p.prediction_date)}\t{p.label}\t"
                     f"{int(p.admitted)}\t{p.split or ''}\n")


def read_cohort(path, reveal_test_labels: bool = False) -> list[PredictionPoint]:
    """Load a cohort file.

    Test-split labels are replaced by ``None`` unless ``reveal_test_labels``
    is set, so that only evaluation ever sees them.
    """
    from .event_log import SnapshotError, parse_date

    path = Path(path)
    points = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != COHORT_HEADER:
            raise SnapshotError(f"bad header {header}", path, 1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != len(COHORT_HEADER) or cols[2] not in (POSITIVE, NEGATIVE) \
                    or cols[3] not in ("0", "1") or cols[4] not in SPLITS + ("",):
                raise SnapshotError("malformed cohort row", path, lineno)
            split = cols[4] or None
            label = cols[2]
            if split == "test" and not reveal_test_labels:
                label = None
            points.append(PredictionPoint(cols[0], parse_date(cols[1]), label, cols[3] == "1", split))
    return points


def write_km(curve: Sequence[tuple[float, float]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("time\tsurvival\n")
        for t, s in curve:
            fh.write(f"{t:g}\t{s:.10f}\n")
