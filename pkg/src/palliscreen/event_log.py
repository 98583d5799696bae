"""Longitudinal coded event logs: data model, TSV I/O, validation and a
synthetic population generator.

Dates are integer day counts since 1970-01-01. Files carry ISO-8601 dates.
"""

from __future__ import annotations

import datetime as _dt
import enum
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

EPOCH = _dt.date(1970, 1, 1)

PATIENT_HEADER = ("patient_id", "birth_date", "gender", "race", "ethnicity", "death_date")
EVENT_HEADER = ("patient_id", "date", "category", "code")

GENDERS = ("female", "male")

INPATIENT = "Inpatient"
ENCOUNTER_TYPES = ("Inpatient", "Outpatient", "Hx Scan", "Office Visit")


class CodeCategory(enum.Enum):
    DIAGNOSIS = "DX"
    PROCEDURE = "PX"
    MEDICATION = "RX"
    ENCOUNTER = "ENC"

    @property
    def label(self) -> str:
        return _CATEGORY_LABELS[self]

    @property
    def rank(self) -> int:
        return _CATEGORY_ORDER.index(self)


_CATEGORY_ORDER = list(CodeCategory)
_CATEGORY_LABELS = {
    CodeCategory.DIAGNOSIS: "Diagnosis",
    CodeCategory.PROCEDURE: "Procedure",
    CodeCategory.MEDICATION: "Medication",
    CodeCategory.ENCOUNTER: "Encounter",
}


class SnapshotError(ValueError):
    """Raised when an event log fails to parse or validate."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@functools.lru_cache(maxsize=65536)
def parse_date(text: str) -> int:
    return (_dt.date.fromisoformat(text) - EPOCH).days


@functools.lru_cache(maxsize=65536)
def format_date(day: int) -> str:
    return (EPOCH + _dt.timedelta(days=int(day))).isoformat()


@dataclass(frozen=True, slots=True)
class EventRecord:
    patient_id: str
    date: int
    category: CodeCategory
    code: str

    def sort_key(self):
        return (self.date, self.category.rank, self.code)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    birth_date: int
    gender: str
    race: str
    ethnicity: str
    death_date: int | None
    events: tuple[EventRecord, ...] = ()

    def __post_init__(self):
        # normalise to a sorted tuple so downstream code can rely on ordering
        events = tuple(sorted(self.events, key=EventRecord.sort_key))
        object.__setattr__(self, "events", events)

    def validate(self) -> None:
        if self.gender not in GENDERS:
            raise SnapshotError(f"patient {self.patient_id}: unknown gender {self.gender!r}")
        for ev in self.events:
            if ev.patient_id != self.patient_id:
                raise SnapshotError(
                    f"patient {self.patient_id}: event belongs to {ev.patient_id}")
            if not ev.code:
                raise SnapshotError(f"patient {self.patient_id}: empty code on {format_date(ev.date)}")
        if self.events:
            if self.events[0].date < self.birth_date:
                raise SnapshotError(f"patient {self.patient_id}: event before birth_date")
            if self.death_date is not None and self.events[-1].date > self.death_date:
                raise SnapshotError(f"patient {self.patient_id}: event after death_date")

    def encounter_dates(self) -> list[int]:
        return sorted({e.date for e in self.events if e.category is CodeCategory.ENCOUNTER})

    def inpatient_dates(self) -> set[int]:
        return {e.date for e in self.events
                if e.category is CodeCategory.ENCOUNTER and e.code == INPATIENT}

    def with_events(self, events: Iterable[EventRecord]) -> "PatientRecord":
        return PatientRecord(self.patient_id, self.birth_date, self.gender, self.race,
                             self.ethnicity, self.death_date, tuple(events))


@dataclass(frozen=True)
class Snapshot:
    snapshot_date: int
    patients: Mapping[str, PatientRecord]

    def __post_init__(self):
        for pid, p in self.patients.items():
            if pid != p.patient_id:
                raise SnapshotError(f"patient key {pid!r} does not match record {p.patient_id!r}")
            p.validate()
            if p.events and p.events[-1].date > self.snapshot_date:
                raise SnapshotError(f"patient {pid}: event after snapshot_date")

    def __len__(self):
        return len(self.patients)

    def n_events(self) -> int:
        return sum(len(p.events) for p in self.patients.values())


def load_snapshot(patients_path, events_path, snapshot_date: int | None = None) -> Snapshot:
    """Read and validate a patients/events TSV pair.

    When ``snapshot_date`` is omitted, the latest event or death date is used.
    Errors carry the offending file and line number.
    """
    patients_path = Path(patients_path)
    events_path = Path(events_path)
    meta: dict[str, tuple] = {}
    with open(patients_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != PATIENT_HEADER:
            raise SnapshotError(f"bad header {header}", patients_path, 1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != len(PATIENT_HEADER):
                raise SnapshotError(f"expected {len(PATIENT_HEADER)} fields, got {len(cols)}",
                                    patients_path, lineno)
            pid, birth, gender, race, eth, death = cols
            if not pid:
                raise SnapshotError("empty patient_id", patients_path, lineno)
            if pid in meta:
                raise SnapshotError(f"duplicate patient_id {pid}", patients_path, lineno)
            if gender not in GENDERS:
                raise SnapshotError(f"unknown gender {gender!r}", patients_path, lineno)
            try:
                birth_d = parse_date(birth)
                death_d = parse_date(death) if death else None
            except ValueError as exc:
                raise SnapshotError(f"bad date: {exc}", patients_path, lineno) from None
            meta[pid] = (birth_d, gender, race, eth, death_d)

    cat_by_token = {c.value: c for c in CodeCategory}
    events: dict[str, list[EventRecord]] = {pid: [] for pid in meta}
    max_day = max((m[4] for m in meta.values() if m[4] is not None), default=None)
    with open(events_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != EVENT_HEADER:
            raise SnapshotError(f"bad header {header}", events_path, 1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != len(EVENT_HEADER):
                raise SnapshotError(f"expected {len(EVENT_HEADER)} fields, got {len(cols)}",
                                    events_path, lineno)
            pid, day, cat, code = cols
            if pid not in meta:
                raise SnapshotError(f"event references unknown patient {pid}", events_path, lineno)
            try:
                d = parse_date(day)
            except ValueError as exc:
                raise SnapshotError(f"bad date: {exc}", events_path, lineno) from None
            category = cat_by_token.get(cat)
            if category is None:
                raise SnapshotError(f"unknown category {cat!r}", events_path, lineno)
            if not code:
                raise SnapshotError("empty code", events_path, lineno)
            death = meta[pid][4]
            if death is not None and d > death:
                raise SnapshotError(f"event for patient {pid} after death_date", events_path, lineno)
            if d < meta[pid][0]:
                raise SnapshotError(f"event for patient {pid} before birth_date", events_path, lineno)
            if snapshot_date is not None and d > snapshot_date:
                raise SnapshotError(f"event for patient {pid} after snapshot_date",
                                    events_path, lineno)
            events[pid].append(EventRecord(pid, d, category, code))
            if max_day is None or d > max_day:
                max_day = d

    if snapshot_date is None:
        snapshot_date = max_day if max_day is not None else 0
    patients = {
        pid: PatientRecord(pid, m[0], m[1], m[2], m[3], m[4], tuple(events[pid]))
        for pid, m in meta.items()
    }
    return Snapshot(snapshot_date, patients)


def write_snapshot(snapshot: Snapshot, patients_path, events_path) -> None:
    """Write ``snapshot`` as a patients/events TSV pair, sorted by patient_id."""
    pids = sorted(snapshot.patients)
    with open(patients_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(PATIENT_HEADER) + "\n")
        for pid in pids:
            p = snapshot.patients[pid]
            death = format_date(p.death_date) if p.death_date is not None else ""
            fh.write(f"{pid}\t{format_date(p.birth_date)}\t{p.gender}\t{p.race}\t{p.ethnicity}\t{death}\n")
    with open(events_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(EVENT_HEADER) + "\n")
        for pid in pids:
            for ev in snapshot.patients[pid].events:
                fh.write(f"{pid}\t{format_date(ev.date)}\t{ev.category.value}\t{ev.code}\n")


# --------------------------------------------------------------------------
# Synthetic populations
# --------------------------------------------------------------------------

RACES = ("White", "Asian", "Black", "Other", "Unknown")
RACE_P = (0.55, 0.2, 0.07, 0.13, 0.05)
ETHNICITIES = ("Non-Hispanic", "Hispanic", "Unknown")
ETHNICITY_P = (0.78, 0.17, 0.05)


@dataclass
class SynthConfig:
    n_patients: int = 20_000
    target_prevalence: float = 0.07
    n_diagnosis_codes: int = 300
    n_procedure_codes: int = 200
    n_medication_codes: int = 150
    history_span: int = 5 * 365
    seed: int = 0
    snapshot_date: int = field(default_factory=lambda: parse_date("2015-01-01"))
    risk_fraction: float = 0.1  # share of each code universe that tracks severity

    def validate(self) -> None:
        if self.n_patients <= 0:
            raise ValueError("n_patients must be positive")
        if not 0.0 < self.target_prevalence < 1.0:
            raise ValueError("target_prevalence must lie in (0, 1)")
        if min(self.n_diagnosis_codes, self.n_procedure_codes, self.n_medication_codes) < 1:
            raise ValueError("code universe sizes must be positive")
        if self.history_span < 3 * 365:
            raise ValueError("history_span must cover at least three years")
        if not 0.0 < self.risk_fraction < 1.0:
            raise ValueError("risk_fraction must lie in (0, 1)")


def _code_universe(category: CodeCategory, n: int) -> list[str]:
    # ICD-9 / CPT / RxNorm-looking tokens; only uniqueness matters
    if category is CodeCategory.DIAGNOSIS:
        return [f"{100 + i // 10}.{i % 10}" for i in range(n)]
    if category is CodeCategory.PROCEDURE:
        return [f"{70000 + 17 * i}" for i in range(n)]
    return [f"{20000 + 311 * i}" for i in range(n)]


def _intercept_for_prevalence(score: np.ndarray, target: float) -> float:
    """Solve mean(sigmoid(a + score)) == target for a by bisection."""
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(mid + score)))) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic(config: SynthConfig) -> Snapshot:
    """Generate a reproducible population whose coded history predicts death.

    Each patient draws a latent severity from a two-component mixture
    (baseline or elevated). Severity scales the daily rate of visits,
    the share of inpatient stays and scans, and the rate of a designated
    subset of "risk" codes in every category; it also sets the probability
    of dying, with the intercept tuned so the expected death share equals
    ``config.target_prevalence``. Visits on a day follow a Poisson count.
    """
    return generate_synthetic_with_severity(config)[0]


def generate_synthetic_with_severity(config: SynthConfig) -> tuple[Snapshot, dict[str, float]]:
    """Like :func:`generate_synthetic` but also return each patient's latent severity."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_patients
    snap = int(config.snapshot_date)
    start = snap - config.history_span

    universes = {
        CodeCategory.DIAGNOSIS: _code_universe(CodeCategory.DIAGNOSIS, config.n_diagnosis_codes),
        CodeCategory.PROCEDURE: _code_universe(CodeCategory.PROCEDURE, config.n_procedure_codes),
        CodeCategory.MEDICATION: _code_universe(CodeCategory.MEDICATION, config.n_medication_codes),
    }
    # background codes get Zipf-like popularity; the tail block holds the risk codes
    tables = []
    for cat in _CATEGORY_ORDER[:3]:
        codes = universes[cat]
        m = len(codes)
        n_risk = max(1, int(round(config.risk_fraction * m)))
        n_bg = max(1, m - n_risk)
        w = 1.0 / np.arange(1, n_bg + 1) ** 0.8
        tables.append((np.array(codes[:n_bg], dtype=object), np.cumsum(w / w.sum()),
                       np.array(codes[m - n_risk:], dtype=object)))
    enc_codes = np.array([INPATIENT, "Hx Scan", "Outpatient", "Office Visit"], dtype=object)
    cats = np.array(_CATEGORY_ORDER, dtype=object)

    elevated = rng.random(n) < 0.15
    severity = np.where(elevated, rng.gamma(3.0, 0.6, n), rng.gamma(1.0, 0.15, n))
    age0 = rng.uniform(18, 92, n)
    death_score = 2.5 * severity + 0.03 * (age0 - 55)
    intercept = _intercept_for_prevalence(death_score, config.target_prevalence)
    p_death = 1.0 / (1.0 + np.exp(-(intercept + death_score)))
    dies = rng.random(n) < p_death

    genders = rng.choice(GENDERS, n)
    races = rng.choice(RACES, n, p=RACE_P)
    eths = rng.choice(ETHNICITIES, n, p=ETHNICITY_P)

    width = len(str(n - 1))
    patients: dict[str, PatientRecord] = {}
    latent: dict[str, float] = {}
    for i in range(n):
        pid = f"P{i:0{width}d}"
        s = float(severity[i])
        first = start + int(rng.integers(0, config.history_span - 2 * 365))
        if dies[i]:
            death = int(rng.integers(first + 400, snap + 1))
            end = death
        else:
            death = None
            end = snap if rng.random() < 0.85 else int(rng.integers(first, snap + 1))
        birth = first - int(age0[i] * 365.25) - int(rng.integers(0, 365))

        days = np.arange(first, end + 1)
        # effective severity climbs over the final year of life
        sev = np.full(days.size, s)
        if death is not None:
            sev = sev + 1.5 * np.exp(-(death - days) / 300.0)
        counts = rng.poisson(0.013 * (1.0 + 1.5 * sev))
        counts[0] = max(counts[0], 1)
        visit_days = np.repeat(days, counts)
        visit_sev = np.repeat(sev, counts)
        n_visits = visit_days.size

        p_inp = np.minimum(0.3, 0.01 + 0.05 * visit_sev)
        p_scan = np.minimum(0.4, 0.05 + 0.08 * visit_sev)
        u = rng.random(n_visits)
        enc_kind = np.where(u < p_inp, 0, np.where(u < p_inp + p_scan, 1,
                                                   np.where(rng.random(n_visits) < 0.6, 2, 3)))
        n_codes = 1 + rng.poisson(1.2 + 1.5 * (enc_kind == 0))
        code_days = np.repeat(visit_days, n_codes)
        code_sev = np.repeat(visit_sev, n_codes)
        code_cat = rng.integers(0, 3, code_days.size)
        is_risk = rng.random(code_days.size) < np.minimum(0.9, 0.02 + 0.22 * code_sev)
        code_u = rng.random(code_days.size)
        code_tok = np.empty(code_days.size, dtype=object)
        for c, (bg, bg_cdf, risk) in enumerate(tables):
            sel = code_cat == c
            bg_idx = np.minimum(np.searchsorted(bg_cdf, code_u[sel]), len(bg) - 1)
            risk_idx = np.minimum((code_u[sel] * len(risk)).astype(int), len(risk) - 1)
            code_tok[sel] = np.where(is_risk[sel], risk[risk_idx], bg[bg_idx])

        events = [EventRecord(pid, d, CodeCategory.ENCOUNTER, k)
                  for d, k in zip(visit_days.tolist(), enc_codes[enc_kind].tolist())]
        events.extend(EventRecord(pid, d, c, k) for d, c, k in
                      zip(code_days.tolist(), cats[code_cat].tolist(), code_tok.tolist()))
        patients[pid] = PatientRecord(pid, birth, str(genders[i]), str(races[i]), str(eths[i]),
                                      death, tuple(events))
        latent[pid] = s
    return Snapshot(snap, patients), latent


def death_prevalence(snapshot: Snapshot) -> float:
    n = len(snapshot.patients)
    if n == 0:
        return math.nan
    return sum(p.death_date is not None for p in snapshot.patients.values()) / n
