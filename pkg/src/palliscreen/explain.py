"""Per-patient explanations by code ablation.

Removing every occurrence of one code from a patient's record and
re-featurizing (slice counts and summary statistics alike) gives a second
probability; the drop from the original probability is that code's
influence. Age is probed by setting it to zero and gender by swapping it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .event_log import GENDERS, CodeCategory, PatientRecord
from .features import (AGE, Demographic, FeatureVocabulary, SparseVector, age_years,
                       raw_features, stack, to_sparse, window_events)
from .model import MLPParams, forward

TOP_K = 5
DEMOGRAPHIC = "Demographic"
REPORT_SECTIONS = tuple(c.label for c in CodeCategory) + (DEMOGRAPHIC,)


@dataclass(frozen=True)
class Influence:
    category: str  # CodeCategory label or "Demographic"
    code: str  # code token, or "Age" / "Gender"
    original_value: float | str
    influence: float


@dataclass
class ExplanationReport:
    patient_id: str
    probability: float
    sections: dict[str, list[Influence]] = field(default_factory=dict)

    def entries(self):
        return [inf for sec in REPORT_SECTIONS for inf in self.sections.get(sec, [])]

    def format(self, descriptions: Mapping[str, str] | None = None) -> str:
        descriptions = descriptions or {}
        lines = [f"patient_id\t{self.patient_id}",
                 f"probability_score\t{self.probability:.4f}",
                 "category\tcode\tvalue\tinfluence\tdescription"]
        for sec in REPORT_SECTIONS:
            rows = self.sections.get(sec, [])
            if not rows:
                lines.append(f"{sec}\t-\t-\t-\t-")
            for inf in rows:
                v = inf.original_value
                value = f"{v:g}" if isinstance(v, float) else str(v)
                lines.append(f"{sec}\t{inf.code}\t{value}\t{inf.influence:.4f}\t"
                             f"{descriptions.get(inf.code, '')}")
        return "\n".join(lines) + "\n"


def ablate_code(patient: PatientRecord, category: CodeCategory, code: str) -> PatientRecord:
    """Copy of ``patient`` without any event matching ``(category, code)``."""
    keep = [e for e in patient.events if not (e.category is category and e.code == code)]
    if len(keep) == len(patient.events):
        return patient
    return patient.with_events(keep)


def _probability(params, vectors: list[SparseVector]) -> np.ndarray:
    return np.atleast_1d(forward(params, stack(vectors, params.input_dim)))


def window_codes(patient: PatientRecord, prediction_date: int) -> dict[tuple[CodeCategory, str], int]:
    """Occurrence count of each (category, code) inside the observation window."""
    out: dict = {}
    for e in window_events(patient, prediction_date):
        out[(e.category, e.code)] = out.get((e.category, e.code), 0) + 1
    return out


def code_influence(params: MLPParams, vocab: FeatureVocabulary, patient: PatientRecord,
                   prediction_date: int, category: CodeCategory, code: str) -> Influence:
    base = to_sparse(raw_features(patient, prediction_date), vocab)
    ablated = to_sparse(raw_features(ablate_code(patient, category, code), prediction_date), vocab)
    value = window_codes(patient, prediction_date).get((category, code), 0)
    if ablated == base:
        return Influence(category.label, code, float(value), 0.0)
    p = _probability(params, [base, ablated])
    return Influence(category.label, code, float(value), float(p[0] - p[1]))


def _demographic_probes(raw: dict, patient: PatientRecord, prediction_date: int):
    no_age = dict(raw)
    no_age.pop(AGE, None)
    other = GENDERS[1 - GENDERS.index(patient.gender)]
    swapped = dict(raw)
    swapped.pop(Demographic("gender", patient.gender), None)
    swapped[Demographic("gender", other)] = 1.0
    age = float(age_years(patient.birth_date, prediction_date))
    return [("Age", age, no_age), ("Gender", patient.gender, swapped)]


def demographic_influence(params: MLPParams, vocab: FeatureVocabulary, patient: PatientRecord,
                          prediction_date: int) -> list[Influence]:
    """Influence of age (set to 0) and gender (swapped); race/ethnicity untouched."""
    raw = raw_features(patient, prediction_date)
    probes = _demographic_probes(raw, patient, prediction_date)
    vecs = [to_sparse(raw, vocab)] + [to_sparse(r, vocab) for _, _, r in probes]
    p = _probability(params, vecs)
    return [Influence(DEMOGRAPHIC, name, value, float(p[0] - pi))
            for (name, value, _), pi in zip(probes, p[1:])]


def explain(params: MLPParams, vocab: FeatureVocabulary, patient: PatientRecord,
            prediction_date: int, top_k: int = TOP_K) -> ExplanationReport:
    """Top-``top_k`` positive influences per category for one censored patient.

    Candidates are the codes present in the observation window plus the two
    demographic probes. Ties are broken by code in lexicographic order.
    """
    raw = raw_features(patient, prediction_date)
    base = to_sparse(raw, vocab)
    codes = sorted(window_codes(patient, prediction_date).items(),
                   key=lambda kv: (kv[0][0].rank, kv[0][1]))
    vecs = [base]
    for (cat, code), _ in codes:
        vecs.append(to_sparse(raw_features(ablate_code(patient, cat, code), prediction_date), vocab))
    probes = _demographic_probes(raw, patient, prediction_date)
    vecs += [to_sparse(r, vocab) for _, _, r in probes]
    p = _probability(params, vecs)
    p0 = float(p[0])

    found: list[Influence] = []
    for ((cat, code), count), vec, pi in zip(codes, vecs[1:], p[1:]):
        # identical vectors give exactly zero, whatever the float noise of a batch
        drop = 0.0 if vec == base else float(p0 - pi)
        found.append(Influence(cat.label, code, float(count), drop))
    for (name, value, _), vec, pi in zip(probes, vecs[1 + len(codes):], p[1 + len(codes):]):
        found.append(Influence(DEMOGRAPHIC, name, value, 0.0 if vec == base else float(p0 - pi)))

    report = ExplanationReport(patient.patient_id, p0)
    for sec in REPORT_SECTIONS:
        rows = sorted((f for f in found if f.category == sec and f.influence > 0),
                      key=lambda f: (-f.influence, f.code))
        report.sections[sec] = rows[:top_k]
    return report


def load_descriptions(path) -> dict[str, str]:
    """Read a ``code<TAB>description`` file (lines starting with # are skipped)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        code, sep, text = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected code<TAB>description")
        out[code] = text
    return out
