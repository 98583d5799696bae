"""Observation-window featurization.

A patient censored at prediction date PD is described by

* per-slice occurrence counts of every (category, code),
* seven per-category summary statistics over the observation window,
* demographics: age in years, gender indicators, race and ethnicity one-hots.

Event age ``a = PD - date`` (days) decides the slice: ``[0, 30)`` -> 1,
``[30, 90)`` -> 2, ``[90, 180)`` -> 3, ``[180, 365]`` -> 4. The observation
window is ``0 <= a <= 365`` so that the four slices partition it.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .event_log import GENDERS, CodeCategory, PatientRecord

SLICE_STARTS = (0, 30, 90, 180)
WINDOW = 365
STATS = ("unique_codes", "total_codes", "max_codes_per_day", "min_codes_per_day",
         "range_codes_per_day", "mean_codes_per_day", "var_codes_per_day")
DAYS_PER_YEAR = 365.25


@dataclass(frozen=True, slots=True)
class SliceCount:
    slice: int
    category: CodeCategory
    code: str

    def sort_key(self):
        return (0, self.category.rank, self.slice, self.code)

    def token(self) -> str:
        return f"SLICE\t{self.slice}\t{self.category.value}\t{self.code}"


@dataclass(frozen=True, slots=True)
class CategoryStat:
    category: CodeCategory
    stat: str

    def sort_key(self):
        return (1, self.category.rank, STATS.index(self.stat), "")

    def token(self) -> str:
        return f"STAT\t{self.category.value}\t{self.stat}"


@dataclass(frozen=True, slots=True)
class Demographic:
    field: str  # age | gender | race | ethnicity
    value: str = ""

    def sort_key(self):
        return (2, ("age", "gender", "race", "ethnicity").index(self.field), 0, self.value)

    def token(self) -> str:
        return f"DEMO\t{self.field}\t{self.value}"


Descriptor = SliceCount | CategoryStat | Demographic
AGE = Demographic("age")


def slice_of(age_days: int) -> int | None:
    """1-based slice for an event ``age_days`` before PD, None outside the window."""
    if age_days < 0 or age_days > WINDOW:
        return None
    if age_days < 30:
        return 1
    if age_days < 90:
        return 2
    if age_days < 180:
        return 3
    return 4


def window_events(patient: PatientRecord, prediction_date: int):
    lo = prediction_date - WINDOW
    return [e for e in patient.events if lo <= e.date <= prediction_date]


def slice_counts(patient: PatientRecord, prediction_date: int) -> Counter:
    """Occurrence counts keyed by ``SliceCount(slice, category, code)``."""
    out: Counter = Counter()
    for e in patient.events:
        s = slice_of(prediction_date - e.date)
        if s is not None:
            out[SliceCount(s, e.category, e.code)] += 1
    return out


def category_stats(patient: PatientRecord, prediction_date: int,
                   category: CodeCategory) -> tuple[float, ...]:
    """The seven window statistics for one category.

    Per-day figures are taken over active days (days with at least one code
    of the category); variance is the population variance. All zero when the
    category is absent from the window.
    """
    evs = [e for e in window_events(patient, prediction_date) if e.category is category]
    return _stats_from_events(evs)


def _stats_from_events(evs) -> tuple[float, ...]:
    if not evs:
        return (0.0,) * 7
    per_day = np.array(list(Counter(e.date for e in evs).values()), dtype=float)
    mx, mn = per_day.max(), per_day.min()
    return (float(len({e.code for e in evs})), float(len(evs)), float(mx), float(mn),
            float(mx - mn), float(per_day.mean()), float(per_day.var()))


def age_years(birth_date: int, prediction_date: int) -> int:
    days = prediction_date - birth_date
    if days < 0:
        raise ValueError("prediction date precedes birth date")
    return int(math.floor(days / DAYS_PER_YEAR))


def demographics(patient: PatientRecord, prediction_date: int) -> dict[Demographic, float]:
    """Age, gender indicator, race and ethnicity one-hots (zero entries omitted)."""
    out = {AGE: float(age_years(patient.birth_date, prediction_date)),
           Demographic("gender", patient.gender): 1.0,
           Demographic("race", patient.race): 1.0,
           Demographic("ethnicity", patient.ethnicity): 1.0}
    if out[AGE] == 0.0:
        del out[AGE]
    return out


def raw_features(patient: PatientRecord, prediction_date: int) -> dict:
    """All candidate descriptors with non-zero value, before vocabulary lookup."""
    feats: dict = dict(slice_counts(patient, prediction_date))
    by_cat = defaultdict(list)
    for e in window_events(patient, prediction_date):
        by_cat[e.category].append(e)
    for cat, evs in by_cat.items():
        for name, v in zip(STATS, _stats_from_events(evs)):
            if v != 0.0:
                feats[CategoryStat(cat, name)] = v
    feats.update(demographics(patient, prediction_date))
    return feats


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureVocabulary:
    descriptors: tuple
    min_patient_count: int = 100
    index: Mapping = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        idx = {d: i for i, d in enumerate(self.descriptors)}
        if len(idx) != len(self.descriptors):
            raise ValueError("duplicate descriptors in vocabulary")
        object.__setattr__(self, "index", idx)

    def __len__(self):
        return len(self.descriptors)

    def __contains__(self, d):
        return d in self.index

    def dumps(self) -> str:
        lines = [f"# min_patient_count={self.min_patient_count}"]
        lines += [f"{i}\t{d.token()}" for i, d in enumerate(self.descriptors)]
        return "\n".join(lines) + "\n"

    def checksum(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "FeatureVocabulary":
        """Parse a vocabulary file.

        Grammar, one descriptor per tab-separated line after a
        ``# min_patient_count=N`` header::

            <index> SLICE <1-4> <DX|PX|RX|ENC> <code>
            <index> STAT <DX|PX|RX|ENC> <stat name>
            <index> DEMO <age|gender|race|ethnicity> <value>
        """
        cats = {c.value: c for c in CodeCategory}
        text = Path(path).read_text(encoding="utf-8").splitlines()
        if not text or not text[0].startswith("# min_patient_count="):
            raise ValueError(f"{path}: missing vocabulary header")
        mpc = int(text[0].split("=", 1)[1])
        descs = []
        for lineno, line in enumerate(text[1:], start=2):
            cols = line.split("\t")
            try:
                if int(cols[0]) != len(descs):
                    raise ValueError("non-contiguous index")
                kind = cols[1]
                if kind == "SLICE":
                    d = SliceCount(int(cols[2]), cats[cols[3]], cols[4])
                elif kind == "STAT":
                    if cols[3] not in STATS:
                        raise ValueError(f"unknown stat {cols[3]}")
                    d = CategoryStat(cats[cols[2]], cols[3])
                elif kind == "DEMO":
                    d = Demographic(cols[2], cols[3])
                else:
                    raise ValueError(f"unknown descriptor kind {kind}")
            except (IndexError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            descs.append(d)
        return cls(tuple(descs), mpc)


def build_vocabulary(patients: Iterable[tuple[PatientRecord, int]],
                     min_patient_count: int = 100) -> FeatureVocabulary:
    """Build the vocabulary from (censored patient, prediction date) pairs.

    Slice-count descriptors survive only if more than ``min_patient_count``
    distinct patients have them. Category statistics and gender indicators
    are always present; race and ethnicity tokens are those observed.
    """
    support: Counter = Counter()
    races, eths = set(), set()
    n = 0
    for patient, pd_ in patients:
        n += 1
        support.update(slice_counts(patient, pd_).keys())
        races.add(patient.race)
        eths.add(patient.ethnicity)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty training set")
    kept = [d for d, c in support.items() if c > min_patient_count]
    stats = [CategoryStat(c, s) for c in CodeCategory for s in STATS]
    demo = [AGE] + [Demographic("gender", g) for g in GENDERS]
    demo += [Demographic("race", r) for r in races] + [Demographic("ethnicity", e) for e in eths]
    descs = sorted(kept + stats + demo, key=lambda d: d.sort_key())
    return FeatureVocabulary(tuple(descs), min_patient_count)


# --------------------------------------------------------------------------
# Sparse vectors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape:
            raise ValueError("indices and values differ in length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError("indices must be strictly increasing and within range")
        if not np.all(np.isfinite(val)) or np.any(val == 0):
            raise ValueError("stored values must be finite and non-zero")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def __eq__(self, other):
        return (isinstance(other, SparseVector) and self.dim == other.dim
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    __hash__ = None


def to_sparse(raw: Mapping, vocab: FeatureVocabulary) -> SparseVector:
    pairs = sorted((vocab.index[d], v) for d, v in raw.items() if v != 0 and d in vocab.index)
    if not pairs:
        return SparseVector(np.empty(0, np.int64), np.empty(0), len(vocab))
    idx, val = zip(*pairs)
    return SparseVector(np.array(idx), np.array(val, dtype=float), len(vocab))


def featurize(patient: PatientRecord, prediction_date: int, vocab: FeatureVocabulary) -> SparseVector:
    """Sparse feature vector of a censored patient; unknown descriptors are dropped."""
    return to_sparse(raw_features(patient, prediction_date), vocab)


def stack(vectors: Sequence[SparseVector], dim: int | None = None) -> sp.csr_matrix:
    """Stack sparse vectors into a CSR matrix (one row each)."""
    if dim is None:
        dim = vectors[0].dim if vectors else 0
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([v.nnz for v in vectors])
    indices = np.concatenate([v.indices for v in vectors]) if vectors else np.empty(0, np.int64)
    data = np.concatenate([v.values for v in vectors]) if vectors else np.empty(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


def write_matrix(X: sp.csr_matrix, path) -> None:
    """Sparse triplet text: ``rows cols nnz`` header then ``row col value`` lines."""
    coo = X.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{X.shape[0]}\t{X.shape[1]}\t{coo.nnz}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r}\t{c}\t{float(v)!r}\n")


def read_matrix(path) -> sp.csr_matrix:
    with open(path, encoding="utf-8") as fh:
        try:
            n_rows, n_cols, nnz = (int(x) for x in fh.readline().split("\t"))
        except ValueError:
            raise ValueError(f"{path}: bad matrix header") from None
        body = np.loadtxt(fh, dtype=float, ndmin=2) if nnz else np.empty((0, 3))
    if body.shape[0] != nnz:
        raise ValueError(f"{path}: header promises {nnz} entries, found {body.shape[0]}")
    return sp.csr_matrix((body[:, 2], (body[:, 0].astype(np.int64), body[:, 1].astype(np.int64))),
                         shape=(n_rows, n_cols))
