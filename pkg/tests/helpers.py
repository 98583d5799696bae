"""Fixture builders and independent oracles used across the test suite.

The oracles deliberately avoid the package's own helpers: they recompute
everything from raw event lists with the plainest code that states the rule.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np

from palliscreen.event_log import CodeCategory, EventRecord, PatientRecord

DX, PX, RX, ENC = (CodeCategory.DIAGNOSIS, CodeCategory.PROCEDURE,
                   CodeCategory.MEDICATION, CodeCategory.ENCOUNTER)


def patient(pid="A", events=(), death=None, birth=-20_000, gender="female",
            race="White", ethnicity="Non-Hispanic") -> PatientRecord:
    """``events`` holds (day, category, code) triples."""
    evs = tuple(EventRecord(pid, d, c, k) for d, c, k in events)
    return PatientRecord(pid, birth, gender, race, ethnicity, death, evs)


def encounters(*days, inpatient=()):
    return [(d, ENC, "Inpatient" if d in inpatient else "Outpatient") for d in days]


def random_history(rng: np.random.Generator, pid: str) -> PatientRecord:
    """A random patient with a few encounters spread over ~4 years.

    Spacing and death offsets are drawn so that every constraint boundary
    (90/365 lead, 365 history and follow-up) is hit regularly.
    """
    n_enc = int(rng.integers(1, 9))
    first = int(rng.integers(0, 50))
    days = sorted({first} | {first + int(x) for x in rng.choice(
        [0, 1, 89, 90, 91, 364, 365, 366, 400, 500, 730, 800, 1000, 1100, 1200],
        size=n_enc - 1)} | {first + int(x) for x in rng.integers(0, 1500, size=int(rng.integers(0, 4)))})
    evs = []
    for d in days:
        kind = rng.choice(["Inpatient", "Outpatient", "Hx Scan", "Office Visit"], p=[.3, .4, .15, .15])
        evs.append((d, ENC, str(kind)))
        if rng.random() < 0.2:
            evs.append((d, ENC, "Outpatient"))
        if rng.random() < 0.5:
            evs.append((d, DX, f"{int(rng.integers(100, 104))}.{int(rng.integers(0, 2))}"))
    death = None
    if rng.random() < 0.5:
        death = days[-1] + int(rng.choice([0, 1, 30, 89, 90, 91, 200, 364, 365, 366, 500]))
        if rng.random() < 0.5:
            # death relative to a random encounter, to exercise admitted boundaries
            death = max(days[-1], int(rng.choice(days)) + int(rng.choice([90, 91, 365])))
    return patient(pid, evs, death=death, birth=first - 30 * 365)


# --------------------------------------------------------------------------
# Cohort oracle
# --------------------------------------------------------------------------

def oracle_candidates(p: PatientRecord, lead_min=90, lead_max=365, history_min=365,
                      followup_min=365):
    """All encounter dates passing the hard constraints, as (date, is_inpatient)."""
    enc_days = [e.date for e in p.events if e.category == ENC]
    if not enc_days:
        return []
    first, last = min(enc_days), max(enc_days)
    out = []
    for d in sorted(set(enc_days)):
        ok = d - first >= history_min
        if p.death_date is not None:
            ok = ok and lead_min <= p.death_date - d <= lead_max
        else:
            ok = ok and last - d >= followup_min
        if ok:
            inp = any(e.date == d and e.category == ENC and e.code == "Inpatient" for e in p.events)
            out.append((d, inp))
    return out


def oracle_choice(p: PatientRecord, **kw):
    cands = oracle_candidates(p, **kw)
    if not cands:
        return None
    inp = [d for d, i in cands if i]
    pool = inp if inp else [d for d, _ in cands]
    return min(pool) if p.death_date is not None else max(pool)


def oracle_point_ok(p: PatientRecord, pd_: int, positive: bool, lead_min=90, lead_max=365,
                    history_min=365, followup_min=365) -> bool:
    enc_days = [e.date for e in p.events if e.category == ENC]
    if pd_ - min(enc_days) < history_min:
        return False
    if positive:
        return p.death_date is not None and lead_min <= p.death_date - pd_ <= lead_max
    return p.death_date is None and max(enc_days) - pd_ >= followup_min


# --------------------------------------------------------------------------
# Featurization oracle
# --------------------------------------------------------------------------

def dense_reference(p: PatientRecord, pd_: int, vocab) -> np.ndarray:
    """Fill a dense vector by evaluating each vocabulary descriptor directly."""
    from palliscreen.features import CategoryStat, Demographic, SliceCount

    bounds = {1: (pd_ - 29, pd_), 2: (pd_ - 89, pd_ - 30), 3: (pd_ - 179, pd_ - 90),
              4: (pd_ - 365, pd_ - 180)}
    out = np.zeros(len(vocab))
    for i, d in enumerate(vocab.descriptors):
        if isinstance(d, SliceCount):
            lo, hi = bounds[d.slice]
            out[i] = sum(1 for e in p.events
                         if e.category == d.category and e.code == d.code and lo <= e.date <= hi)
        elif isinstance(d, CategoryStat):
            evs = [e for e in p.events if e.category == d.category and pd_ - 365 <= e.date <= pd_]
            days: dict = {}
            for e in evs:
                days[e.date] = days.get(e.date, 0) + 1
            c = list(days.values())
            if not c:
                continue
            mean = sum(c) / len(c)
            val = {"unique_codes": len({e.code for e in evs}), "total_codes": len(evs),
                   "max_codes_per_day": max(c), "min_codes_per_day": min(c),
                   "range_codes_per_day": max(c) - min(c), "mean_codes_per_day": mean,
                   "var_codes_per_day": sum((x - mean) ** 2 for x in c) / len(c)}[d.stat]
            out[i] = val
        elif isinstance(d, Demographic):
            if d.field == "age":
                out[i] = math.floor((pd_ - p.birth_date) / 365.25)
            elif d.field == "gender":
                out[i] = float(p.gender == d.value)
            elif d.field == "race":
                out[i] = float(p.race == d.value)
            elif d.field == "ethnicity":
                out[i] = float(p.ethnicity == d.value)
    return out


# --------------------------------------------------------------------------
# Metric oracles
# --------------------------------------------------------------------------

def brute_force_ap(y, s) -> Fraction:
    """Exact AP by enumerating every distinct threshold ``score >= t``."""
    n_pos = sum(y)
    pts = []
    for t in sorted(set(s), reverse=True):
        tp = sum(1 for yi, si in zip(y, s) if si >= t and yi == 1)
        fp = sum(1 for yi, si in zip(y, s) if si >= t and yi == 0)
        pts.append((Fraction(tp, n_pos), Fraction(tp, tp + fp)))
    ap, prev_r = Fraction(0), Fraction(0)
    for r, p in pts:
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def brute_force_auroc(y, s) -> Fraction:
    """Exact trapezoidal ROC area over every distinct threshold."""
    n_pos = sum(y)
    n_neg = len(y) - n_pos
    pts = [(Fraction(0), Fraction(0))]
    for t in sorted(set(s), reverse=True):
        tp = sum(1 for yi, si in zip(y, s) if si >= t and yi == 1)
        fp = sum(1 for yi, si in zip(y, s) if si >= t and yi == 0)
        pts.append((Fraction(fp, n_neg), Fraction(tp, n_pos)))
    return sum(((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(pts, pts[1:])), Fraction(0))


def rank_statistic_auroc(y, s) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), over all positive/negative pairs."""
    y = np.asarray(y)
    s = np.asarray(s, dtype=float)
    pos, neg = s[y == 1], s[y == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float((gt + 0.5 * eq) / (pos.size * neg.size))


def all_labelings(n):
    for bits in itertools.product((0, 1), repeat=n):
        if 0 < sum(bits) < n:
            yield list(bits)


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------

def finite_difference_grads(params, loss_fn, h=1e-5):
    """Central differences of ``loss_fn(params)`` for every parameter entry."""
    out = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn(params)
            flat[k] = orig - h
            down = loss_fn(params)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-7) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
