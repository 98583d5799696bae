import dataclasses

import numpy as np
import pytest

from palliscreen.event_log import (CodeCategory, EventRecord, PatientRecord, Snapshot,
                                   SnapshotError, SynthConfig, death_prevalence, format_date,
                                   generate_synthetic, generate_synthetic_with_severity,
                                   load_snapshot, parse_date, write_snapshot)

PATIENTS = """patient_id\tbirth_date\tgender\trace\tethnicity\tdeath_date
A\t1950-01-01\tfemale\tWhite\tNon-Hispanic\t
B\t1940-06-15\tmale\tAsian\tUnknown\t2012-03-01
C\t1960-02-29\tfemale\tOther\tHispanic\t
"""

EVENTS = """patient_id\tdate\tcategory\tcode
A\t2010-01-05\tENC\tOutpatient
B\t2011-01-01\tENC\tInpatient
A\t2010-01-05\tDX\t197.7
B\t2011-01-01\tPX\t88331
A\t2009-12-31\tRX\t283838
B\t2011-01-02\tDX\t154.1
C\t2010-05-05\tENC\tHx Scan
"""


def write(tmp_path, patients=PATIENTS, events=EVENTS):
    p, e = tmp_path / "patients.tsv", tmp_path / "events.tsv"
    p.write_text(patients, encoding="utf-8")
    e.write_text(events, encoding="utf-8")
    return p, e


def test_dates_round_trip():
    assert parse_date("1970-01-01") == 0
    assert format_date(parse_date("2016-02-29")) == "2016-02-29"


def test_fixture_counts(tmp_path):
    snap = load_snapshot(*write(tmp_path))
    assert {pid: len(p.events) for pid, p in snap.patients.items()} == {"A": 3, "B": 3, "C": 1}
    a = snap.patients["A"].events
    assert [e.date for e in a] == sorted(e.date for e in a)
    assert a[0].category is CodeCategory.MEDICATION


def test_empty_events_file(tmp_path):
    snap = load_snapshot(*write(tmp_path, PATIENTS.split("B\t")[0], "patient_id\tdate\tcategory\tcode\n"))
    assert len(snap) == 1
    assert snap.n_events() == 0


def test_event_after_death_names_patient_and_line(tmp_path):
    events = EVENTS + "B\t2013-01-01\tDX\t287.5\n"
    with pytest.raises(SnapshotError) as err:
        load_snapshot(*write(tmp_path, events=events))
    assert "B" in str(err.value)
    assert err.value.line == 9


@pytest.mark.parametrize("bad_line, fragment", [
    ("Z\t2010-01-01\tDX\t1.1\n", "unknown patient"),
    ("A\t2010-13-01\tDX\t1.1\n", "bad date"),
    ("A\t2010-01-01\tLAB\t1.1\n", "unknown category"),
    ("A\t2010-01-01\tDX\n", "expected 4 fields"),
    ("A\t2010-01-01\tDX\t\n", "empty code"),
])
def test_malformed_events(tmp_path, bad_line, fragment):
    with pytest.raises(SnapshotError, match=fragment) as err:
        load_snapshot(*write(tmp_path, events=EVENTS + bad_line))
    assert err.value.line == 9


def test_duplicate_patient(tmp_path):
    with pytest.raises(SnapshotError, match="duplicate"):
        load_snapshot(*write(tmp_path, patients=PATIENTS + "A\t1950-01-01\tmale\tWhite\tNon-Hispanic\t\n"))


def test_event_after_snapshot_date(tmp_path):
    with pytest.raises(SnapshotError, match="snapshot_date"):
        load_snapshot(*write(tmp_path), snapshot_date=parse_date("2010-12-31"))


def test_snapshot_validates_records():
    ev = EventRecord("A", 10, CodeCategory.ENCOUNTER, "Outpatient")
    with pytest.raises(SnapshotError):
        Snapshot(5, {"A": PatientRecord("A", 0, "female", "x", "y", None, (ev,))})
    with pytest.raises(SnapshotError):
        Snapshot(50, {"A": PatientRecord("A", 0, "female", "x", "y", 9, (ev,))})


def test_round_trip(tmp_path):
    snap = load_snapshot(*write(tmp_path))
    out = tmp_path / "out"
    out.mkdir()
    write_snapshot(snap, out / "p.tsv", out / "e.tsv")
    again = load_snapshot(out / "p.tsv", out / "e.tsv")
    assert again.patients == snap.patients


class TestSynthetic:
    small = SynthConfig(n_patients=300, seed=7)

    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            write_snapshot(generate_synthetic(self.small), tmp_path / f"{name}p", tmp_path / f"{name}e")
        assert (tmp_path / "ap").read_bytes() == (tmp_path / "bp").read_bytes()
        assert (tmp_path / "ae").read_bytes() == (tmp_path / "be").read_bytes()

    def test_seed_changes_output(self):
        a = generate_synthetic(self.small)
        b = generate_synthetic(dataclasses.replace(self.small, seed=8))
        assert a.patients != b.patients

    def test_generated_snapshot_reloads(self, tmp_path):
        snap = generate_synthetic(self.small)
        write_snapshot(snap, tmp_path / "p", tmp_path / "e")
        again = load_snapshot(tmp_path / "p", tmp_path / "e")
        assert again.patients == snap.patients

    def test_every_patient_has_an_encounter(self):
        snap = generate_synthetic(self.small)
        assert all(p.encounter_dates() for p in snap.patients.values())

    @pytest.mark.parametrize("field, value", [("n_patients", 0), ("target_prevalence", 0.0),
                                              ("target_prevalence", 1.0)])
    def test_config_validation(self, field, value):
        with pytest.raises(ValueError):
            generate_synthetic(dataclasses.replace(self.small, **{field: value}))


@pytest.mark.slow
def test_prevalence_and_severity_signal():
    snap, severity = generate_synthetic_with_severity(SynthConfig(n_patients=20_000, seed=3))
    assert 0.05 <= death_prevalence(snap) <= 0.09
    sev = np.array([severity[pid] for pid in snap.patients])
    dead = np.array([p.death_date is not None for p in snap.patients.values()])
    q1, q3 = np.quantile(sev, [0.25, 0.75])
    assert dead[sev >= q3].mean() > dead[sev <= q1].mean()
