import random
from datetime import datetime, timedelta, timezone

import pytest

from periop.eventlog import (
    CaseAttributes,
    Event,
    ParseError,
    assemble_cases,
    extract_phase_durations,
    parse_case_attributes,
    parse_events,
    parse_timestamp,
)

EVENTS_CSV = (
    "case_id,event_type,timestamp\n"
    "W1,anesthesia_start,2024-03-01T08:00:00Z\n"
    "W1,anesthesia_complete,2024-03-01T08:25:00Z\n"
    "W1,incision,2024-03-01T08:40:00Z\n"
    "W1,suture,2024-03-01T10:10:00Z\n"
    "W2,incision,2024-03-01T09:00:00+01:00\n"
)


def ev(case_id, event_type, iso):
    return Event(case_id, event_type, parse_timestamp(iso))


def test_parse_events_csv_direct_mapping():
    events, errors = parse_events(b"case_id,event_type,timestamp\nW1,incision,2024-03-01T08:40:00Z\n")
    assert errors == []
    assert events == [ev("W1", "incision", "2024-03-01T08:40:00Z")]


def test_unknown_event_type_passes_through():
    events, _ = parse_events(b"case_id,event_type,timestamp\nW1,bad-type,2024-03-01T08:40:00Z\n")
    assert events[0].event_type == "bad-type"
    assert not events[0].is_anchor


def test_malformed_timestamp_strict_reports_line():
    with pytest.raises(ParseError) as excinfo:
        parse_events(b"case_id,event_type,timestamp\nW1,incision,yesterday\n")
    assert excinfo.value.line == 2
    assert "timestamp" in excinfo.value.message


def test_missing_case_id_is_record_error():
    data = b"case_id,event_type,timestamp\n,incision,2024-03-01T08:40:00Z\n"
    with pytest.raises(ParseError):
        parse_events(data)
    events, errors = parse_events(data, strict=False)
    assert events == []
    assert len(errors) == 1 and errors[0].line == 2


def test_lenient_mode_skips_and_collects():
    data = (
        b"case_id,event_type,timestamp\n"
        b"W1,incision,not-a-time\n"
        b"W2,suture,2024-03-01T10:10:00Z\n"
    )
    events, errors = parse_events(data, strict=False)
    assert [e.case_id for e in events] == ["W2"]
    assert [e.line for e in errors] == [2]


def test_header_required():
    with pytest.raises(ParseError):
        parse_events(b"id,kind,when\nW1,incision,2024-03-01T08:40:00Z\n")


def test_parse_events_jsonl():
    data = b'{"case_id": "W1", "event_type": "Incision", "timestamp": "2024-03-01T08:40:00+01:00"}\n'
    events, _ = parse_events(data, fmt="jsonl")
    assert events[0].event_type == "incision"
    assert events[0].timestamp == datetime(2024, 3, 1, 7, 40, tzinfo=timezone.utc)


def test_timestamps_normalized_to_utc():
    assert parse_timestamp("2024-03-01T08:40:00+01:00") == parse_timestamp("2024-03-01T07:40:00Z")
    naive = parse_timestamp("2024-03-01T07:40:00")
    assert naive.tzinfo == timezone.utc


def test_assemble_groups_and_sorts():
    events, _ = parse_events(EVENTS_CSV.encode())
    cases = assemble_cases(events, [CaseAttributes(case_id="W1", department="urology")])
    assert [c.case_id for c in cases] == ["W1", "W2"]
    w1 = cases[0]
    assert [e.event_type for e in w1.events] == [
        "anesthesia_start",
        "anesthesia_complete",
        "incision",
        "suture",
    ]
    assert w1.attributes.department == "urology"
    # attributes missing for W2 -> defaults
    assert cases[1].attributes.department == "unknown"
    assert cases[1].attributes.sex == "other"


def test_duplicate_anchor_flags_case_invalid():
    rows = (
        "case_id,event_type,timestamp\n"
        "W1,incision,2024-03-01T08:40:00Z\n"
        "W1,incision,2024-03-01T08:41:00Z\n"
        "W1,suture,2024-03-01T09:40:00Z\n"
    )
    events, _ = parse_events(rows.encode())
    (case,) = assemble_cases(events, [])
    assert case.duplicate_anchors == ("incision",)
    assert not case.is_valid
    assert case.durations.procedure_min is None


def test_assemble_empty_is_empty():
    assert assemble_cases([], []) == []


def test_phase_durations_from_anchors():
    events, _ = parse_events(EVENTS_CSV.encode())
    cases = assemble_cases(events, [])
    w1 = cases[0]
    assert w1.durations.induction_min == pytest.approx(25.0)
    assert w1.durations.preparation_min == pytest.approx(15.0)
    assert w1.durations.procedure_min == pytest.approx(90.0)
    # W2 has only an incision: nothing is derivable
    w2 = cases[1]
    assert w2.durations.induction_min is None
    assert w2.durations.procedure_min is None


def test_negative_durations_pass_through():
    rows = (
        "case_id,event_type,timestamp\n"
        "W1,suture,2024-03-01T08:00:00Z\n"
        "W1,incision,2024-03-01T09:00:00Z\n"
    )
    events, _ = parse_events(rows.encode())
    (case,) = assemble_cases(events, [])
    assert case.durations.procedure_min == pytest.approx(-60.0)


def test_phase_sum_identity_and_permutation_invariance():
    rng = random.Random(7)
    base = datetime(2024, 5, 1, 7, 0, tzinfo=timezone.utc)
    for _ in range(25):
        t0 = base + timedelta(minutes=rng.randrange(600))
        ind = rng.randrange(5, 60)
        prep = rng.randrange(5, 45)
        proc = rng.randrange(10, 300)
        events = [
            Event("X", "anesthesia_start", t0),
            Event("X", "anesthesia_complete", t0 + timedelta(minutes=ind)),
            Event("X", "incision", t0 + timedelta(minutes=ind + prep)),
            Event("X", "suture", t0 + timedelta(minutes=ind + prep + proc)),
        ]
        rng.shuffle(events)
        (case,) = assemble_cases(events, [])
        d = case.durations
        assert d.induction_min == pytest.approx(ind)
        assert d.preparation_min == pytest.approx(prep)
        assert d.procedure_min == pytest.approx(proc)
        total = d.induction_min + d.preparation_min + d.procedure_min
        assert total == pytest.approx(proc + prep + ind)


def test_assembly_preserves_event_multiset():
    events, _ = parse_events(EVENTS_CSV.encode())
    cases = assemble_cases(events, [])
    flattened = sorted(
        (e.case_id, e.event_type, e.timestamp) for c in cases for e in c.events
    )
    assert flattened == sorted((e.case_id, e.event_type, e.timestamp) for e in events)


def test_extract_ignores_stale_durations():
    events, _ = parse_events(EVENTS_CSV.encode())
    case = assemble_cases(events, [])[0]
    recomputed = extract_phase_durations(case)
    assert recomputed == case.durations


CASES_CSV_HEADER = (
    "case_id,department,age,sex,procedure_text,anesthesia_text,positioning_text,"
    "planned_induction_min,planned_procedure_min\n"
)


def test_parse_case_attributes_roundtrip():
    row = 'W1,urology,63,f,"Prostatektomie, lap.",ITN,rueckenlage,30,120\n'
    attrs, errors = parse_case_attributes((CASES_CSV_HEADER + row).encode())
    assert errors == []
    a = attrs[0]
    assert a.department == "urology"
    assert a.age == 63
    assert a.sex == "f"
    assert a.procedure_text == "Prostatektomie, lap."
    assert a.planned_induction_min == 30.0
    assert a.planned_procedure_min == 120.0


def test_case_attribute_missing_fields_default():
    attrs, _ = parse_case_attributes((CASES_CSV_HEADER + "W1,,,,,,,,\n").encode())
    a = attrs[0]
    assert a.department == "unknown"
    assert a.age is None
    assert a.sex == "other"
    assert a.planned_procedure_min is None


@pytest.mark.parametrize("bad", ["W1,x,270,f,,,,,", "W1,x,-3,f,,,,,", "W1,x,63,f,,,,-5,"])
def test_case_attribute_validation(bad):
    with pytest.raises(ParseError):
        parse_case_attributes((CASES_CSV_HEADER + bad + "\n").encode())
