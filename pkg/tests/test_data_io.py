import io
import math

import numpy as np
import pytest

from learnloop.bkt import BktParams
from learnloop.data_io import (
    QMatrix,
    SyntheticConfig,
    Verdict,
    build_qmatrix,
    generate_synthetic,
    ingest_oj,
    parse_difficulty,
    parse_timestamp,
    parse_verdict,
    preprocess_kt1,
    read_canonical,
    write_canonical,
)
from learnloop.errors import IngestError, ValidationError
from learnloop.signals import FEATURE_NAMES

OJ_HEADER = "submission_id,student_id,problem_id,verdict,timestamp,exec_time_ms,memory_kb,difficulty\n"


def oj(rows, **kw):
    return ingest_oj(io.StringIO(OJ_HEADER + "".join(r + "\n" for r in rows)), **kw)


def feature(ev, name):
    i = FEATURE_NAMES.index(name)
    return ev.features[i] if ev.present[i] else None


# ------------------------------------------------------------ parsing helpers


def test_verdicts():
    assert parse_verdict("AC") is Verdict.AC
    assert parse_verdict(" accepted ") is Verdict.AC
    assert parse_verdict("WA") is Verdict.WA
    assert parse_verdict("IR") is Verdict.OTHER
    with pytest.raises(ValidationError):
        parse_verdict("MAYBE")


def test_difficulty_and_timestamps():
    assert [parse_difficulty(x) for x in ("easy", "Medium", "HARD", "4.5", "")] == [1.0, 2.0, 3.0, 4.5, None]
    assert parse_timestamp("1700000000000") == 1_700_000_000_000
    assert parse_timestamp("2024-01-01T00:00:00Z") == 1_704_067_200_000
    assert parse_timestamp("2024-01-01T00:00:00") == 1_704_067_200_000
    assert parse_timestamp("2024-01-01T01:00:00+01:00") == 1_704_067_200_000
    for bad in ("yesterday", "0", "-5"):
        with pytest.raises(ValidationError):
            parse_timestamp(bad)


# ------------------------------------------------------------ online judge


def test_oj_verdict_mapping_and_features():
    events, report = oj([
        "1,alice,p1,WA,2000,15,1024,easy",
        "2,alice,p1,AC,5000,12,1000,easy",
        "3,bob,p2,TLE,1000,,,",
    ])
    assert (report.rows_in, report.rows_out, report.rows_rejected) == (3, 3, 0)
    a1, a2, b1 = events
    assert (a1.correct, a2.correct, b1.correct) == (0, 1, 0)
    assert feature(a2, "attempts") == 2.0
    assert feature(a2, "gap_s") == 3.0
    assert feature(a1, "gap_s") is None
    assert feature(a1, "difficulty") == 1.0
    assert feature(b1, "exec_time_ms") is None and feature(b1, "memory_kb") is None
    assert a1.skill_ids == ("p1",)


def test_oj_attempts_reset_after_accept():
    events, _ = oj([
        "1,a,p,WA,1000,,,",
        "2,a,p,AC,2000,,,",
        "3,a,p,WA,3000,,,",
        "4,a,p,AC,4000,,,",
    ])
    assert [feature(e, "attempts") for e in events] == [1.0, 2.0, 1.0, 2.0]


def test_oj_sorts_per_student():
    events, _ = oj(["1,b,p,AC,3000,,,", "2,a,p,AC,2000,,,", "3,a,q,WA,1000,,,"])
    assert [(e.student_id, e.timestamp) for e in events] == [("a", 1000), ("a", 2000), ("b", 3000)]


def test_oj_row_errors_are_collected():
    events, report = oj(["1,a,p,AC,1000,,,", "2,a,p,XYZ,2000,,,", "3,a,p,WA,not-a-time,,,", "4,a,p,WA,4000,,,"])
    assert report.rows_in == report.rows_out + report.rows_rejected == 4
    assert [e["line"] for e in report.errors] == [3, 4]
    assert "verdict" in report.errors[0]["message"]


def test_oj_max_errors_aborts():
    with pytest.raises(IngestError) as info:
        oj(["1,a,p,BAD,1000,,,"], max_errors=0)
    assert info.value.errors[0]["line"] == 2


def test_oj_empty_and_bad_header():
    events, report = oj([])
    assert events == [] and report.rows_in == 0
    with pytest.raises(ValidationError):
        ingest_oj(io.StringIO("student_id,verdict\n"))


# ------------------------------------------------------------ canonical round trip


def test_canonical_round_trip_is_bit_exact():
    text = (
        "student_id,timestamp_ms,item_id,skill_ids,correct,attempts,exec_time_ms,memory_kb,difficulty,channel\n"
        "a,1000,q1,s1;s2,1,2,0.1,1024,3,submission\n"
        "a,2500,q2,s1,0,1,,,,submission\n"
        "a,2600,forum,,0,,,,,participation\n"
        '"b,x",1000,q1,s2,1,1,17.25,,1.5,submission\n'
    )
    events, report = read_canonical(io.StringIO(text))
    assert report.rows_rejected == 0
    out = io.StringIO()
    write_canonical(events, out)
    assert out.getvalue() == text
    assert feature(events[1], "gap_s") == 1.5


def test_canonical_rejects_bad_rows():
    text = (
        "student_id,timestamp_ms,item_id,skill_ids,correct,attempts,exec_time_ms,memory_kb,difficulty\n"
        "a,1000,q1,s1,2,1,,,\n"
        "a,xx,q1,s1,1,1,,,\n"
        "a,1000,q1,s1,1,1,,,\n"
    )
    events, report = read_canonical(io.StringIO(text))
    assert len(events) == 1 and report.rows_rejected == 2


# ------------------------------------------------------------ KT1


def kt1_files(extra_rows=(), student_rows=10):
    meta = "question_id,bundle_id,correct_answer,part,tags,deployed_at\n" \
        "q1,b,a,1,1;3,0\nq2,b,b,1,2,0\nq3,b,c,1,-1,0\n"
    rows = ["timestamp,solving_id,question_id,user_answer,elapsed_time"]
    for i in range(student_rows):
        rows.append(f"{1000 + i},{i},q{1 + i % 2},{'a' if i % 2 == 0 else 'c'},500")
    return rows, meta


def run_kt1(rows_by_user, meta, min_interactions=10):
    header = "user_id,timestamp,solving_id,question_id,user_answer,elapsed_time\n"
    body = "".join(f"{u},{r}\n" for u, rs in rows_by_user.items() for r in rs)
    return preprocess_kt1(io.StringIO(header + body), io.StringIO(meta), min_interactions)


def test_kt1_pipeline_counts():
    rows, meta = kt1_files()
    base = rows[1:]
    users = {
        "u1": base + [base[0], "2000,99,q1,,400", "2001,98,q3,a,400", "2002,97,q9,a,400"],
        "u2": base[:9],
    }
    events, qmatrix, report = run_kt1(users, meta)
    s = report.steps
    assert s["removed_duplicates"] == 1
    assert s["removed_missing_answer"] == 1
    assert s["removed_undefined_tags"] == 2
    assert s["removed_sparse_students"] == 9 and s["students_removed"] == 1
    removed = sum(v for k, v in s.items() if k.startswith("removed_"))
    assert removed == report.rows_in - report.rows_out
    assert {e.student_id for e in events} == {"u1"}
    assert len(events) == 10
    # correctness compares the answer with the key
    q1 = [e for e in events if e.item_id == "q1"]
    assert all(e.correct == 1 for e in q1) and q1[0].skill_ids == ("1", "3")
    assert qmatrix.skills == ["1", "2", "3"]
    np.testing.assert_array_equal(qmatrix.row("q1"), [1, 0, 1])


def test_kt1_student_with_exactly_ten_survives():
    rows, meta = kt1_files()
    events, _, report = run_kt1({"u": rows[1:11]}, meta)
    assert len(events) == 10 and report.steps["students_removed"] == 0


def test_qmatrix_examples():
    q = build_qmatrix({"i": ["1", "3"]}, skills=["1", "2", "3"])
    np.testing.assert_array_equal(q.row("i"), [1, 0, 1])
    out = io.StringIO()
    q.write_csv(out)
    assert out.getvalue() == "item_id,1,2,3\ni,1,0,1\n"
    with pytest.raises(ValidationError):
        QMatrix(["i"], ["1"], np.array([[0]]))


# ------------------------------------------------------------ synthetic


def test_synthetic_deterministic_chain():
    events, hidden = generate_synthetic(SyntheticConfig({"s": BktParams(0.0, 1.0, 0.0, 0.0)}, 5, 6))
    for sid in {e.student_id for e in events}:
        assert [e.correct for e in events if e.student_id == sid] == [0, 1, 1, 1, 1, 1]
    assert [h.mastered for h in hidden[:6]] == [0, 1, 1, 1, 1, 1]


def test_synthetic_guess_one_always_correct():
    events, _ = generate_synthetic(SyntheticConfig({"s": BktParams(0.2, 0.1, 0.0, 1.0)}, 20, 10, seed=3))
    assert all(e.correct == 1 for e in events)


def test_synthetic_first_step_marginal():
    p = BktParams(0.3, 0.2, 0.1, 0.2)
    n = 10_000
    events, _ = generate_synthetic(SyntheticConfig({"s": p}, n, 1, seed=17))
    rate = np.mean([e.correct for e in events])
    expected = p.l0 * (1 - p.slip) + (1 - p.l0) * p.guess
    assert expected == pytest.approx(0.41)
    assert abs(rate - expected) <= 3 * math.sqrt(expected * (1 - expected) / n)


def test_synthetic_emissions_match_hidden_state():
    p = BktParams(0.3, 0.2, 0.1, 0.2)
    events, hidden = generate_synthetic(SyntheticConfig({"a": p, "b": p}, 400, 20, seed=8))
    y = np.array([e.correct for e in events])
    h = np.array([x.mastered for x in sorted(hidden, key=lambda x: (x.student_id, x.step, x.skill_id))])
    for state, rate in ((1, 1 - p.slip), (0, p.guess)):
        sel = y[h == state]
        assert abs(sel.mean() - rate) <= 3 * math.sqrt(rate * (1 - rate) / sel.size)


def test_synthetic_is_reproducible_and_interleaved():
    cfg = SyntheticConfig({"b": BktParams(0.3, 0.2, 0.1, 0.2), "a": BktParams(0.5, 0.1, 0.2, 0.1)}, 3, 4, seed=1)
    first, _ = generate_synthetic(cfg)
    second, _ = generate_synthetic(cfg)
    assert first == second
    assert [e.skill_ids[0] for e in first[:4]] == ["a", "b", "a", "b"]
    assert all(x.timestamp < y.timestamp for x, y in zip(first, first[1:]) if x.student_id == y.student_id)
