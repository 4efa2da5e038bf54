"""Reading and writing interaction logs.

Canonical interaction CSV (UTF-8, comma separated, RFC-4180 quoting)::

    student_id,timestamp_ms,item_id,skill_ids,correct,attempts,exec_time_ms,memory_kb,difficulty,channel

``skill_ids`` is semicolon-joined.  Empty numeric fields mean "missing": the
feature is 0 and its presence flag is False.  ``channel`` may be omitted on
input (defaults to ``submission``).  The fifth feature, the gap in seconds
since the student's previous event, is derived on read and never stored.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import TextIO

import numpy as np

from .bkt import BktParams, MasteryTrajectory
from .errors import IngestError, ValidationError
from .signals import FEATURE_NAMES, Channel, SignalEvent

CANONICAL_COLUMNS = (
    "student_id",
    "timestamp_ms",
    "item_id",
    "skill_ids",
    "correct",
    "attempts",
    "exec_time_ms",
    "memory_kb",
    "difficulty",
    "channel",
)
_STORED_FEATURES = ("attempts", "exec_time_ms", "memory_kb", "difficulty")

OJ_REQUIRED = ("submission_id", "student_id", "problem_id", "verdict", "timestamp")
OJ_OPTIONAL = ("exec_time_ms", "memory_kb", "attempts", "difficulty", "skills")

DIFFICULTY_LABELS = {"easy": 1.0, "medium": 2.0, "hard": 3.0}


class Verdict(str, Enum):
    AC = "AC"
    WA = "WA"
    RTE = "RTE"
    CE = "CE"
    TLE = "TLE"
    MLE = "MLE"
    OTHER = "other"


_VERDICT_ALIASES = {
    "AC": Verdict.AC,
    "ACCEPTED": Verdict.AC,
    "WA": Verdict.WA,
    "WRONG ANSWER": Verdict.WA,
    "RTE": Verdict.RTE,
    "RE": Verdict.RTE,
    "RUNTIME ERROR": Verdict.RTE,
    "CE": Verdict.CE,
    "COMPILATION ERROR": Verdict.CE,
    "TLE": Verdict.TLE,
    "TIME LIMIT EXCEEDED": Verdict.TLE,
    "MLE": Verdict.MLE,
    "MEMORY LIMIT EXCEEDED": Verdict.MLE,
    # remaining DMOJ status codes
    "OLE": Verdict.OTHER,
    "IR": Verdict.OTHER,
    "IE": Verdict.OTHER,
    "SC": Verdict.OTHER,
    "AB": Verdict.OTHER,
    "OTHER": Verdict.OTHER,
}


def parse_verdict(text: str) -> Verdict:
    try:
        return _VERDICT_ALIASES[text.strip().upper()]
    except KeyError:
        raise ValidationError(f"unknown verdict {text!r}") from None


def parse_difficulty(text: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    label = DIFFICULTY_LABELS.get(text.lower())
    if label is not None:
        return label
    return _parse_float(text, "difficulty")


def _parse_float(text: str, name: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"{name} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"{name} must be finite, got {text!r}")
    return v


def parse_timestamp(text: str) -> int:
    """Milliseconds since epoch from an integer string or an ISO-8601 datetime (naive = UTC)."""
    text = text.strip()
    if text.lstrip("-").isdigit():
        ts = int(text)
    else:
        try:
            dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
        except ValueError:
            raise ValidationError(f"malformed timestamp {text!r}") from None
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        ts = round(dt.timestamp() * 1000)
    if ts <= 0:
        raise ValidationError(f"timestamp must be positive, got {text!r}")
    return ts


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _split_skills(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(";") if s.strip())


@dataclass
class IngestReport:
    rows_in: int = 0
    rows_out: int = 0
    rows_rejected: int = 0
    errors: list[dict] = field(default_factory=list)
    steps: dict[str, int] = field(default_factory=dict)

    def reject(self, line: int, message: str, max_errors: int | None) -> None:
        self.rows_rejected += 1
        self.errors.append({"line": line, "message": message})
        if max_errors is not None and len(self.errors) > max_errors:
            raise IngestError(f"{len(self.errors)} row errors exceed max_errors={max_errors}", self.errors)

    def to_dict(self) -> dict:
        d = {"rows_in": self.rows_in, "rows_out": self.rows_out, "rows_rejected": self.rows_rejected}
        if self.steps:
            d["steps"] = dict(self.steps)
        d["errors"] = list(self.errors)
        return d


def _with_gaps(events: Iterable[SignalEvent]) -> list[SignalEvent]:
    """Sort by (student, timestamp), stable, and fill in the gap feature."""
    ordered = sorted(events, key=lambda e: (e.student_id, e.timestamp))
    out = []
    prev: dict[str, int] = {}
    gi = FEATURE_NAMES.index("gap_s")
    for ev in ordered:
        feats = list(ev.features)
        present = list(ev.present)
        if ev.student_id in prev:
            feats[gi] = (ev.timestamp - prev[ev.student_id]) / 1000.0
            present[gi] = True
        else:
            feats[gi] = 0.0
            present[gi] = False
        prev[ev.student_id] = ev.timestamp
        out.append(
            SignalEvent(ev.student_id, ev.timestamp, ev.item_id, ev.skill_ids, ev.correct, tuple(feats), tuple(present), ev.channel)
        )
    return out


def _features(values: Mapping[str, float | None]) -> tuple[tuple[float, ...], tuple[bool, ...]]:
    feats, present = [], []
    for name in FEATURE_NAMES:
        v = values.get(name)
        feats.append(0.0 if v is None else float(v))
        present.append(v is not None)
    return tuple(feats), tuple(present)


# ------------------------------------------------------------ canonical


def read_canonical(stream: TextIO, max_errors: int | None = None) -> tuple[list[SignalEvent], IngestReport]:
    reader = csv.reader(stream)
    report = IngestReport()
    header = next(reader, None)
    if header is None:
        raise ValidationError("missing header")
    header = [h.strip() for h in header]
    if tuple(header) not in (CANONICAL_COLUMNS, CANONICAL_COLUMNS[:-1]):
        raise ValidationError(f"header does not match canonical schema: {header}")
    events = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        report.rows_in += 1
        try:
            if len(row) != len(header):
                raise ValidationError(f"expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, row))
            values: dict[str, float | None] = {}
            for name in _STORED_FEATURES:
                text = rec[name].strip()
                if name == "difficulty":
                    values[name] = parse_difficulty(text)
                else:
                    values[name] = _parse_float(text, name) if text else None
            correct = rec["correct"].strip()
            if correct not in ("0", "1"):
                raise ValidationError(f"correct must be 0 or 1, got {correct!r}")
            ts = rec["timestamp_ms"].strip()
            if not ts.isdigit():
                raise ValidationError(f"malformed timestamp {ts!r}")
            try:
                channel = Channel(rec.get("channel", "submission").strip() or "submission")
            except ValueError:
                raise ValidationError(f"unknown channel {rec.get('channel')!r}") from None
            feats, present = _features(values)
            events.append(
                SignalEvent(
                    student_id=rec["student_id"],
                    timestamp=int(ts),
                    item_id=rec["item_id"],
                    skill_ids=_split_skills(rec["skill_ids"]),
                    correct=int(correct),
                    features=feats,
                    present=present,
                    channel=channel,
                )
            )
        except ValidationError as exc:
            report.reject(line, str(exc), max_errors)
    events = _with_gaps(events)
    report.rows_out = len(events)
    return events, report


def write_canonical(events: Iterable[SignalEvent], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CANONICAL_COLUMNS)
    for ev in events:
        row = [ev.student_id, str(ev.timestamp), ev.item_id, ";".join(ev.skill_ids), str(ev.correct)]
        for name in _STORED_FEATURES:
            i = FEATURE_NAMES.index(name)
            row.append(_fmt(ev.features[i]) if ev.present[i] else "")
        row.append(ev.channel.value)
        writer.writerow(row)


def load_events(path: str) -> list[SignalEvent]:
    with open(path, newline="", encoding="utf-8") as fh:
        events, report = read_canonical(fh, max_errors=0)
    return events


def save_events(events: Iterable[SignalEvent], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_canonical(events, fh)


# ------------------------------------------------------------ online judge


@dataclass(frozen=True)
class OjSubmission:
    submission_id: str
    student_id: str
    problem_id: str
    verdict: Verdict
    exec_time_ms: float | None
    memory_kb: float | None
    timestamp: int
    attempts: int
    difficulty: float | None
    skills: tuple[str, ...]

    def __post_init__(self):
        if self.attempts < 1:
            raise ValidationError(f"attempts must be >= 1, got {self.attempts}")


def ingest_oj(stream: TextIO, max_errors: int | None = 100) -> tuple[list[SignalEvent], IngestReport]:
    """Map online-judge submission exports onto canonical events.

    ``correct`` is 1 exactly for Accepted.  When the ``attempts`` column is
    absent or empty it is counted per (student, problem) as submissions since
    the last Accepted, this one included.  Missing ``skills`` fall back to the
    problem id.
    """
    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        raise ValidationError("missing header")
    fields = [f.strip() for f in reader.fieldnames]
    missing = [c for c in OJ_REQUIRED if c not in fields]
    if missing:
        raise ValidationError(f"online-judge header lacks required columns {missing}")
    reader.fieldnames = fields
    report = IngestReport()
    parsed: list[tuple[int, OjSubmission, bool]] = []
    for line, rec in enumerate(reader, start=2):
        report.rows_in += 1
        try:
            rec = {k: (v or "") for k, v in rec.items() if k is not None}
            attempts_text = rec.get("attempts", "").strip()
            sub = OjSubmission(
                submission_id=rec["submission_id"].strip(),
                student_id=rec["student_id"].strip(),
                problem_id=rec["problem_id"].strip(),
                verdict=parse_verdict(rec["verdict"]),
                exec_time_ms=_parse_float(rec["exec_time_ms"], "exec_time_ms") if rec.get("exec_time_ms", "").strip() else None,
                memory_kb=_parse_float(rec["memory_kb"], "memory_kb") if rec.get("memory_kb", "").strip() else None,
                timestamp=parse_timestamp(rec["timestamp"]),
                attempts=int(_parse_float(attempts_text, "attempts")) if attempts_text else 1,
                difficulty=parse_difficulty(rec.get("difficulty", "")),
                skills=_split_skills(rec.get("skills", "")) or (rec["problem_id"].strip(),),
            )
            if not sub.student_id or not sub.problem_id:
                raise ValidationError("student_id and problem_id must be nonempty")
            parsed.append((line, sub, bool(attempts_text)))
        except ValidationError as exc:
            report.reject(line, str(exc), max_errors)

    parsed.sort(key=lambda p: (p[1].student_id, p[1].timestamp, p[0]))
    running: Counter = Counter()
    events = []
    for _, sub, has_attempts in parsed:
        key = (sub.student_id, sub.problem_id)
        running[key] += 1
        attempts = sub.attempts if has_attempts else running[key]
        if sub.verdict == Verdict.AC:
            running[key] = 0
        feats, present = _features(
            {
                "attempts": float(attempts),
                "exec_time_ms": sub.exec_time_ms,
                "memory_kb": sub.memory_kb,
                "difficulty": sub.difficulty,
            }
        )
        events.append(
            SignalEvent(sub.student_id, sub.timestamp, sub.problem_id, sub.skills, int(sub.verdict == Verdict.AC), feats, present)
        )
    events = _with_gaps(events)
    report.rows_out = len(events)
    return events, report


# ------------------------------------------------------------ EdNet KT1


@dataclass
class QMatrix:
    items: list[str]
    skills: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int8)
        if self.matrix.shape != (len(self.items), len(self.skills)):
            raise ValidationError("q-matrix shape does not match item/skill lists")
        if not np.isin(self.matrix, (0, 1)).all():
            raise ValidationError("q-matrix entries must be 0 or 1")
        if self.items and not self.matrix.any(axis=1).all():
            raise ValidationError("every item needs at least one skill")

    def row(self, item: str) -> np.ndarray:
        return self.matrix[self.items.index(item)]

    def skills_of(self, item: str) -> tuple[str, ...]:
        return tuple(s for s, v in zip(self.skills, self.row(item)) if v)

    def write_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["item_id", *self.skills])
        for item, row in zip(self.items, self.matrix):
            writer.writerow([item, *map(int, row)])


def _skill_key(s: str):
    return (0, int(s), s) if s.lstrip("-").isdigit() else (1, 0, s)


def build_qmatrix(item_tags: Mapping[str, Sequence[str]], skills: Sequence[str] | None = None) -> QMatrix:
    items = sorted(item_tags, key=_skill_key)
    universe = sorted({s for tags in item_tags.values() for s in tags} | set(skills or ()), key=_skill_key)
    col = {s: j for j, s in enumerate(universe)}
    mat = np.zeros((len(items), len(universe)), dtype=np.int8)
    for i, item in enumerate(items):
        for s in item_tags[item]:
            mat[i, col[s]] = 1
    return QMatrix(items, universe, mat)


_KT1_ALIASES = {
    "user_id": "student_id",
    "question_id": "item_id",
}


def _read_rows(stream: TextIO) -> tuple[list[str], list[tuple[str, ...]]]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        raise ValidationError("missing header")
    header = [_KT1_ALIASES.get(h.strip(), h.strip()) for h in header]
    return header, [tuple(r) for r in reader if r]


def _undefined(tags: tuple[str, ...]) -> bool:
    return not tags or all(t == "-1" for t in tags)


def preprocess_kt1(interactions: TextIO, metadata: TextIO, min_interactions: int = 10) -> tuple[list[SignalEvent], QMatrix, IngestReport]:
    """EdNet-KT1 style cleaning, in order:

    1. drop exact duplicate rows, then rows with a missing user answer;
    2. drop items whose skill tags are undefined (or absent from metadata);
    3. build the binary q-matrix over the surviving items;
    4. drop students with fewer than ``min_interactions`` remaining rows.
    """
    header, rows = _read_rows(interactions)
    need = ("student_id", "timestamp", "item_id", "user_answer")
    if any(c not in header for c in need):
        raise ValidationError(f"interaction header must contain {need}, got {header}")
    meta_header, meta_rows = _read_rows(metadata)
    if any(c not in meta_header for c in ("item_id", "correct_answer", "tags")):
        raise ValidationError("metadata header must contain item_id, correct_answer, tags")
    meta = {}
    for r in meta_rows:
        rec = dict(zip(meta_header, r))
        meta[rec["item_id"]] = (rec["correct_answer"].strip(), _split_skills(rec["tags"]))

    report = IngestReport(rows_in=len(rows))
    idx = {c: header.index(c) for c in header}

    seen = set()
    step1 = []
    for r in rows:
        if r in seen:
            continue
        seen.add(r)
        step1.append(r)
    report.steps["removed_duplicates"] = len(rows) - len(step1)

    answered = [r for r in step1 if r[idx["user_answer"]].strip()]
    report.steps["removed_missing_answer"] = len(step1) - len(answered)

    tagged = [r for r in answered if r[idx["item_id"]] in meta and not _undefined(meta[r[idx["item_id"]]][1])]
    report.steps["removed_undefined_tags"] = len(answered) - len(tagged)

    qmatrix = build_qmatrix({r[idx["item_id"]]: meta[r[idx["item_id"]]][1] for r in tagged})
    report.steps["qmatrix_items"] = len(qmatrix.items)
    report.steps["qmatrix_skills"] = len(qmatrix.skills)

    counts = Counter(r[idx["student_id"]] for r in tagged)
    kept = [r for r in tagged if counts[r[idx["student_id"]]] >= min_interactions]
    report.steps["removed_sparse_students"] = len(tagged) - len(kept)
    report.steps["students_removed"] = sum(1 for c in counts.values() if c < min_interactions)

    events = []
    for line, r in enumerate(kept):
        item = r[idx["item_id"]]
        correct_answer, _ = meta[item]
        elapsed = r[idx["elapsed_time"]].strip() if "elapsed_time" in idx and idx["elapsed_time"] < len(r) else ""
        feats, present = _features(
            {"attempts": 1.0, "exec_time_ms": _parse_float(elapsed, "elapsed_time") if elapsed else None}
        )
        events.append(
            SignalEvent(
                student_id=r[idx["student_id"]],
                timestamp=parse_timestamp(r[idx["timestamp"]]),
                item_id=item,
                skill_ids=qmatrix.skills_of(item),
                correct=int(r[idx["user_answer"]].strip() == correct_answer),
                features=feats,
                present=present,
            )
        )
    events = _with_gaps(events)
    report.rows_out = len(events)
    return events, qmatrix, report


# ------------------------------------------------------------ synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    params: Mapping[str, BktParams]
    students: int
    steps: int
    seed: int = 0
    start_ms: int = 1_700_000_000_000
    interval_ms: int = 60_000

    def __post_init__(self):
        if self.students < 1 or self.steps < 1:
            raise ValidationError("need at least one student and one step")
        if not self.params:
            raise ValidationError("need parameters for at least one skill")


@dataclass(frozen=True)
class HiddenState:
    student_id: str
    skill_id: str
    step: int
    mastered: int


def generate_synthetic(config: SyntheticConfig) -> tuple[list[SignalEvent], list[HiddenState]]:
    """Simulate the two-state process per student and skill.

    Mastery starts as Bernoulli(l0); each step emits a correct answer with
    probability ``1 - slip`` if mastered and ``guess`` otherwise, then an
    unmastered learner transitions with probability ``learn``.  Skills are
    interleaved round-robin in sorted order.  The hidden log records the
    mastery state in force at each observation.
    """
    rng = np.random.default_rng(config.seed)
    skills = sorted(config.params)
    n, steps = config.students, config.steps
    outcomes = {}
    hidden = {}
    for skill in skills:
        p = config.params[skill]
        state = rng.random(n) < p.l0
        ys = np.empty((n, steps), dtype=np.int8)
        hs = np.empty((n, steps), dtype=np.int8)
        for t in range(steps):
            u = rng.random(n)
            ys[:, t] = np.where(state, u < 1.0 - p.slip, u < p.guess)
            hs[:, t] = state
            state = state | (rng.random(n) < p.learn)
        outcomes[skill] = ys
        hidden[skill] = hs
    exec_ms = np.round(rng.lognormal(mean=4.0, sigma=0.5, size=(n, steps, len(skills))), 1)

    width = len(str(n - 1))
    events, log = [], []
    for i in range(n):
        sid = f"u{i:0{width}d}"
        for t in range(steps):
            for k, skill in enumerate(skills):
                ts = config.start_ms + (t * len(skills) + k) * config.interval_ms
                feats, present = _features({"attempts": 1.0, "exec_time_ms": float(exec_ms[i, t, k])})
                events.append(SignalEvent(sid, ts, f"{skill}-q{t}", (skill,), int(outcomes[skill][i, t]), feats, present))
                log.append(HiddenState(sid, skill, t, int(hidden[skill][i, t])))
    return _with_gaps(events), log


def write_hidden(log: Iterable[HiddenState], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["student_id", "skill_id", "step", "mastered"])
    for h in log:
        writer.writerow([h.student_id, h.skill_id, h.step, h.mastered])


def write_trajectory(traj: MasteryTrajectory, stream: TextIO, student_id: str = "") -> None:
    """One row per (event, skill) pair."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["student_id", "timestamp_ms", "skill_id", "prior", "posterior", "next_mastery", "predicted_correct", "observed"])
    for r in traj.records:
        writer.writerow([student_id, r.timestamp, r.skill_id, repr(r.prior), repr(r.posterior), repr(r.next_mastery), repr(r.predicted_correct), r.observed])


def events_by_student(events: Iterable[SignalEvent]) -> dict[str, list[SignalEvent]]:
    out: dict[str, list[SignalEvent]] = defaultdict(list)
    for ev in events:
        out[ev.student_id].append(ev)
    for evs in out.values():
        evs.sort(key=lambda e: e.timestamp)
    return dict(sorted(out.items()))


def dumps_json(obj) -> str:
    """Deterministic JSON used for every report written to disk."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def to_csv_string(writer_fn, *args) -> str:
    buf = io.StringIO()
    writer_fn(*args, buf)
    return buf.getvalue()
