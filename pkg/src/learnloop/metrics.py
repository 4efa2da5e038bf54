"""Next-event correctness metrics and a chronological evaluation protocol."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .bkt import BktParams, fit_parameters, skill_sequences, trace_student
from .errors import UndefinedMetricError, ValidationError
from .signals import SignalEvent

CLIP = 1e-9
METRIC_KEYS = ("accuracy", "auc_roc", "pr_auc", "rmse", "nll")
TABLE_HEADERS = ("Model", "Accuracy ↑", "AUC-ROC ↑", "PR-AUC ↑", "RMSE ↓", "NLL ↓")


def _pairs(p, y) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float).reshape(-1)
    y = np.asarray(y).reshape(-1)
    if p.size == 0:
        raise UndefinedMetricError("prediction set is empty")
    if p.shape != y.shape:
        raise ValidationError("predictions and labels differ in length")
    if not np.all(np.isfinite(p)):
        raise ValidationError("predictions must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    return p, y.astype(int)


def accuracy(p, y, threshold: float = 0.5) -> float:
    """Fraction classified correctly; ``p >= threshold`` predicts 1."""
    p, y = _pairs(p, y)
    return float(np.mean((p >= threshold).astype(int) == y))


def auc_roc(p, y) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    p, y = _pairs(p, y)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(p)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(p, y) -> float:
    """Average precision: sum over distinct thresholds of recall gain times precision."""
    p, y = _pairs(p, y)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC needs at least one positive")
    order = np.argsort(-p, kind="mergesort")
    ps, ys = p[order], y[order]
    tp = np.cumsum(ys)
    # last index of each block of tied scores
    last = np.r_[np.nonzero(np.diff(ps))[0], ps.size - 1]
    tp = tp[last]
    precision = tp / (last + 1.0)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def rmse(p, y) -> float:
    p, y = _pairs(p, y)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def nll(p, y) -> float:
    p, y = _pairs(p, y)
    pc = np.clip(p, CLIP, 1.0 - CLIP)
    return float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1.0 - pc)))


@dataclass
class MetricReport:
    accuracy: float
    auc_roc: float | None
    pr_auc: float | None
    rmse: float
    nll: float
    n: int
    positives: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc_roc": self.auc_roc,
            "pr_auc": self.pr_auc,
            "rmse": self.rmse,
            "nll": self.nll,
            "n": self.n,
            "positives": self.positives,
        }


def report(p, y, threshold: float = 0.5) -> MetricReport:
    p, y = _pairs(p, y)

    def maybe(fn):
        try:
            return fn(p, y)
        except UndefinedMetricError:
            return None

    return MetricReport(
        accuracy=accuracy(p, y, threshold),
        auc_roc=maybe(auc_roc),
        pr_auc=maybe(pr_auc),
        rmse=rmse(p, y),
        nll=nll(p, y),
        n=int(y.size),
        positives=int(y.sum()),
    )


def render_table(rows: Mapping[str, MetricReport]) -> str:
    """Plain-text table: accuracy as a percentage, the rest to three decimals."""

    def cell(v, pct=False):
        if v is None:
            return "n/a"
        return f"{100 * v:.1f}%" if pct else f"{v:.3f}"

    body = [TABLE_HEADERS]
    for name, r in rows.items():
        body.append((name, cell(r.accuracy, True), cell(r.auc_roc), cell(r.pr_auc), cell(r.rmse), cell(r.nll)))
    widths = [max(len(row[i]) for row in body) for i in range(len(TABLE_HEADERS))]
    lines = []
    for k, row in enumerate(body):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ evaluation


def chronological_split(events: Sequence[SignalEvent], train_fraction: float = 0.8) -> tuple[list[SignalEvent], list[SignalEvent]]:
    """Per student, the first ``floor(train_fraction * count)`` events train, the rest test."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValidationError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    by_student: dict[str, list[SignalEvent]] = {}
    for ev in events:
        by_student.setdefault(ev.student_id, []).append(ev)
    train, test = [], []
    for sid in sorted(by_student):
        evs = sorted(by_student[sid], key=lambda e: e.timestamp)
        cut = math.floor(train_fraction * len(evs))
        train.extend(evs[:cut])
        test.extend(evs[cut:])
    return train, test


def fit_all(events: Iterable[SignalEvent], *, seed: int = 0, restarts: int = 5, max_iter: int = 200, tol: float = 1e-6) -> dict[str, BktParams]:
    """Fit every skill independently; seeds are derived from ``seed`` and the skill position."""
    seqs = skill_sequences(events)
    return {
        skill: fit_parameters(s, restarts=restarts, seed=seed + i, max_iter=max_iter, tol=tol).params
        for i, (skill, s) in enumerate(seqs.items())
    }


def predict_test(events: Sequence[SignalEvent], test: Sequence[SignalEvent], params: Mapping[str, BktParams]) -> tuple[np.ndarray, np.ndarray]:
    """Next-event predictions for the ``test`` events, tracing each student's full history."""
    test_keys = {(e.student_id, e.timestamp, e.item_id) for e in test}
    by_student: dict[str, list[SignalEvent]] = {}
    for ev in events:
        if ev.skill_ids:
            by_student.setdefault(ev.student_id, []).append(ev)
    preds, labels = [], []
    for sid in sorted(by_student):
        evs = sorted(by_student[sid], key=lambda e: e.timestamp)
        traj = trace_student(evs, params)
        for ev, (_, p, y) in zip(evs, traj.event_predictions):
            if (ev.student_id, ev.timestamp, ev.item_id) in test_keys:
                preds.append(p)
                labels.append(y)
    return np.array(preds), np.array(labels, dtype=int)


def evaluate_model(
    events: Sequence[SignalEvent],
    params: Mapping[str, BktParams] | None = None,
    *,
    train_fraction: float = 0.8,
    seed: int = 0,
    restarts: int = 5,
    threshold: float = 0.5,
) -> MetricReport:
    """Fit on the chronological train split (unless ``params`` is given) and score the test split.

    Skills with no training data fall back to parameters fitted on all
    training outcomes pooled together.
    """
    events = [e for e in events if e.skill_ids]
    train, test = chronological_split(events, train_fraction)
    if not test:
        raise ValidationError("test split is empty; lower train_fraction")
    if params is None:
        if not train:
            raise ValidationError("train split is empty; raise train_fraction")
        params = fit_all(train, seed=seed, restarts=restarts)
    params = dict(params)
    missing = {s for e in test for s in e.skill_ids} - set(params)
    if missing:
        pooled = [seq for seqs in skill_sequences(train).values() for seq in seqs]
        fallback = fit_parameters(pooled, restarts=restarts, seed=seed).params
        for s in missing:
            params[s] = fallback
    p, y = predict_test(events, test, params)
    return report(p, y, threshold)
