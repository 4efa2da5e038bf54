"""Bayesian Knowledge Tracing.

Per skill the learner is either unlearned or learned.  Each observation is
handled in three steps:

    predicted  = p * (1 - slip) + (1 - p) * guess
    posterior  = Bayes update of p given the observed outcome
    next p     = posterior + (1 - posterior) * learn

Parameters are fitted by EM on the equivalent two-state hidden Markov model
(unlearned -> learned with probability ``learn``, no forgetting).
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    InsufficientDataError,
    OrderingError,
    ParameterDomainError,
    UnknownSkillError,
    ValidationError,
)
from .signals import SignalEvent

PARAM_NAMES = ("l0", "learn", "slip", "guess")
EPS = 1e-3

# slip/guess capped below 0.5 to rule out the label-flipped mirror solution
FIT_BOUNDS = {
    "l0": (EPS, 1.0 - EPS),
    "learn": (EPS, 1.0 - EPS),
    "slip": (EPS, 0.5 - EPS),
    "guess": (EPS, 0.5 - EPS),
}


def _check_probability(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return value


@dataclass(frozen=True)
class BktParams:
    """Per-skill parameters.

    The constructor only requires probabilities in [0, 1] so that exact
    boundary models can be expressed; fitting and policy updates keep
    parameters inside ``FIT_BOUNDS``.
    """

    l0: float
    learn: float
    slip: float
    guess: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, _check_probability(name, getattr(self, name)))

    @property
    def identifiable(self) -> bool:
        return self.slip + self.guess < 1.0

    def in_box(self, bounds: Mapping[str, tuple[float, float]] = FIT_BOUNDS) -> bool:
        return all(bounds[n][0] <= getattr(self, n) <= bounds[n][1] for n in PARAM_NAMES)

    def as_array(self) -> np.ndarray:
        return np.array([self.l0, self.learn, self.slip, self.guess])

    @classmethod
    def from_array(cls, values) -> "BktParams":
        return cls(*(float(v) for v in values))

    def to_dict(self) -> dict:
        return asdict(self)


def box_arrays(bounds: Mapping[str, tuple[float, float]] = FIT_BOUNDS) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([bounds[n][0] for n in PARAM_NAMES])
    hi = np.array([bounds[n][1] for n in PARAM_NAMES])
    return lo, hi


def dump_params(params: Mapping[str, BktParams]) -> str:
    """JSON document keyed by skill id."""
    doc = {skill: params[skill].to_dict() for skill in sorted(params)}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_params(text: str) -> dict[str, BktParams]:
    doc = json.loads(text)
    if "params" in doc and isinstance(doc["params"], dict):
        doc = doc["params"]
    out = {}
    for skill, fields in doc.items():
        unknown = set(fields) - set(PARAM_NAMES)
        if unknown:
            raise ValidationError(f"unknown parameter fields for skill {skill!r}: {sorted(unknown)}")
        out[str(skill)] = BktParams(**{n: fields[n] for n in PARAM_NAMES})
    return out


@dataclass
class MasteryState:
    skill_id: str
    p_mastery: float
    observation_count: int = 0
    # last conditioned value P(L | obs); None before the first observation
    posterior: float | None = None

    def __post_init__(self):
        _check_probability("p_mastery", self.p_mastery)


@dataclass(frozen=True)
class TrajectoryRecord:
    timestamp: int
    skill_id: str
    prior: float
    posterior: float
    next_mastery: float
    predicted_correct: float
    observed: int


@dataclass
class MasteryTrajectory:
    records: list[TrajectoryRecord] = field(default_factory=list)
    # one (timestamp, predicted, observed) per event with skills
    event_predictions: list[tuple[int, float, int]] = field(default_factory=list)
    final: dict[str, MasteryState] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def log_likelihood(self) -> float:
        total = 0.0
        for _, p, y in self.event_predictions:
            total += math.log(p if y else 1.0 - p)
        return total


def posterior_update(prior: float, params: BktParams, observed: int) -> float:
    """P(L | obs) from P(L) after one correct (1) or incorrect (0) outcome."""
    prior = _check_probability("prior", prior)
    if observed:
        num = prior * (1.0 - params.slip)
        den = num + (1.0 - prior) * params.guess
    else:
        num = prior * params.slip
        den = num + (1.0 - prior) * (1.0 - params.guess)
    if den <= 0.0:
        raise ParameterDomainError(
            f"observation {observed} has zero probability under prior={prior}, "
            f"slip={params.slip}, guess={params.guess}"
        )
    return min(1.0, max(0.0, num / den))


def learn_transition(posterior: float, params: BktParams) -> float:
    posterior = _check_probability("posterior", posterior)
    return min(1.0, posterior + (1.0 - posterior) * params.learn)


def predict_correct(p_mastery: float, params: BktParams) -> float:
    p = _check_probability("p_mastery", p_mastery)
    return p * (1.0 - params.slip) + (1.0 - p) * params.guess


def trace_student(
    events: Sequence[SignalEvent],
    params: Mapping[str, BktParams],
    initial: Mapping[str, MasteryState] | None = None,
) -> MasteryTrajectory:
    """Replay one student's events through the per-skill BKT updates.

    Each tagged skill is updated with the shared outcome.  The event-level
    prediction is the mean of the per-skill predictions.  Events without
    skills (participation, queries) are skipped.
    """
    traj = MasteryTrajectory()
    states: dict[str, MasteryState] = {}
    if initial:
        states = {k: MasteryState(v.skill_id, v.p_mastery, v.observation_count, v.posterior) for k, v in initial.items()}
    last_ts = None
    student = None
    for ev in events:
        if student is None:
            student = ev.student_id
        elif ev.student_id != student:
            raise ValidationError(f"trace_student got events of {student!r} and {ev.student_id!r}")
        if last_ts is not None and ev.timestamp < last_ts:
            raise OrderingError(f"event at {ev.timestamp} precedes previous event at {last_ts}")
        last_ts = ev.timestamp
        if not ev.skill_ids:
            continue
        preds = []
        for skill in ev.skill_ids:
            if skill not in params:
                raise UnknownSkillError(f"no parameters for skill {skill!r}")
            p = params[skill]
            st = states.get(skill)
            if st is None:
                st = states[skill] = MasteryState(skill, p.l0)
            prior = st.p_mastery
            pred = predict_correct(prior, p)
            post = posterior_update(prior, p, ev.correct)
            nxt = learn_transition(post, p)
            st.p_mastery, st.posterior = nxt, post
            st.observation_count += 1
            preds.append(pred)
            traj.records.append(TrajectoryRecord(ev.timestamp, skill, prior, post, nxt, pred, ev.correct))
        traj.event_predictions.append((ev.timestamp, sum(preds) / len(preds), ev.correct))
    traj.final = states
    return traj


# ---------------------------------------------------------------- fitting


def _pad(sequences: Iterable[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    seqs = [np.asarray(s, dtype=int) for s in sequences]
    seqs = [s for s in seqs if s.size]
    if not seqs:
        raise InsufficientDataError("need at least one non-empty sequence")
    for s in seqs:
        if not np.isin(s, (0, 1)).all():
            raise ValidationError("outcomes must be 0 or 1")
    length = max(s.size for s in seqs)
    y = np.zeros((len(seqs), length), dtype=int)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        y[i, : s.size] = s
        mask[i, : s.size] = True
    return y, mask


def _emissions(y: np.ndarray, mask: np.ndarray, p: BktParams) -> np.ndarray:
    e = np.empty(y.shape + (2,))
    e[..., 0] = np.where(y == 1, p.guess, 1.0 - p.guess)
    e[..., 1] = np.where(y == 1, 1.0 - p.slip, p.slip)
    e[~mask] = 1.0
    return e


def _forward(y, mask, p: BktParams):
    n, length = y.shape
    trans = np.array([[1.0 - p.learn, p.learn], [0.0, 1.0]])
    e = _emissions(y, mask, p)
    alpha = np.empty((n, length, 2))
    scale = np.ones((n, length))
    a = np.array([1.0 - p.l0, p.l0]) * e[:, 0]
    for t in range(length):
        if t:
            a = (a @ trans) * e[:, t]
        c = a.sum(axis=1)
        scale[:, t] = np.where(mask[:, t], c, 1.0)
        if np.any(c[mask[:, t]] <= 0.0):
            raise ParameterDomainError("observed sequence has zero probability under these parameters")
        a = a / np.where(c > 0, c, 1.0)[:, None]
        alpha[:, t] = a
    return alpha, scale, e, trans


def forward_log_likelihood(sequences: Iterable[Sequence[int]], params: BktParams) -> float:
    """Total log-likelihood of binary outcome sequences via the scaled forward algorithm."""
    y, mask = _pad(sequences)
    _, scale, _, _ = _forward(y, mask, params)
    return float(np.log(scale[mask]).sum())


def _em_step(y, mask, p: BktParams, bounds) -> tuple[BktParams, float]:
    alpha, scale, e, trans = _forward(y, mask, p)
    n, length = y.shape
    ll = float(np.log(scale[mask]).sum())

    beta = np.ones((n, length, 2))
    xi01 = np.zeros((n, length))
    for t in range(length - 2, -1, -1):
        w = e[:, t + 1] * beta[:, t + 1] / scale[:, t + 1][:, None]
        beta[:, t] = w @ trans.T
        xi01[:, t] = alpha[:, t, 0] * trans[0, 1] * w[:, 1]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)

    has_next = np.zeros_like(mask)
    has_next[:, :-1] = mask[:, 1:]
    g0, g1 = gamma[..., 0], gamma[..., 1]
    correct = (y == 1) & mask
    wrong = (y == 0) & mask

    def ratio(num, den, old):
        return num / den if den > 0 else old

    new = {
        "l0": float(g1[:, 0].mean()),
        "learn": ratio(xi01[has_next].sum(), g0[has_next].sum(), p.learn),
        "slip": ratio(g1[wrong].sum(), g1[mask].sum(), p.slip),
        "guess": ratio(g0[correct].sum(), g0[mask].sum(), p.guess),
    }
    # each M-step term is a concave Bernoulli likelihood, so clipping gives the constrained maximiser
    clipped = {k: min(max(v, bounds[k][0]), bounds[k][1]) for k, v in new.items()}
    return BktParams(**clipped), ll


@dataclass
class FitResult:
    params: BktParams
    log_likelihood: float
    history: list[float]
    iterations: int
    restart: int
    n_sequences: int
    n_observations: int


def _initial_guesses(rng: np.random.Generator, restarts: int, bounds) -> list[BktParams]:
    guesses = []
    for _ in range(restarts):
        l0 = rng.uniform(0.05, 0.95)
        learn = rng.uniform(0.05, 0.5)
        slip = rng.uniform(0.05, 0.3)
        guess = rng.uniform(0.05, 0.3)
        vals = {"l0": l0, "learn": learn, "slip": slip, "guess": guess}
        guesses.append(BktParams(**{k: min(max(v, bounds[k][0]), bounds[k][1]) for k, v in vals.items()}))
    return guesses


def fit_parameters(
    sequences: Iterable[Sequence[int]],
    *,
    restarts: int = 5,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
    bounds: Mapping[str, tuple[float, float]] = FIT_BOUNDS,
) -> FitResult:
    """Maximum-likelihood BKT parameters for one skill by EM with random restarts.

    ``sequences`` holds one binary outcome sequence per student.  The best
    restart (earliest on ties) is returned together with its per-iteration
    log-likelihood history, which is nondecreasing.
    """
    y, mask = _pad(sequences)
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    best: FitResult | None = None
    for r, params in enumerate(_initial_guesses(rng, restarts, bounds)):
        history: list[float] = []
        for it in range(max_iter):
            new_params, ll = _em_step(y, mask, params, bounds)
            history.append(ll)
            if len(history) > 1 and history[-1] - history[-2] < tol:
                break
            params = new_params
        else:
            # loop ran out after an M-step; score the parameters actually returned
            history.append(forward_log_likelihood_padded(y, mask, params))
        result = FitResult(params, history[-1], history, len(history), r, int(y.shape[0]), int(mask.sum()))
        if best is None or result.log_likelihood > best.log_likelihood:
            best = result
    assert best is not None
    return best


def forward_log_likelihood_padded(y: np.ndarray, mask: np.ndarray, params: BktParams) -> float:
    _, scale, _, _ = _forward(y, mask, params)
    return float(np.log(scale[mask]).sum())


def skill_sequences(events: Iterable[SignalEvent]) -> dict[str, list[list[int]]]:
    """Group outcomes into per-skill, per-student sequences in event order."""
    by_skill: dict[str, dict[str, list[int]]] = {}
    for ev in events:
        for skill in ev.skill_ids:
            by_skill.setdefault(skill, {}).setdefault(ev.student_id, []).append(ev.correct)
    return {skill: [seqs[s] for s in sorted(seqs)] for skill, seqs in sorted(by_skill.items())}
