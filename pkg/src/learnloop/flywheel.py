"""Per-student closed loop: smooth signals, update mastery, recommend, refine the policy.

The policy is the per-skill BKT parameter vector ``(l0, learn, slip, guess)``.
After each event it takes one proximal gradient step on the cross-entropy
between the predicted and observed outcome: gradient step, L2 shrinkage,
projection onto the parameter box.
"""

from __future__ import annotations

import copy
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .allocation.model import EngagementCurve, engagement_weight
from .bkt import FIT_BOUNDS, BktParams, MasteryState, box_arrays, learn_transition, posterior_update, predict_correct
from .errors import OrderingError, UnknownSkillError, ValidationError
from .signals import SmootherState, SignalEvent, aggregate_window, smooth

CLIP = 1e-9
DEFAULT_BANDS = (0.4, 0.8)
DEFAULT_CURVE = EngagementCurve(sharpness=2.0, peak=1.0, target=0.5)


class Tier(str, Enum):
    FOUNDATIONAL = "foundational"
    PRACTICE = "practice"
    ADVANCED = "advanced"


def tier_for(mastery: float, bands: tuple[float, float] = DEFAULT_BANDS) -> Tier:
    low, high = bands
    if mastery >= high:
        return Tier.ADVANCED
    if mastery < low:
        return Tier.FOUNDATIONAL
    return Tier.PRACTICE


@dataclass(frozen=True)
class Recommendation:
    student_id: str
    tier: Tier
    skill_id: str
    target_skill: str
    mastery: float
    engagement: float

    def to_dict(self) -> dict:
        return {
            "student_id": self.student_id,
            "tier": self.tier.value,
            "skill_id": self.skill_id,
            "target_skill": self.target_skill,
            "mastery": self.mastery,
            "engagement": self.engagement,
        }


@dataclass
class FlywheelState:
    student_id: str
    policy: dict[str, BktParams]
    mastery: dict[str, MasteryState] = field(default_factory=dict)
    smoother: SmootherState = field(default_factory=SmootherState)
    features: np.ndarray | None = None
    counter: int = 0
    last_timestamp: int | None = None
    last_recommendation: str | None = None
    bands: tuple[float, float] = DEFAULT_BANDS
    curve: EngagementCurve = DEFAULT_CURVE
    eta: float = 0.05
    lam: float = 0.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValidationError(f"learning rate must be positive, got {self.eta}")
        if not self.lam >= 0:
            raise ValidationError(f"regularizer must be nonnegative, got {self.lam}")
        low, high = self.bands
        if not 0.0 <= low <= high <= 1.0:
            raise ValidationError(f"bands must satisfy 0 <= low <= high <= 1, got {self.bands}")
        for skill, p in self.policy.items():
            self.mastery.setdefault(skill, MasteryState(skill, p.l0))

    def to_dict(self) -> dict:
        return {
            "student_id": self.student_id,
            "policy": {s: self.policy[s].to_dict() for s in sorted(self.policy)},
            "mastery": {
                s: {"p_mastery": m.p_mastery, "observation_count": m.observation_count, "posterior": m.posterior}
                for s, m in sorted(self.mastery.items())
            },
            "smoother": self.smoother.to_dict(),
            "features": None if self.features is None else self.features.tolist(),
            "counter": self.counter,
            "last_timestamp": self.last_timestamp,
            "last_recommendation": self.last_recommendation,
            "bands": list(self.bands),
            "curve": {"sharpness": self.curve.sharpness, "peak": self.curve.peak, "target": self.curve.target},
            "eta": self.eta,
            "lam": self.lam,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlywheelState":
        return cls(
            student_id=d["student_id"],
            policy={s: BktParams(**v) for s, v in d["policy"].items()},
            mastery={s: MasteryState(s, v["p_mastery"], v["observation_count"], v["posterior"]) for s, v in d["mastery"].items()},
            smoother=SmootherState.from_dict(d["smoother"]),
            features=None if d["features"] is None else np.asarray(d["features"], dtype=float),
            counter=d["counter"],
            last_timestamp=d["last_timestamp"],
            last_recommendation=d["last_recommendation"],
            bands=tuple(d["bands"]),
            curve=EngagementCurve(**d["curve"]),
            eta=d["eta"],
            lam=d["lam"],
        )


def policy_loss(predicted: float, observed: int) -> float:
    """Binary cross-entropy with the prediction clipped to [1e-9, 1 - 1e-9]."""
    p = min(max(float(predicted), CLIP), 1.0 - CLIP)
    return -(observed * math.log(p) + (1 - observed) * math.log(1.0 - p))


def prediction_and_gradient(state: MasteryState, params: BktParams, observed: int) -> tuple[float, float, np.ndarray]:
    """Predicted correctness, its loss, and d loss / d (l0, learn, slip, guess).

    The current prior is ``l0`` before the first observation and
    ``posterior + (1 - posterior) * learn`` afterwards, so ``l0`` and ``learn``
    reach the loss through it.
    """
    if state.posterior is None:
        prior, dprior = params.l0, np.array([1.0, 0.0])
    else:
        prior = learn_transition(state.posterior, params)
        dprior = np.array([0.0, 1.0 - state.posterior])
    pred = predict_correct(prior, params)
    pc = min(max(pred, CLIP), 1.0 - CLIP)
    dloss = -observed / pc + (1 - observed) / (1.0 - pc)
    dpred = np.array([
        (1.0 - params.slip - params.guess) * dprior[0],
        (1.0 - params.slip - params.guess) * dprior[1],
        -prior,
        1.0 - prior,
    ])
    return pred, policy_loss(pred, observed), dloss * dpred


def proximal_update(policy, gradient, eta: float, lam: float, lower=None, upper=None) -> np.ndarray:
    """``clip((policy - eta * gradient) / (1 + eta * lam), lower, upper)``."""
    policy = np.asarray(policy, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if policy.shape != gradient.shape:
        raise ValidationError(f"policy shape {policy.shape} does not match gradient shape {gradient.shape}")
    out = (policy - eta * gradient) / (1.0 + eta * lam)
    if lower is not None or upper is not None:
        out = np.clip(out, lower, upper)
    return out


def recommend(state: FlywheelState, skill: str) -> Recommendation:
    if skill not in state.mastery:
        raise UnknownSkillError(f"skill {skill!r} is not tracked")
    mastery = state.mastery[skill].p_mastery
    # highest engagement weight wins; sorted order breaks ties
    target, best = None, -math.inf
    for s in sorted(state.mastery):
        w = engagement_weight(state.mastery[s].p_mastery, state.curve)
        if w > best:
            target, best = s, w
    return Recommendation(state.student_id, tier_for(mastery, state.bands), skill, target, mastery, best)


def step(state: FlywheelState, event: SignalEvent) -> tuple[FlywheelState, Recommendation]:
    """Process one event and return the new state (the input is left untouched)."""
    if event.student_id != state.student_id:
        raise ValidationError(f"event for {event.student_id!r} sent to state of {state.student_id!r}")
    if state.last_timestamp is not None and event.timestamp < state.last_timestamp:
        raise OrderingError(f"event at {event.timestamp} precedes last seen {state.last_timestamp}")
    for skill in event.skill_ids:
        if skill not in state.policy:
            raise UnknownSkillError(f"no policy parameters for skill {skill!r}")
    new = copy.deepcopy(state)

    smooth(new.smoother, event.feature_array)
    features = aggregate_window(new.smoother)

    gradients = {}
    for skill in event.skill_ids:
        params = new.policy[skill]
        st = new.mastery[skill]
        _, _, grad = prediction_and_gradient(st, params, event.correct)
        prior = st.p_mastery if st.posterior is not None else params.l0
        post = posterior_update(prior, params, event.correct)
        st.posterior = post
        st.p_mastery = learn_transition(post, params)
        st.observation_count += 1
        gradients[skill] = grad

    focus = event.skill_ids[0] if event.skill_ids else None
    if focus is None:
        focus = max(sorted(new.mastery), key=lambda s: engagement_weight(new.mastery[s].p_mastery, new.curve))
    rec = recommend(new, focus)

    lo, hi = box_arrays(FIT_BOUNDS)
    for skill, grad in gradients.items():
        theta = proximal_update(new.policy[skill].as_array(), grad, new.eta, new.lam, lo, hi)
        new.policy[skill] = BktParams.from_array(theta)
        st = new.mastery[skill]
        # keep p_mastery consistent with the refreshed learn rate
        st.p_mastery = learn_transition(st.posterior, new.policy[skill])

    new.features = features
    new.counter += 1
    new.last_timestamp = event.timestamp
    new.last_recommendation = rec.target_skill
    return new, rec


def initial_state(student_id: str, params: Mapping[str, BktParams], **kwargs) -> FlywheelState:
    return FlywheelState(student_id=student_id, policy=dict(params), **kwargs)
