"""Five reference learner profiles: 30 sessions, Theory (resource 0) and Application (resource 1).

Application unlocks only after enough cumulative theory.  Profiles differ in
volatility, weights and how strict that dependency is.  Two of them derive
their weights from mastery through engagement curves.
"""

from __future__ import annotations

import numpy as np

from .model import AllocationProblem, EngagementCurve, InfluenceModel, PrecedenceConstraint

N_SESSIONS = 30
THEORY, APPLICATION = 0, 1

_CURVES = (EngagementCurve(sharpness=2.0, peak=1.0, target=0.4), EngagementCurve(sharpness=2.0, peak=1.2, target=0.5))

# name, theta, weights or ("mastery", theory, application), scale, threshold
_PROFILES = (
    ("novice", 0.6, ("mastery", 0.2, 0.35), 1.0, 3.0),
    ("steady", 0.8, (1.0, 1.0), 0.5, 2.0),
    ("hands_on", 0.4, (0.7, 1.5), 2.0, 1.0),
    ("theory_focused", 0.5, (1.4, 0.9), 1.0, 4.0),
    ("volatile", 0.1, ("mastery", 0.6, 0.45), 1.5, 6.0),
)


def demo_profiles(kind: str = "linear", exponent: float = 1.0, objective: str = "sum_sentiment") -> list[AllocationProblem]:
    out = []
    for name, theta, weights, scale, threshold in _PROFILES:
        if weights[0] == "mastery":
            influence = InfluenceModel.from_mastery(kind, np.array(weights[1:]), _CURVES, exponent)
        else:
            influence = InfluenceModel(kind, np.array(weights, dtype=float), exponent)
        out.append(
            AllocationProblem(
                n=N_SESSIONS,
                m=2,
                budgets=np.ones(N_SESSIONS),
                theta=theta,
                s0=0.0,
                influence=influence,
                precedence=(PrecedenceConstraint(APPLICATION, THEORY, scale, threshold),),
                objective=objective,
                name=name,
            )
        )
    return out
