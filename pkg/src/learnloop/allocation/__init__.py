"""Multi-session resource allocation maximising learner sentiment."""

from .model import (
    AllocationPlan,
    AllocationProblem,
    EngagementCurve,
    InfluenceModel,
    KKTReport,
    PrecedenceConstraint,
    engagement_weight,
    influence_values,
    objective_constant,
    objective_value,
    objective_weights,
    sentiment_trajectory,
)
from .solver import (
    GroupPlan,
    activation_of,
    build_subproblem,
    check_kkt,
    precedence_feasible,
    primal_residual,
    solve_allocation,
    solve_group_maximin,
    suffix_feasible,
)

__all__ = [
    "AllocationPlan",
    "AllocationProblem",
    "EngagementCurve",
    "GroupPlan",
    "InfluenceModel",
    "KKTReport",
    "PrecedenceConstraint",
    "activation_of",
    "build_subproblem",
    "check_kkt",
    "engagement_weight",
    "influence_values",
    "objective_constant",
    "objective_value",
    "objective_weights",
    "precedence_feasible",
    "primal_residual",
    "sentiment_trajectory",
    "solve_allocation",
    "solve_group_maximin",
    "suffix_feasible",
]
