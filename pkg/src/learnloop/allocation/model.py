"""Problem data for multi-session resource allocation.

Resources are indexed ``0..m-1`` and sessions ``0..n-1``; an allocation is an
``(m, n)`` array ``R``.  Sentiment follows

    s_t = theta * s_{t-1} + (1 - theta) * f(R[:, t])

with ``f`` linear (``sum_j w_j R_jt``) or power (``sum_j w_j R_jt ** k``).
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from ..errors import ModelError, ShapeError, ValidationError

log = logging.getLogger(__name__)

OBJECTIVE_MODES = ("sum_sentiment", "terminal_sentiment")


@dataclass(frozen=True)
class EngagementCurve:
    """Inverted-U engagement: ``peak - sharpness * (p - target)**2``."""

    sharpness: float
    peak: float
    target: float

    def __post_init__(self):
        if not self.sharpness > 0:
            raise ValidationError(f"sharpness must be positive, got {self.sharpness}")
        if not 0.0 < self.target < 1.0:
            raise ValidationError(f"target must lie in (0, 1), got {self.target}")


def engagement_weight(p_mastery, curve: EngagementCurve):
    p = np.asarray(p_mastery, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValidationError("mastery must lie in [0, 1]")
    w = -curve.sharpness * (p - curve.target) ** 2 + curve.peak
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class InfluenceModel:
    kind: str
    weights: np.ndarray
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "power"):
            raise ValidationError(f"unknown influence kind {self.kind!r}")
        w = np.array(self.weights, dtype=float)
        if w.ndim not in (1, 2) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be a finite vector (m,) or matrix (m, n)")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.kind == "power":
            if not 0.0 < self.exponent <= 1.0:
                raise ModelError(f"power exponent must lie in (0, 1], got {self.exponent}")
            if np.any(w < 0):
                raise ModelError("power influence needs nonnegative weights for a concave objective")
        elif self.exponent != 1.0:
            raise ValidationError("linear influence takes no exponent")

    @classmethod
    def from_mastery(cls, kind: str, mastery, curves: Sequence[EngagementCurve], exponent: float = 1.0) -> "InfluenceModel":
        """Weights from engagement curves evaluated at per-resource mastery.

        ``mastery`` is ``(m,)`` or ``(m, n)``.  Power models clamp negative
        weights to zero.
        """
        mastery = np.asarray(mastery, dtype=float)
        if mastery.shape[0] != len(curves):
            raise ShapeError("need one engagement curve per resource")
        w = np.stack([np.asarray(engagement_weight(mastery[j], c), dtype=float) for j, c in enumerate(curves)])
        if kind == "power" and np.any(w < 0):
            log.warning("clamping %d negative engagement weights to zero for the power model", int((w < 0).sum()))
            w = np.maximum(w, 0.0)
        return cls(kind, w, exponent)

    def weight_matrix(self, m: int, n: int) -> np.ndarray:
        w = self.weights
        if w.ndim == 1:
            if w.shape[0] != m:
                raise ShapeError(f"expected {m} weights, got {w.shape[0]}")
            return np.repeat(w[:, None], n, axis=1)
        if w.shape != (m, n):
            raise ShapeError(f"expected weights of shape {(m, n)}, got {w.shape}")
        return w.copy()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weights": self.weights.tolist(), "exponent": self.exponent}

    @classmethod
    def from_dict(cls, d: dict) -> "InfluenceModel":
        return cls(d["kind"], np.asarray(d["weights"], dtype=float), float(d.get("exponent", 1.0)))


@dataclass(frozen=True)
class PrecedenceConstraint:
    """Cumulative ``dependent`` may not exceed ``scale * max(cumulative prerequisite - threshold, 0)``."""

    dependent: int
    prerequisite: int
    scale: float
    threshold: float

    def __post_init__(self):
        if self.dependent == self.prerequisite:
            raise ValidationError("dependent and prerequisite resources must differ")
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if not self.threshold >= 0:
            raise ValidationError(f"threshold must be nonnegative, got {self.threshold}")

    def to_dict(self) -> dict:
        return {
            "dependent": self.dependent,
            "prerequisite": self.prerequisite,
            "scale": self.scale,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class AllocationProblem:
    n: int
    m: int
    budgets: np.ndarray
    theta: float
    s0: float
    influence: InfluenceModel
    precedence: tuple[PrecedenceConstraint, ...] = ()
    objective: str = "sum_sentiment"
    # optional per-resource minimum total over the horizon
    required: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValidationError("need at least one session and one resource")
        b = np.array(self.budgets, dtype=float).reshape(-1)
        if b.size == 1:
            b = np.full(self.n, b[0])
        if b.shape != (self.n,) or np.any(~(b > 0)) or not np.all(np.isfinite(b)):
            raise ValidationError("budgets must be n positive finite values")
        b.setflags(write=False)
        object.__setattr__(self, "budgets", b)
        if not 0.0 <= self.theta <= 1.0:
            raise ValidationError(f"theta must lie in [0, 1], got {self.theta}")
        if self.objective not in OBJECTIVE_MODES:
            raise ValidationError(f"objective must be one of {OBJECTIVE_MODES}")
        object.__setattr__(self, "precedence", tuple(self.precedence))
        for c in self.precedence:
            if not (0 <= c.dependent < self.m and 0 <= c.prerequisite < self.m):
                raise ValidationError(f"precedence {c} references a resource outside 0..{self.m - 1}")
        if self.required is not None:
            req = np.array(self.required, dtype=float)
            if req.shape != (self.m,) or np.any(req < 0):
                raise ValidationError("required must be m nonnegative values")
            req.setflags(write=False)
            object.__setattr__(self, "required", req)
        self.influence.weight_matrix(self.m, self.n)

    @property
    def weight_matrix(self) -> np.ndarray:
        return self.influence.weight_matrix(self.m, self.n)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "m": self.m,
            "budgets": self.budgets.tolist(),
            "theta": self.theta,
            "s0": self.s0,
            "influence": self.influence.to_dict(),
            "precedence": [c.to_dict() for c in self.precedence],
            "objective": self.objective,
            "required": None if self.required is None else self.required.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AllocationProblem":
        known = {"name", "n", "m", "budgets", "theta", "s0", "influence", "precedence", "objective", "required"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown problem keys: {sorted(unknown)}")
        return cls(
            n=int(d["n"]),
            m=int(d["m"]),
            budgets=np.asarray(d.get("budgets", 1.0), dtype=float),
            theta=float(d["theta"]),
            s0=float(d.get("s0", 0.0)),
            influence=InfluenceModel.from_dict(d["influence"]),
            precedence=tuple(PrecedenceConstraint(**c) for c in d.get("precedence", [])),
            objective=d.get("objective", "sum_sentiment"),
            required=None if d.get("required") is None else np.asarray(d["required"], dtype=float),
            name=d.get("name", ""),
        )


@dataclass
class KKTReport:
    primal: float
    stationarity: float
    complementarity: float
    tolerance_primal: float = 1e-8
    tolerance_stationarity: float = 1e-6
    tolerance_complementarity: float = 1e-6

    @property
    def ok(self) -> bool:
        return (
            self.primal <= self.tolerance_primal
            and self.stationarity <= self.tolerance_stationarity
            and self.complementarity <= self.tolerance_complementarity
        )

    def to_dict(self) -> dict:
        return {
            "primal": self.primal,
            "stationarity": self.stationarity,
            "complementarity": self.complementarity,
            "ok": self.ok,
        }


@dataclass
class AllocationPlan:
    allocation: np.ndarray
    trajectory: np.ndarray
    objective: float
    activation: tuple[int, ...]
    kkt: KKTReport | None = None
    degenerate: bool = False
    name: str = ""
    subproblems_solved: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "allocation": self.allocation.tolist(),
            "trajectory": self.trajectory.tolist(),
            "objective": self.objective,
            "activation": list(self.activation),
            "kkt": None if self.kkt is None else self.kkt.to_dict(),
            "degenerate": self.degenerate,
        }


# ------------------------------------------------------- closed-form pieces


def _check_allocation(R, problem: AllocationProblem) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (problem.m, problem.n):
        raise ShapeError(f"allocation must have shape {(problem.m, problem.n)}, got {R.shape}")
    return R


def influence_values(R, problem: AllocationProblem) -> np.ndarray:
    """``f(E_t)`` for every session."""
    R = _check_allocation(R, problem)
    w = problem.weight_matrix
    if problem.influence.kind == "power":
        k = problem.influence.exponent
        terms = np.where(w == 0.0, 0.0, w * np.power(np.maximum(R, 0.0), k))
    else:
        terms = w * R
    return terms.sum(axis=0)


def sentiment_trajectory(R, problem: AllocationProblem) -> np.ndarray:
    """``s_1..s_n`` by direct recursion."""
    f = influence_values(R, problem)
    s = np.empty(problem.n)
    prev = problem.s0
    for t in range(problem.n):
        prev = problem.theta * prev + (1.0 - problem.theta) * f[t]
        s[t] = prev
    return s


def objective_weights(problem: AllocationProblem) -> np.ndarray:
    """Per-session discounts ``d_t`` such that objective = constant + sum_t d_t f(E_t)."""
    theta, n = problem.theta, problem.n
    t = np.arange(1, n + 1)
    if problem.objective == "sum_sentiment":
        return 1.0 - theta ** (n - t + 1.0)
    return (1.0 - theta) * theta ** (n - t + 0.0)


def objective_constant(problem: AllocationProblem) -> float:
    theta, n = problem.theta, problem.n
    if problem.objective == "sum_sentiment":
        return problem.s0 * float(np.sum(theta ** np.arange(1, n + 1, dtype=float)))
    return problem.s0 * theta**n


def objective_value(R, problem: AllocationProblem) -> float:
    return objective_constant(problem) + float(objective_weights(problem) @ influence_values(R, problem))
