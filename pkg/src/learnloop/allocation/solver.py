"""Exact allocation solver.

The precedence bound ``C_a(t) <= scale * max(C_b(t) - threshold, 0)`` on
cumulative sums is not convex.  Because cumulative sums of nonnegative
allocations are nondecreasing, the sessions where the bound is in its affine
branch always form a suffix ``t >= j``.  Fixing ``j`` per constraint gives a
convex subproblem:

    R[a, t] = 0                                    for t < j
    C_a(t) - scale * C_b(t) <= -scale * threshold  for t >= j

and the union over ``j in 0..n`` equals the original feasible set.  Every
combination is solved with the barrier method and the best one is returned;
ties go to the lexicographically smallest activation vector.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from ..errors import InfeasibleError, ValidationError
from .barrier import barrier_minimize, phase_one
from .model import (
    AllocationPlan,
    AllocationProblem,
    KKTReport,
    objective_constant,
    objective_value,
    objective_weights,
    sentiment_trajectory,
)

log = logging.getLogger(__name__)

TIE_TOL = 1e-9


# ------------------------------------------------------------ feasibility


def precedence_feasible(R: np.ndarray, c, tol: float = 0.0) -> bool:
    """Membership in the original piecewise-linear precedence set."""
    ca = np.cumsum(R[c.dependent])
    cb = np.cumsum(R[c.prerequisite])
    return bool(np.all(ca <= c.scale * np.maximum(cb - c.threshold, 0.0) + tol))


def suffix_feasible(R: np.ndarray, c, start: int, tol: float = 0.0) -> bool:
    """Membership in the affine system for activation start ``start``."""
    ca = np.cumsum(R[c.dependent])
    cb = np.cumsum(R[c.prerequisite])
    if np.any(ca[:start] > tol):
        return False
    return bool(np.all(ca[start:] <= c.scale * (cb[start:] - c.threshold) + tol))


def activation_of(R: np.ndarray, c) -> int:
    """First session whose cumulative prerequisite strictly exceeds the threshold (n if none)."""
    cb = np.cumsum(R[c.prerequisite])
    above = np.nonzero(cb > c.threshold)[0]
    return int(above[0]) if above.size else R.shape[1]


def primal_residual(R: np.ndarray, problem: AllocationProblem) -> float:
    """Largest violation of the original constraints (0 when feasible)."""
    R = np.asarray(R, dtype=float)
    viol = [float(np.max(-R, initial=0.0)), float(np.max(R.sum(axis=0) - problem.budgets, initial=0.0))]
    for c in problem.precedence:
        ca = np.cumsum(R[c.dependent])
        cb = np.cumsum(R[c.prerequisite])
        viol.append(float(np.max(ca - c.scale * np.maximum(cb - c.threshold, 0.0), initial=0.0)))
    if problem.required is not None:
        viol.append(float(np.max(problem.required - R.sum(axis=1), initial=0.0)))
    return max(0.0, *viol)


# ------------------------------------------------------------ subproblems


@dataclass
class Subproblem:
    """Convex piece for one activation vector, over the non-fixed entries of R."""

    problem: AllocationProblem
    activation: tuple[int, ...]
    free: np.ndarray  # flat indices into R (row-major, j * n + t)
    A: np.ndarray
    b: np.ndarray
    labels: list[tuple]
    coef: np.ndarray  # d_t * w_jt per free entry
    exponent: float
    # a row with no free variables and nonpositive bound: no strict interior
    empty_interior: bool = False

    @property
    def size(self) -> int:
        return self.free.size

    def objective_terms(self, x: np.ndarray) -> float:
        if self.exponent == 1.0:
            return float(self.coef @ x)
        return float(self.coef @ np.power(x, self.exponent))

    def neg_objective(self, x: np.ndarray):
        """Value, gradient and diagonal Hessian of the negated variable part."""
        k = self.exponent
        if k == 1.0:
            return -float(self.coef @ x), -self.coef, np.zeros_like(x)
        xk = np.power(x, k)
        return (
            -float(self.coef @ xk),
            -self.coef * k * xk / x,
            -self.coef * k * (k - 1.0) * xk / x**2,
        )

    def objective_gradient(self, x: np.ndarray) -> np.ndarray:
        """Gradient of the (maximised) objective; +inf where a positive-weight power term sits at 0."""
        k = self.exponent
        if k == 1.0:
            return self.coef.copy()
        g = np.zeros_like(x)
        pos = x > 0
        g[pos] = self.coef[pos] * k * np.power(x[pos], k - 1.0)
        g[~pos & (self.coef > 0)] = np.inf
        return g

    def embed(self, x: np.ndarray) -> np.ndarray:
        R = np.zeros(self.problem.m * self.problem.n)
        R[self.free] = x
        return R.reshape(self.problem.m, self.problem.n)

    def restrict(self, R: np.ndarray) -> np.ndarray:
        return np.asarray(R, dtype=float).reshape(-1)[self.free]


def build_subproblem(problem: AllocationProblem, activation: Sequence[int]) -> Subproblem:
    m, n = problem.m, problem.n
    activation = tuple(int(j) for j in activation)
    if len(activation) != len(problem.precedence):
        raise ValidationError("need one activation index per precedence constraint")
    fixed = np.zeros((m, n), dtype=bool)
    for c, j in zip(problem.precedence, activation):
        if not 0 <= j <= n:
            raise ValidationError(f"activation index {j} outside 0..{n}")
        fixed[c.dependent, :j] = True
    free = np.flatnonzero(~fixed.reshape(-1))
    col = {int(f): i for i, f in enumerate(free)}
    nv = free.size

    rows, rhs, labels = [], [], []

    def add(coeffs: dict, bound: float, label: tuple):
        row = np.zeros(nv)
        for flat, v in coeffs.items():
            if flat in col:
                row[col[flat]] += v
        rows.append(row)
        rhs.append(bound)
        labels.append(label)

    for i, flat in enumerate(free):
        j, t = divmod(int(flat), n)
        add({int(flat): -1.0}, 0.0, ("nonneg", j, t))
    for t in range(n):
        add({j * n + t: 1.0 for j in range(m)}, float(problem.budgets[t]), ("budget", t))
    for ci, (c, start) in enumerate(zip(problem.precedence, activation)):
        for t in range(start, n):
            coeffs: dict[int, float] = {}
            for s in range(t + 1):
                coeffs[c.dependent * n + s] = coeffs.get(c.dependent * n + s, 0.0) + 1.0
                coeffs[c.prerequisite * n + s] = coeffs.get(c.prerequisite * n + s, 0.0) - c.scale
            add(coeffs, -c.scale * c.threshold, ("precedence", ci, t))
    if problem.required is not None:
        for j in range(m):
            if problem.required[j] > 0:
                add({j * n + t: -1.0 for t in range(n)}, -float(problem.required[j]), ("required", j))

    A = np.array(rows).reshape(len(rows), nv)
    b = np.array(rhs)
    empty = np.all(A == 0.0, axis=1)
    empty_interior = bool(np.any(empty & (b <= 0.0)))
    keep = ~empty
    d = objective_weights(problem)
    coef = (problem.weight_matrix * d[None, :]).reshape(-1)[free]
    return Subproblem(
        problem=problem,
        activation=activation,
        free=free,
        A=A[keep],
        b=b[keep],
        labels=[lab for lab, k in zip(labels, keep) if k],
        coef=coef,
        exponent=problem.influence.exponent if problem.influence.kind == "power" else 1.0,
        empty_interior=empty_interior,
    )


@dataclass
class SubResult:
    sub: Subproblem
    x: np.ndarray
    value: float
    start: np.ndarray  # strictly feasible point from phase one


def _interior_start(sub: Subproblem) -> np.ndarray | None:
    if sub.empty_interior or sub.size == 0:
        return None
    # small uniform allocation is interior for most pieces; phase one handles the rest
    x0 = np.full(sub.size, 1e-3 * float(np.min(sub.problem.budgets)) / sub.problem.m)
    return phase_one(sub.A, sub.b, x0)


def solve_subproblem(sub: Subproblem, tol: float = 1e-8) -> SubResult | None:
    start = _interior_start(sub)
    if start is None:
        return None
    res = barrier_minimize(sub.neg_objective, sub.A, sub.b, start, tol=tol)
    x = np.maximum(res.x, 0.0)
    R = sub.embed(x)
    return SubResult(sub, x, objective_value(R, sub.problem), start)


# ------------------------------------------------------------ KKT check


def kkt_residuals(grad: np.ndarray, G: np.ndarray, slack: np.ndarray) -> tuple[float, float]:
    """Stationarity and complementarity residuals for ``max f`` s.t. ``G x <= h``.

    Multipliers are the nonnegative least-squares minimisers of
    ``||grad - G^T lam||^2 + ||diag(slack) lam||^2`` with unit-norm rows, so
    they are derived from the point alone, not from any solver state.
    """
    if not np.all(np.isfinite(grad)):
        return float("inf"), 0.0
    if G.shape[0] == 0:
        return float(np.max(np.abs(grad), initial=0.0)), 0.0
    norms = np.linalg.norm(G, axis=1)
    norms[norms == 0] = 1.0
    Gn = G / norms[:, None]
    sn = np.maximum(slack, 0.0) / norms
    M = np.vstack([Gn.T, np.diag(sn)])
    rhs = np.concatenate([grad, np.zeros(G.shape[0])])
    lam, _ = scipy.optimize.nnls(M, rhs, maxiter=50 * M.shape[1])
    stationarity = float(np.max(np.abs(grad - Gn.T @ lam), initial=0.0))
    complementarity = float(np.max(lam * sn, initial=0.0))
    return stationarity, complementarity


def check_kkt(plan: AllocationPlan, problem: AllocationProblem, **tolerances) -> KKTReport:
    """Certify a plan against the convex piece selected by its activation vector."""
    R = np.asarray(plan.allocation, dtype=float)
    primal = primal_residual(R, problem)
    if len(plan.activation) != len(problem.precedence):
        activation = tuple(activation_of(R, c) for c in problem.precedence)
    else:
        activation = plan.activation
    sub = build_subproblem(problem, activation)
    x = sub.restrict(R)
    fixed_mask = np.ones(R.size, dtype=bool)
    fixed_mask[sub.free] = False
    primal = max(primal, float(np.max(np.abs(R.reshape(-1)[fixed_mask]), initial=0.0)))
    stat, comp = kkt_residuals(sub.objective_gradient(x), sub.A, sub.b - sub.A @ x)
    return KKTReport(primal, stat, comp, **tolerances)


# ------------------------------------------------------------ single student


def _activations(problem: AllocationProblem) -> list[tuple[int, ...]]:
    return list(itertools.product(range(problem.n + 1), repeat=len(problem.precedence)))


def _best(results: Sequence[SubResult | None]) -> SubResult | None:
    best = None
    for r in results:  # candidate order is lexicographic, so ties keep the smallest activation
        if r is None:
            continue
        if best is None or r.value > best.value + TIE_TOL * max(1.0, abs(best.value)):
            best = r
    return best


def _infeasibility(problem: AllocationProblem) -> InfeasibleError:
    total = float(problem.budgets.sum())
    if problem.required is not None:
        for c in problem.precedence:
            need = float(problem.required[c.dependent])
            reachable = c.scale * max(total - c.threshold, 0.0)
            if need > reachable:
                return InfeasibleError(
                    f"precedence constraint (dependent={c.dependent}, prerequisite={c.prerequisite}, "
                    f"threshold={c.threshold}) caps resource {c.dependent} at {reachable:g} "
                    f"but {need:g} is required",
                    constraint=c,
                )
        if float(problem.required.sum()) > total:
            return InfeasibleError(
                f"required totals {float(problem.required.sum()):g} exceed the total budget {total:g}",
                constraint="budget",
            )
    return InfeasibleError("no activation pattern admits a strictly feasible allocation", constraint=None)


def _map(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _zero_plan(problem: AllocationProblem) -> AllocationPlan:
    R = np.zeros((problem.m, problem.n))
    activation = tuple(problem.n for _ in problem.precedence)
    plan = AllocationPlan(
        allocation=R,
        trajectory=sentiment_trajectory(R, problem),
        objective=objective_value(R, problem),
        activation=activation,
        degenerate=True,
        name=problem.name,
    )
    plan.kkt = check_kkt(plan, problem)
    return plan


def solve_allocation(problem: AllocationProblem, *, tol: float = 1e-8, threads: int = 1) -> AllocationPlan:
    """Globally optimal allocation for one student.

    With ``theta == 1`` the objective does not depend on R; the zero
    allocation is returned and flagged ``degenerate`` (unless minimum totals
    are required, in which case any feasible point is optimal).
    """
    if problem.theta == 1.0 and (problem.required is None or not np.any(problem.required > 0)):
        log.warning("theta=1: objective is independent of the allocation")
        return _zero_plan(problem)
    candidates = _activations(problem)
    results = _map(lambda a: solve_subproblem(build_subproblem(problem, a), tol), candidates, threads)
    best = _best(results)
    if best is None:
        raise _infeasibility(problem)
    R = best.sub.embed(best.x)
    plan = AllocationPlan(
        allocation=R,
        trajectory=sentiment_trajectory(R, problem),
        objective=objective_value(R, problem),
        activation=best.sub.activation,
        degenerate=problem.theta == 1.0,
        name=problem.name,
        subproblems_solved=sum(r is not None for r in results),
    )
    plan.kkt = check_kkt(plan, problem)
    return plan


# ------------------------------------------------------------ group maximin


@dataclass
class GroupPlan:
    plans: list[AllocationPlan]
    value: float
    activations: tuple[tuple[int, ...], ...]
    kkt: KKTReport

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "activations": [list(a) for a in self.activations],
            "kkt": self.kkt.to_dict(),
            "plans": [p.to_dict() for p in self.plans],
        }


def _check_group(problems: Sequence[AllocationProblem]) -> None:
    if not problems:
        raise ValidationError("need at least one student")
    first = problems[0]
    for p in problems[1:]:
        if p.n != first.n or p.m != first.m or not np.array_equal(p.budgets, first.budgets):
            raise ValidationError("group members must share sessions, resources and budgets")


class _Epigraph:
    """Joint variables ``(x_1, ..., x_K, tau)`` for maximising the minimum objective."""

    def __init__(self, subs: Sequence[Subproblem]):
        self.subs = list(subs)
        self.offsets = np.cumsum([0] + [s.size for s in subs])
        self.size = int(self.offsets[-1]) + 1
        rows = sum(s.A.shape[0] for s in subs)
        self.A = np.zeros((rows, self.size))
        self.b = np.concatenate([s.b for s in subs])
        r = 0
        for k, s in enumerate(subs):
            self.A[r : r + s.A.shape[0], self.offsets[k] : self.offsets[k + 1]] = s.A
            r += s.A.shape[0]
        self.consts = [objective_constant(s.problem) for s in subs]

    def part(self, z: np.ndarray, k: int) -> np.ndarray:
        return z[self.offsets[k] : self.offsets[k + 1]]

    def objective(self, z):
        g = np.zeros(self.size)
        g[-1] = -1.0
        return -z[-1], g, np.zeros(self.size)

    def constraint(self, k: int):
        # tau - obj_k(x_k) <= 0
        def fn(z):
            val, grad, hdiag = self.subs[k].neg_objective(self.part(z, k))
            g = np.zeros(self.size)
            g[self.offsets[k] : self.offsets[k + 1]] = grad
            g[-1] = 1.0
            h = np.zeros(self.size)
            h[self.offsets[k] : self.offsets[k + 1]] = hdiag
            return z[-1] + val - self.consts[k], g, h

        return fn

    def values(self, z) -> list[float]:
        return [self.consts[k] + s.objective_terms(self.part(z, k)) for k, s in enumerate(self.subs)]

    def kkt(self, z) -> tuple[float, float]:
        x_parts = [self.part(z, k) for k in range(len(self.subs))]
        grads, slacks = [self.A], [self.b - self.A @ z]
        rows = []
        vals = self.values(z)
        for k, s in enumerate(self.subs):
            row = np.zeros(self.size)
            row[self.offsets[k] : self.offsets[k + 1]] = -s.objective_gradient(x_parts[k])
            row[-1] = 1.0
            rows.append(row)
        G = np.vstack(grads + [np.array(rows)])
        slack = np.concatenate(slacks + [np.array(vals) - z[-1]])
        grad = np.zeros(self.size)
        grad[-1] = 1.0
        return kkt_residuals(grad, G, slack)


def solve_group_maximin(
    problems: Sequence[AllocationProblem], *, tol: float = 1e-8, threads: int = 1
) -> GroupPlan:
    """Per-student allocations maximising the smallest student objective.

    Activation vectors are chosen by branch and bound over the product of
    per-student candidates, bounded by each candidate's individual optimum;
    the selected combination is solved jointly in epigraph form.
    """
    _check_group(problems)
    per_student: list[list[SubResult]] = []
    for p in problems:
        cands = _activations(p)
        res = _map(lambda a, p=p: solve_subproblem(build_subproblem(p, a), tol), cands, threads)
        ok = [r for r in res if r is not None]
        if not ok:
            raise _infeasibility(p)
        # best bound first; stable sort keeps lexicographic order on ties
        ok.sort(key=lambda r: -r.value)
        per_student.append(ok)

    incumbent: tuple[float, np.ndarray, _Epigraph] | None = None

    def leaf(choice: list[SubResult]):
        ep = _Epigraph([c.sub for c in choice])
        starts = [c.start for c in choice]
        z0 = np.concatenate(starts + [np.zeros(1)])
        z0[-1] = min(ep.values(z0)) - 1.0
        cons = [ep.constraint(k) for k in range(len(choice))]
        res = barrier_minimize(ep.objective, ep.A, ep.b, z0, cons, tol=tol)
        z = res.x
        return min(ep.values(z)), z, ep

    def search(k: int, chosen: list[SubResult], bound: float):
        nonlocal incumbent
        if k == len(per_student):
            value, z, ep = leaf(chosen)
            if incumbent is None or value > incumbent[0] + TIE_TOL * max(1.0, abs(incumbent[0])):
                incumbent = (value, z, ep)
            return
        for cand in per_student[k]:
            nb = min(bound, cand.value)
            if incumbent is not None and nb <= incumbent[0] + TIE_TOL * max(1.0, abs(incumbent[0])):
                break  # candidates are sorted, the rest bound no higher
            search(k + 1, chosen + [cand], nb)

    search(0, [], np.inf)
    assert incumbent is not None
    value, z, ep = incumbent
    plans = []
    primal = 0.0
    for k, (p, sub) in enumerate(zip(problems, ep.subs)):
        x = np.maximum(ep.part(z, k), 0.0)
        R = sub.embed(x)
        primal = max(primal, primal_residual(R, p))
        plans.append(
            AllocationPlan(
                allocation=R,
                trajectory=sentiment_trajectory(R, p),
                objective=objective_value(R, p),
                activation=sub.activation,
                name=p.name,
            )
        )
    stat, comp = ep.kkt(np.append(np.concatenate([sub.restrict(pl.allocation) for sub, pl in zip(ep.subs, plans)]), z[-1]))
    report = KKTReport(primal, stat, comp)
    for pl in plans:
        pl.kkt = report
    return GroupPlan(plans, min(pl.objective for pl in plans), tuple(s.activation for s in ep.subs), report)
