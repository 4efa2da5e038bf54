"""Primal log-barrier method with damped Newton centering steps.

Solves ``minimize F(x)`` subject to ``A x <= b`` and ``h_k(x) <= 0`` for
smooth convex ``F`` and ``h_k``.  Dense linear algebra only; the problems here
have at most a few hundred variables.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ..errors import SolverError

# f(x) -> (value, gradient, hessian); hessian may be a 1-D diagonal
SmoothFn = Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]]

QUADRATIC_REGION = 1e-3
STALL_DECREMENT = 1e-6


@dataclass
class BarrierResult:
    x: np.ndarray
    t: float
    gap: float
    newton_steps: int
    # multipliers estimated as 1 / (t * slack)
    lin_duals: np.ndarray
    nonlin_duals: np.ndarray


def _as_matrix(h: np.ndarray, size: int) -> np.ndarray:
    return np.diag(h) if h.ndim == 1 else h


def _barrier_terms(x, A, b, nonlinear):
    """Barrier value, gradient, Hessian; value is inf outside the strict interior."""
    r = b - A @ x
    if np.any(r <= 0):
        return np.inf, None, None, r, None
    val = -np.log(r).sum()
    g = A.T @ (1.0 / r)
    H = (A.T * (1.0 / r**2)) @ A
    hv = np.empty(len(nonlinear))
    for k, fn in enumerate(nonlinear):
        v, gk, Hk = fn(x)
        hv[k] = v
        if v >= 0:
            return np.inf, None, None, r, hv
        val -= np.log(-v)
        g = g + gk / (-v)
        H = H + np.outer(gk, gk) / v**2 + _as_matrix(Hk, x.size) / (-v)
    return val, g, H, r, hv


def _phi(x, t, objective, A, b, nonlinear):
    bv, bg, bH, r, hv = _barrier_terms(x, A, b, nonlinear)
    if not np.isfinite(bv):
        return np.inf, None, None, r, hv
    f, fg, fH = objective(x)
    return t * f + bv, t * fg + bg, t * _as_matrix(fH, x.size) + bH, r, hv


def _newton_direction(H, g):
    try:
        c = scipy.linalg.cho_factor(H, check_finite=False)
        dx = -scipy.linalg.cho_solve(c, g, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        dx = -np.linalg.lstsq(H, g, rcond=None)[0]
    if not np.all(np.isfinite(dx)):
        raise SolverError("Newton system produced non-finite step")
    return dx


def barrier_minimize(
    objective: SmoothFn,
    A: np.ndarray,
    b: np.ndarray,
    x0: np.ndarray,
    nonlinear: Sequence[SmoothFn] = (),
    *,
    tol: float = 1e-8,
    mu: float = 10.0,
    t0: float = 1.0,
    newton_tol: float = 1e-10,
    max_newton: int = 100,
    max_outer: int = 60,
    stop: Callable[[np.ndarray, float], bool] | None = None,
) -> BarrierResult:
    """Follow the central path from strictly feasible ``x0`` until ``n_constraints / t < tol``.

    ``stop(x, gap)`` is checked after each centering and ends the run early
    when it returns True (used by phase one).
    """
    x = np.array(x0, dtype=float)
    n_con = A.shape[0] + len(nonlinear)
    if not np.isfinite(_barrier_terms(x, A, b, nonlinear)[0]):
        raise SolverError("starting point is not strictly feasible")
    if n_con == 0:
        raise SolverError("barrier method needs at least one inequality")
    t = t0
    steps = 0
    for _ in range(max_outer):
        prev_dec2 = np.inf
        for _ in range(max_newton):
            val, g, H, _, _ = _phi(x, t, objective, A, b, nonlinear)
            dx = _newton_direction(H, g)
            dec2 = -g @ dx
            if dec2 / 2.0 <= newton_tol:
                break
            # at large t the decrement bottoms out at a rounding floor instead of vanishing
            if dec2 / 2.0 <= STALL_DECREMENT and dec2 > 0.5 * prev_dec2:
                break
            prev_dec2 = dec2
            step = 1.0
            slope = g @ dx
            # near the centre phi differences drown in rounding; only keep feasibility there
            quadratic = dec2 / 2.0 <= QUADRATIC_REGION
            while True:
                cand = x + step * dx
                cval = _phi(cand, t, objective, A, b, nonlinear)[0]
                if np.isfinite(cval) and (quadratic or cval <= val + 0.01 * step * slope):
                    break
                step *= 0.5
                if step < 1e-14:
                    break
            if step < 1e-14:
                # no representable progress left at this t
                break
            x = cand
            steps += 1
        else:
            raise SolverError(f"centering did not converge within {max_newton} Newton steps (t={t:.3g})")
        if stop is not None and stop(x, n_con / t):
            break
        if n_con / t < tol:
            break
        t *= mu
    else:
        raise SolverError(f"barrier method did not reach gap {tol} in {max_outer} outer iterations")
    _, _, _, r, hv = _barrier_terms(x, A, b, nonlinear)
    return BarrierResult(
        x=x,
        t=t,
        gap=n_con / t,
        newton_steps=steps,
        lin_duals=1.0 / (t * r),
        nonlin_duals=np.array([] if hv is None else 1.0 / (t * -hv)),
    )


def phase_one(A: np.ndarray, b: np.ndarray, x0: np.ndarray | None = None, *, margin: float = 1e-9) -> np.ndarray | None:
    """Strictly feasible point of ``A x <= b`` or None when the interior is empty.

    Minimises the largest constraint violation ``s`` over ``(x, s)``.  The
    feasible region must be bounded for the auxiliary problem to be bounded.
    """
    n = A.shape[1]
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    if np.all(A @ x0 < b - margin):
        return x0
    s0 = float(np.max(A @ x0 - b)) + 1.0
    A1 = np.hstack([A, -np.ones((A.shape[0], 1))])
    z0 = np.append(x0, s0)
    cost = np.zeros(n + 1)
    cost[-1] = 1.0

    def obj(z):
        return z[-1], cost, np.zeros(n + 1)

    # stop once s is clearly negative, or once its sign is settled by the gap bound s* >= s - gap
    def settled(z, gap):
        s = z[-1]
        return s < -1e-3 or s - gap >= -margin or (s < -margin and gap < 0.01 * abs(s))

    res = barrier_minimize(obj, A1, b, z0, tol=1e-12, stop=settled)
    x = res.x[:-1]
    if np.all(A @ x < b - margin):
        return x
    return None
