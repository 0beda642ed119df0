"""Lower-level value-function approximation and the log-barrier objective.

For a fixed upper variable x the lower problem min_y f(x, y) is approximated
by J projected gradient steps from a fixed start y0, giving y_J(x) and
f_J(x) = f(x, y_J(x)).  The pessimistic inner problem is then replaced by

    G(x, y) = F(x, y) + tau * ln(f_J(x) + eps - f(x, y))

maximised over the restricted set Y_J(x) = {y in Y : slack(x, y) >= c0 / 2}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from pvfim.errors import (
    BarrierDomainError,
    ContractViolation,
    InvalidArgumentError,
    NumericalFailure,
)
from pvfim.problem import BilevelProblem, as_vector

BISECTION_TOL = 1e-10
_MAX_BISECTIONS = 200


@dataclass(frozen=True)
class BarrierParams:
    """tau: barrier weight, J: lower descent steps, c0: restriction margin, alpha: lower stepsize.

    ``tau = 0`` and ``alpha = 0`` are accepted so that the degenerate limits can
    be exercised directly.
    """

    tau: float
    J: int
    c0: float
    alpha: float

    def __post_init__(self):
        if not (0.0 <= self.tau < 1.0):
            raise InvalidArgumentError("tau must lie in [0, 1)", tau=self.tau)
        if int(self.J) != self.J or self.J < 1:
            raise InvalidArgumentError("J must be a positive integer", J=self.J)
        object.__setattr__(self, "J", int(self.J))
        if not (math.isfinite(self.c0) and self.c0 > 0):
            raise InvalidArgumentError("c0 must be positive", c0=self.c0)
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise InvalidArgumentError("alpha must be nonnegative", alpha=self.alpha)

    def check_problem(self, prob: BilevelProblem):
        # c0 <= eps keeps y_J(x) inside Y_J(x): its slack is exactly eps
        if self.c0 > prob.eps:
            raise InvalidArgumentError("c0 must not exceed eps", c0=self.c0, eps=prob.eps)


@dataclass(frozen=True)
class LowerApproxResult:
    y_J: np.ndarray
    f_J: float
    trajectory: Optional[List[np.ndarray]] = None


@dataclass(frozen=True)
class BarrierEval:
    value: float
    grad_x: Optional[np.ndarray]
    grad_y: np.ndarray
    slack: float


@dataclass(frozen=True)
class GradientEstimate:
    a_t: np.ndarray
    b_t: np.ndarray
    slack: float


def _check_point(prob, x, y):
    return as_vector(x, prob.n, "x"), as_vector(y, prob.m, "y")


def lower_descent(prob, x, y0, J, alpha, keep_trajectory=False):
    """J projected gradient steps on f(x, .) from y0; no input validation."""
    f, Y = prob.f, prob.Y
    y = y0
    traj = [y0.copy()] if keep_trajectory else None
    for j in range(J):
        _, _, g = f(x, y)
        if not np.all(np.isfinite(g)):
            raise NumericalFailure("non-finite lower-level gradient", iteration=j)
        y = Y.project(y - alpha * g)
        if keep_trajectory:
            traj.append(y.copy())
    f_J = float(f(x, y)[0])
    if not math.isfinite(f_J):
        raise NumericalFailure("non-finite lower-level value", iteration=J)
    return LowerApproxResult(y_J=y, f_J=f_J, trajectory=traj)


def approx_lower_solution(prob: BilevelProblem, x, params: BarrierParams, y0, keep_trajectory=False):
    """Run exactly ``params.J`` projected descent steps on f(x, .) starting at ``y0``."""
    x, y0 = _check_point(prob, x, y0)
    if not prob.X.contains(x):
        raise InvalidArgumentError("x must lie in X")
    if not prob.Y.contains(y0):
        raise InvalidArgumentError("y0 must lie in Y")
    return lower_descent(prob, x, y0, params.J, params.alpha, keep_trajectory)


def slack(prob, x, y, f_J):
    return f_J + prob.eps - float(prob.f(x, y)[0])


def barrier_eval(prob: BilevelProblem, x, y, f_J, params: BarrierParams, grad_fJ=None):
    """Value and gradients of G at (x, y).

    ``grad_fJ`` is the gradient of x -> f_J(x). It is needed only for the exact
    x-gradient; without it ``grad_x`` is None (the solver uses
    :func:`grad_estimate` instead).
    """
    x, y = _check_point(prob, x, y)
    return _barrier_eval(prob, x, y, float(f_J), params.tau, grad_fJ)


def _barrier_eval(prob, x, y, f_J, tau, grad_fJ=None):
    Fv, Fx, Fy = prob.F(x, y)
    fv, fx, fy = prob.f(x, y)
    s = f_J + prob.eps - float(fv)
    if not s > 0:
        raise BarrierDomainError("barrier slack is not positive", slack=s)
    w = tau / s
    grad_y = Fy - w * fy
    grad_x = None if grad_fJ is None else Fx + w * (np.asarray(grad_fJ, dtype=float) - fx)
    return BarrierEval(value=float(Fv) + tau * math.log(s), grad_x=grad_x, grad_y=grad_y, slack=s)


def in_restricted_set(prob: BilevelProblem, x, y, f_J, c0):
    """Membership in Y_J(x); exact comparison."""
    x, y = _check_point(prob, x, y)
    if not prob.Y.contains(y):
        return False
    return slack(prob, x, y, f_J) >= c0 / 2


def restore_feasibility(prob: BilevelProblem, x, y_feasible, y_trial, f_J, c0, tol=BISECTION_TOL):
    """Pull ``y_trial`` back into Y_J(x) along the segment from ``y_feasible``.

    Not the Euclidean projection: returns the trial point if it is feasible,
    otherwise the point of the segment whose slack lies in [c0/2, c0/2 + tol].
    The crossing is unique because slack is concave along the segment.
    """
    x, y_feasible = _check_point(prob, x, y_feasible)
    y_trial = as_vector(y_trial, prob.m, "y_trial")
    return _restore(prob, x, y_feasible, y_trial, float(f_J), c0, tol)


def _restore(prob, x, yf, yt, f_J, c0, tol, s_feasible=None):
    half = 0.5 * c0
    s_lo = slack(prob, x, yf, f_J) if s_feasible is None else s_feasible
    if not (s_lo >= half and prob.Y.contains(yf)):
        raise ContractViolation("starting point is outside the restricted set", slack=s_lo)
    s_t = slack(prob, x, yt, f_J)
    if s_t >= half:
        return yt
    if s_lo <= half + tol:
        return yf
    d = yt - yf
    lo, hi = 0.0, 1.0
    for _ in range(_MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        s = slack(prob, x, yf + mid * d, f_J)
        if s >= half:
            lo, s_lo = mid, s
            if s_lo <= half + tol:
                break
        else:
            hi = mid
        if hi - lo <= 1e-17:
            break
    return yf + lo * d


def example3_slab_projection(x, y, f_J, eps, c0):
    """Exact Euclidean projection onto example3's sublevel slab.

    example3 has f(x, y) = (y1 - 2 y2)^2 + x, so Y_J(x) without the box is
    |y1 - 2 y2| <= w with w^2 = f_J + eps - c0/2 - x. The box is ignored, so the
    result is the exact projection onto Y_J(x) only when it lands inside Y.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    w2 = f_J + eps - 0.5 * c0 - float(x[0])
    if w2 < 0:
        raise InvalidArgumentError("restricted slab is empty", width_sq=w2)
    w = math.sqrt(w2)
    r = y[0] - 2.0 * y[1]
    if abs(r) <= w:
        return y.copy()
    a = np.array([1.0, -2.0])
    return y - (r - math.copysign(w, r)) * a / 5.0


def grad_estimate(prob: BilevelProblem, x, lower: LowerApproxResult, y_K, params: BarrierParams):
    """The solver's estimate a_t of the gradient of phi(x) = max_y G(x, y).

    a_t = grad_x F(x, y_K) + tau / slack * (grad_x f(x, y_J) - grad_x f(x, y_K));
    it drops the chain term through y_J(x) present in the exact gradient.
    """
    x, y_K = _check_point(prob, x, y_K)
    return _grad_estimate(prob, x, lower.y_J, lower.f_J, y_K, params.tau)


def _grad_estimate(prob, x, y_J, f_J, y_K, tau):
    _, Fx, _ = prob.F(x, y_K)
    fK, fxK, _ = prob.f(x, y_K)
    _, fxJ, _ = prob.f(x, y_J)
    s = f_J + prob.eps - float(fK)
    if not s > 0:
        raise BarrierDomainError("barrier slack is not positive", slack=s)
    b = fxJ - fxK
    return GradientEstimate(a_t=Fx + (tau / s) * b, b_t=b, slack=s)


def fJ_gradient(prob: BilevelProblem, x, params: BarrierParams, y0, f_J=None):
    """Forward finite-difference gradient of x -> f_J(x).

    Points x + h may leave X; f and its gradient are assumed defined on a
    neighbourhood of X.
    """
    x = as_vector(x, prob.n, "x")
    y0 = as_vector(y0, prob.m, "y0")
    if f_J is None:
        f_J = lower_descent(prob, x, y0, params.J, params.alpha).f_J
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        h = math.sqrt(np.finfo(float).eps) * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += h
        grad[i] = (lower_descent(prob, xp, y0, params.J, params.alpha).f_J - f_J) / h
    return grad


def maximize_restricted(prob, x, f_J, tau, c0, y_start, step, max_iter=100_000, tol=1e-13):
    """Projected ascent on G(x, .) over Y_J(x) until the iterate stops moving.

    Used for analysis (evaluating phi and y*(x)); returns (y, G value).
    """
    x = as_vector(x, prob.n, "x")
    y = as_vector(y_start, prob.m, "y_start")
    for _ in range(max_iter):
        ev = _barrier_eval(prob, x, y, f_J, tau)
        trial = prob.Y.project(y + step * ev.grad_y)
        y_new = _restore(prob, x, y, trial, f_J, c0, BISECTION_TOL, s_feasible=ev.slack)
        moved = float(np.linalg.norm(y_new - y))
        y = y_new
        if moved <= tol:
            break
    return y, _barrier_eval(prob, x, y, f_J, tau).value
