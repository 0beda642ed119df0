"""Inner first-order Nash equilibrium search and the outer barrier-continuation loop.

Each inner step at an upper iterate x_t

1. runs J lower descent steps from the fixed start y0 to get y_J(x_t), f_J(x_t);
2. runs K projected ascent steps on G(x_t, .) over Y_J(x_t) from y_J(x_t);
3. moves x along the gradient estimate a_t and projects onto X.

The outer loop repeats this with a schedule of (tau, J, T, K, step sizes) that
drives the barrier weight to zero.
"""
from __future__ import annotations

import ast
import dataclasses
import math
import operator
import re
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from pvfim.analysis import compute_constants
from pvfim.barrier import (
    BISECTION_TOL,
    BarrierParams,
    _barrier_eval,
    _grad_estimate,
    _restore,
    lower_descent,
)
from pvfim.errors import InvalidArgumentError, NumericalFailure, PvfimError, ScheduleInvalid
from pvfim.problem import BilevelProblem, Box, LipschitzSpec, as_vector

SELECTIONS = ("practice", "theory")


@dataclass(frozen=True)
class InnerConfig:
    """T upper steps, K ascent steps, ascent step beta, upper step eta."""

    T: int
    K: int
    beta: float
    eta: float
    selection: str = "practice"

    def __post_init__(self):
        for name in ("T", "K"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer", **{name: v})
            object.__setattr__(self, name, int(v))
        # beta = 0 is allowed: it freezes the ascent at y_J(x)
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise InvalidArgumentError("beta must be nonnegative", beta=self.beta)
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise InvalidArgumentError("eta must be positive", eta=self.eta)
        if self.selection not in SELECTIONS:
            raise InvalidArgumentError("unknown selection", selection=self.selection)


@dataclass(frozen=True)
class ScheduleEntry:
    l: int
    barrier: BarrierParams
    inner: InnerConfig
    sigma: Optional[float] = None


@dataclass(frozen=True)
class OuterSchedule:
    """A map l -> ScheduleEntry plus the outer stopping rule."""

    entry: Callable[[int], ScheduleEntry]
    mode: str = "custom"
    L_max: int = 5000
    stop_tol: float = 1e-6
    warm_start: bool = False
    max_evals: Optional[int] = None
    max_seconds: Optional[float] = None
    description: str = ""

    def __post_init__(self):
        if int(self.L_max) != self.L_max or self.L_max < 1:
            raise InvalidArgumentError("L_max must be a positive integer", L_max=self.L_max)
        if not self.stop_tol > 0:
            raise InvalidArgumentError("stop_tol must be positive", stop_tol=self.stop_tol)


# ---------------------------------------------------------------------------
# certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FneCertificate:
    sigma_claimed: float
    x_gap: float
    y_grad_norm: float
    slack: float

    @property
    def residual(self):
        return max(self.x_gap, self.y_grad_norm)

    @property
    def is_fne(self):
        return self.slack > 0 and self.x_gap <= self.sigma_claimed and self.y_grad_norm <= self.sigma_claimed


def box_gap(g, x, X: Box):
    """max over z in X of -<g, z - x>, in closed form for a box."""
    g = np.asarray(g, dtype=float)
    per = np.maximum(np.maximum(-g * (X.lo - x), -g * (X.hi - x)), 0.0)
    return float(np.sum(per))


def fne_certificate(grad_x, grad_y, x, X: Box, slack, sigma):
    sigma = math.nan if sigma is None else float(sigma)
    if not slack > 0:
        return FneCertificate(sigma, math.inf, math.inf, float(slack))
    return FneCertificate(
        sigma_claimed=sigma,
        x_gap=box_gap(grad_x, np.asarray(x, dtype=float), X),
        y_grad_norm=float(np.linalg.norm(grad_y)),
        slack=float(slack),
    )


def _fJ_fd(prob, x, y0, J, alpha, f_J):
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        h = math.sqrt(np.finfo(float).eps) * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += h
        grad[i] = (lower_descent(prob, xp, y0, J, alpha).f_J - f_J) / h
    return grad


def check_fne(prob: BilevelProblem, x, y, f_J, params: BarrierParams, sigma, y0=None):
    """Measure both equilibrium residuals at (x, y) with the exact x-gradient of G.

    The gradient of f_J is taken by forward differences of the lower descent
    started at ``y0`` (default: centre of Y), which must be the start that
    produced ``f_J``. Degenerate inputs give a failing certificate.
    """
    x = as_vector(x, prob.n, "x")
    y = as_vector(y, prob.m, "y")
    y0 = prob.Y.center if y0 is None else as_vector(y0, prob.m, "y0")
    s = float(f_J) + prob.eps - float(prob.f(x, y)[0])
    if not s > 0:
        return fne_certificate(None, None, x, prob.X, s, sigma)
    gJ = _fJ_fd(prob, x, y0, params.J, params.alpha, float(f_J))
    ev = _barrier_eval(prob, x, y, float(f_J), params.tau, gJ)
    return fne_certificate(ev.grad_x, ev.grad_y, x, prob.X, ev.slack, sigma)


# ---------------------------------------------------------------------------
# inner search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRow:
    l: int
    t: int
    x: np.ndarray
    y: np.ndarray
    G_value: float
    a_norm: float
    x_gap: float
    y_grad_norm: float
    slack: float
    tau: float
    J: int
    K: int
    eta: float
    min_ascent_slack: float  # smallest slack over accepted ascent iterates


@dataclass
class SolveTrace:
    rows: List[TraceRow]
    n_evals: int = 0
    n_outer: int = 0
    status: str = "running"


@dataclass(frozen=True)
class _Step:
    y_J: np.ndarray
    f_J: float
    y_K: np.ndarray
    a_t: np.ndarray
    row: TraceRow


def _inner_step(prob, x, y0, params, inner, l, t, y_start, sigma):
    lower = lower_descent(prob, x, y0, params.J, params.alpha)
    f_J = lower.f_J
    half = 0.5 * params.c0
    y = lower.y_J
    if y_start is not None and prob.Y.contains(y_start):
        # warm start only from a point that is feasible for the current x
        if f_J + prob.eps - float(prob.f(x, y_start)[0]) >= half:
            y = y_start
    min_slack = math.inf
    for k in range(inner.K):
        try:
            ev = _barrier_eval(prob, x, y, f_J, params.tau)
            if not np.all(np.isfinite(ev.grad_y)):
                raise NumericalFailure("non-finite ascent gradient")
            min_slack = min(min_slack, ev.slack)
            trial = prob.Y.project(y + inner.beta * ev.grad_y)
            y = _restore(prob, x, y, trial, f_J, params.c0, BISECTION_TOL, s_feasible=ev.slack)
        except PvfimError as err:
            raise err.with_context(t=t, k=k)
    try:
        gJ = _fJ_fd(prob, x, y0, params.J, params.alpha, f_J)
        ev = _barrier_eval(prob, x, y, f_J, params.tau, gJ)
        est = _grad_estimate(prob, x, lower.y_J, f_J, y, params.tau)
    except PvfimError as err:
        raise err.with_context(t=t, k=inner.K)
    min_slack = min(min_slack, ev.slack)
    cert = fne_certificate(ev.grad_x, ev.grad_y, x, prob.X, ev.slack, sigma)
    row = TraceRow(
        l=l, t=t, x=x.copy(), y=y.copy(), G_value=ev.value,
        a_norm=float(np.linalg.norm(est.a_t)), x_gap=cert.x_gap,
        y_grad_norm=cert.y_grad_norm, slack=ev.slack, tau=params.tau, J=params.J,
        K=inner.K, eta=inner.eta, min_ascent_slack=min_slack,
    )
    return _Step(y_J=lower.y_J, f_J=f_J, y_K=y, a_t=est.a_t, row=row)


def find_fne(prob: BilevelProblem, params: BarrierParams, inner: InnerConfig, x0, y0,
             l=1, sigma=None, y_start=None, warm_start=False):
    """Run T upper steps at fixed (tau, J); returns ``(x_l, y_l, rows)``.

    ``y0`` is the fixed start of every lower descent. In practice selection the
    result is (x_T, y_K(x_T)), which costs one extra inner solve recorded as the
    row t = T. In theory selection it is the row t < T with the smallest
    max(x_gap, y_grad_norm).
    """
    params.check_problem(prob)
    x = as_vector(x0, prob.n, "x0")
    y0 = as_vector(y0, prob.m, "y0")
    if not prob.X.contains(x):
        raise InvalidArgumentError("x0 must lie in X")
    if not prob.Y.contains(y0):
        raise InvalidArgumentError("y0 must lie in Y")
    ys = None if y_start is None else as_vector(y_start, prob.m, "y_start")

    rows = []
    for t in range(inner.T):
        step = _inner_step(prob, x, y0, params, inner, l, t, ys, sigma)
        rows.append(step.row)
        if warm_start:
            ys = step.y_K
        x = prob.X.project(x - inner.eta * step.a_t)

    if inner.selection == "practice":
        step = _inner_step(prob, x, y0, params, inner, l, inner.T, ys, sigma)
        rows.append(step.row)
        return x, step.y_K, rows
    best = min(rows, key=lambda r: max(r.x_gap, r.y_grad_norm))
    return best.x.copy(), best.y.copy(), rows


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def _counted(fn, counter):
    def wrapped(x, y):
        counter[0] += 1
        return fn(x, y)
    return wrapped


def pvfim(prob: BilevelProblem, schedule: OuterSchedule, x0, y0):
    """Outer loop over l = 1, 2, ...; returns ``(x, y, SolveTrace)``.

    Stops when successive (x_l, y_l) move by at most ``stop_tol``, after
    ``L_max`` outer steps, or once ``max_evals`` objective calls or
    ``max_seconds`` of wall time are used (both checked between outer
    steps). Errors carry the outer index ``l`` and the trace so far as
    ``err.trace``.
    """
    x = as_vector(x0, prob.n, "x0")
    y0 = as_vector(y0, prob.m, "y0")
    if not prob.X.contains(x):
        raise InvalidArgumentError("x0 must lie in X")
    if not prob.Y.contains(y0):
        raise InvalidArgumentError("y0 must lie in Y")
    counter = [0]
    start = time.perf_counter()
    cprob = dataclasses.replace(prob, F=_counted(prob.F, counter), f=_counted(prob.f, counter))
    trace = SolveTrace(rows=[])
    y = y0.copy()
    y_carry = None
    for l in range(1, schedule.L_max + 1):
        try:
            entry = schedule.entry(l)
            x_new, y_new, rows = find_fne(
                cprob, entry.barrier, entry.inner, x, y0, l=l, sigma=entry.sigma,
                y_start=y_carry, warm_start=schedule.warm_start,
            )
        except PvfimError as err:
            trace.n_evals = counter[0]
            trace.n_outer = l - 1
            trace.status = "failed"
            wrapped = err.with_context(l=l)
            wrapped.trace = trace
            raise wrapped from err
        trace.rows.extend(rows)
        trace.n_outer = l
        trace.n_evals = counter[0]
        move = math.sqrt(float(np.sum((x_new - x) ** 2) + np.sum((y_new - y) ** 2)))
        x, y = x_new, y_new
        if schedule.warm_start:
            y_carry = y_new
        if move <= schedule.stop_tol:
            trace.status = "converged"
            break
        if schedule.max_evals is not None and counter[0] >= schedule.max_evals:
            trace.status = "eval_budget"
            break
        if schedule.max_seconds is not None and time.perf_counter() - start >= schedule.max_seconds:
            trace.status = "time_budget"
            break
    else:
        trace.status = "max_outer"
    return x, y, trace


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

REFERENCE_EXPRS = {
    "tau": "0.999^l",
    "J": "l",
    "T": "(1/0.999)^l",
    "K": "2l",
    "eta": "1/(l^3 + 0.1)",
    "beta": "1e-4",
    "alpha": "0.1",
}
REFERENCE_C0 = 0.25
REFERENCE_EPS = 0.5


def make_entry(l, tau, J, T, K, eta, beta, alpha, c0, sigma=None, selection="practice"):
    """Build a schedule entry, rounding the integer quantities up."""
    if not (0 < tau < 1):
        raise ScheduleInvalid("tau must lie in (0, 1)", l=l, tau=tau)
    if sigma is not None and not (0 < sigma < 1):
        raise ScheduleInvalid("sigma must lie in (0, 1); try a larger l0", l=l, sigma=sigma)
    try:
        ints = [math.ceil(v) for v in (J, T, K)]
        return ScheduleEntry(
            l=l,
            barrier=BarrierParams(tau=tau, J=ints[0], c0=c0, alpha=alpha),
            inner=InnerConfig(T=ints[1], K=ints[2], beta=beta, eta=eta, selection=selection),
            sigma=sigma,
        )
    except (InvalidArgumentError, OverflowError, ValueError) as err:
        raise ScheduleInvalid(f"invalid schedule entry: {err}", l=l) from err


def schedule_reference(l, c0=REFERENCE_C0, selection="practice"):
    """tau = 0.999^l, J = l, T = ceil(1.001..^l), K = 2l, alpha = 0.1, beta = 1e-4, eta = 1/(l^3 + 0.1)."""
    if l < 1:
        raise ScheduleInvalid("l must be at least 1", l=l)
    return make_entry(
        l, tau=0.999**l, J=l, T=(1 / 0.999) ** l, K=2 * l, eta=1 / (l**3 + 0.1),
        beta=1e-4, alpha=0.1, c0=c0, selection=selection,
    )


def _sigma_bar(report):
    s = report.spec
    J = report.J
    return max(
        6 * math.sqrt(s.H * J * s.L0 * report.lbar_J) / math.sqrt(s.c),
        math.sqrt(9 * report.M3 * report.lbar_J),
        6 * report.lbar_J * math.sqrt(s.M),
    )


def geometric_terms(spec: LipschitzSpec, l0, l, l2=0.5):
    """(sigma_l, tau_l, J_l, T_l (real), K_l, report) before rounding or validation."""
    if l < 1 or l0 < 1:
        raise ScheduleInvalid("l and l0 must be positive", l=l, l0=l0)
    n = l + l0
    try:
        report = compute_constants(spec, J=n, l2=l2)
    except InvalidArgumentError as err:
        raise ScheduleInvalid(f"constants unavailable: {err.message}", l=l) from err
    if math.isnan(report.M3):
        raise ScheduleInvalid("value bounds are required for this schedule", l=l)
    log_q = math.log1p(-report.contraction)
    sigma = _sigma_bar(report) * math.exp(0.5 * n * log_q)
    tau = math.exp(n * log_q)
    T = math.exp(-n * log_q)
    sigma_report = report if not (0 < sigma < 1) else compute_constants(spec, J=n, sigma=sigma, l2=l2)
    return sigma, tau, n, T, 2 * n, sigma_report


def schedule_geometric(spec: LipschitzSpec, l0, l, l2=0.5, selection="theory"):
    """Geometric schedule with tau_l = q^(l+l0), q = 1 - mu/L_G, and theory step sizes.

    sigma_l = sigma_bar * q^((l+l0)/2), J_l = l + l0, T_l = ceil(q^-(l+l0)),
    K_l = 2(l + l0), c0 = c. Raises ScheduleInvalid while sigma_l >= 1.
    """
    sigma, tau, J, T, K, report = geometric_terms(spec, l0, l, l2)
    alpha, beta, eta = report.step_sizes()
    return make_entry(l, tau, J, T, K, eta, beta, alpha, c0=spec.c, sigma=sigma, selection=selection)


def minimal_l0(spec: LipschitzSpec, l2=0.5):
    """Smallest l0 for which sigma_1 < 1 (sigma_l decays geometrically once small)."""
    def log_sigma1(l0):
        rep = compute_constants(spec, J=1 + l0, l2=l2)
        return math.log(_sigma_bar(rep)) + 0.5 * (1 + l0) * math.log1p(-rep.contraction)

    hi = 1
    while log_sigma1(hi) >= 0:
        hi *= 2
        if hi > 2**62:
            raise ScheduleInvalid("no l0 makes sigma_1 < 1")
    lo = hi // 2
    if hi == 1:
        return 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if log_sigma1(mid) < 0:
            hi = mid
        else:
            lo = mid
    return hi


# --- schedule expressions -----------------------------------------------------

SCHEDULE_KEYS = ("tau", "J", "T", "K", "eta", "beta", "alpha", "sigma")

_BINOPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
    ast.Div: operator.truediv, ast.Pow: operator.pow,
}
_FUNCS = {
    "ceil": math.ceil, "floor": math.floor, "sqrt": math.sqrt, "log": math.log,
    "exp": math.exp, "min": min, "max": max, "abs": abs,
}
_IMPLICIT_MUL = re.compile(r"(\d|\))(?![eE][+-]?\d)(?=\s*[A-Za-z(])")


def _compile_expr(text):
    src = _IMPLICIT_MUL.sub(r"\1*", text.strip()).replace("^", "**")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as err:
        raise ScheduleInvalid(f"cannot parse expression {text!r}") from err

    def ev(node, l):
        if isinstance(node, ast.Expression):
            return ev(node.body, l)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.Name):
            if node.id == "l":
                return l
            if node.id in ("pi", "e"):
                return getattr(math, node.id)
            raise ScheduleInvalid(f"unknown name {node.id!r} in {text!r}")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left, l), ev(node.right, l))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand, l)
            return -v if isinstance(node.op, ast.USub) else v
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
                and node.func.id in _FUNCS and not node.keywords):
            return _FUNCS[node.func.id](*[ev(a, l) for a in node.args])
        raise ScheduleInvalid(f"unsupported construct in {text!r}")

    # validate names and syntax once, at l = 1
    def fn(l):
        try:
            return float(ev(tree, l))
        except (ArithmeticError, ValueError, TypeError) as err:
            raise ScheduleInvalid(f"cannot evaluate {text!r}: {err}", l=l) from err

    try:
        ev(tree, 1)
    except ScheduleInvalid:
        raise
    except (ArithmeticError, ValueError, TypeError):
        pass  # may still be valid for other l
    return fn


def _split_top_level(text):
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p for p in (s.strip() for s in parts) if p]


def parse_schedule(text):
    """Parse ``"T=2, J=l, K=2l"`` into per-key expressions of l.

    Missing keys fall back to the reference defaults. Expressions
    support + - * / ^, implicit multiplication (``2l``), pi, and the functions
    ceil, floor, sqrt, log, exp, min, max, abs.
    """
    exprs = dict(REFERENCE_EXPRS)
    for part in _split_top_level(text):
        if "=" not in part:
            raise ScheduleInvalid(f"expected key=value, got {part!r}")
        key, value = (s.strip() for s in part.split("=", 1))
        if key not in SCHEDULE_KEYS:
            raise ScheduleInvalid(f"unknown schedule key {key!r}")
        exprs[key] = value
    return exprs


def schedule_from_exprs(exprs, c0=REFERENCE_C0, selection="practice"):
    compiled = {k: _compile_expr(v) for k, v in exprs.items()}

    def entry(l):
        vals = {k: fn(l) for k, fn in compiled.items()}
        return make_entry(
            l, vals["tau"], vals["J"], vals["T"], vals["K"], vals["eta"], vals["beta"],
            vals["alpha"], c0=c0, sigma=vals.get("sigma"), selection=selection,
        )

    return entry


def reference_schedule(c0=REFERENCE_C0, selection="practice", **kw):
    return OuterSchedule(
        entry=lambda l: schedule_reference(l, c0=c0, selection=selection),
        mode="appendix_c", description="appendix_c", **kw,
    )


def custom_schedule(text, c0=REFERENCE_C0, selection="practice", **kw):
    exprs = parse_schedule(text)
    desc = ",".join(f"{k}={exprs[k]}" for k in sorted(exprs))
    return OuterSchedule(entry=schedule_from_exprs(exprs, c0, selection), mode="custom",
                         description=desc, **kw)


def geometric_schedule(spec: LipschitzSpec, l0, l2=0.5, selection="theory", **kw):
    return OuterSchedule(
        entry=lambda l: schedule_geometric(spec, l0, l, l2=l2, selection=selection),
        mode="theorem4", description=f"theorem4,l0={l0},l2={l2}", **kw,
    )
