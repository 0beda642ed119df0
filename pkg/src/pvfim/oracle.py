"""Brute-force ground truth for small problems.

For every x on a grid over X the oracle computes

* f_star(x)  = min over Y of f(x, .)
* phi_eps(x) = max of F(x, .) over {y in Y : f(x, y) <= f_star(x) + eps}

by full enumeration of a tensor grid on Y, a few rounds of local grid
refinement around the incumbents, and a long first-order polish (projected
descent for the minimum, projected ascent kept inside the sublevel set for the
maximum). The polish steps are monotone: a step is only accepted if it improves
the incumbent, so refinement can never make an answer worse.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from pvfim.errors import InvalidArgumentError, OracleError
from pvfim.problem import BilevelProblem, LipschitzSpec, ValueBounds, as_vector

POLISH_STEPS = 10_000
_LOCAL_POINTS = 21
_CHUNK_ELEMENTS = 2_000_000


@dataclass(frozen=True)
class GridSpec:
    x_points: int = 2001
    y_points_per_dim: int = 401
    refine_rounds: int = 3

    def __post_init__(self):
        if int(self.x_points) != self.x_points or self.x_points < 2:
            raise InvalidArgumentError("x_points must be an integer >= 2", x_points=self.x_points)
        if int(self.y_points_per_dim) != self.y_points_per_dim or self.y_points_per_dim < 2:
            raise InvalidArgumentError(
                "y_points_per_dim must be an integer >= 2", y_points_per_dim=self.y_points_per_dim
            )
        if int(self.refine_rounds) != self.refine_rounds or self.refine_rounds < 0:
            raise InvalidArgumentError("refine_rounds must be >= 0", refine_rounds=self.refine_rounds)


@dataclass(frozen=True)
class OracleResult:
    x: np.ndarray  # (N, n) grid points
    f_star: np.ndarray
    F_star: np.ndarray
    phi_eps: np.ndarray
    y_argmin: np.ndarray  # (N, m) lower-level minimisers
    y_argmax: np.ndarray  # (N, m) pessimistic responses
    phi_min: float
    x_argmin: np.ndarray
    grid: GridSpec

    def to_csv(self, out=None, header_lines=()):
        """Write the per-x table; returns the text when ``out`` is None."""
        buf = io.StringIO() if out is None else out
        for line in header_lines:
            buf.write(f"# {line}\n")
        buf.write(f"# phi_min={self.phi_min:.17g}\n")
        buf.write("# x_argmin=" + " ".join(f"{v:.17g}" for v in self.x_argmin) + "\n")
        n, m = self.x.shape[1], self.y_argmax.shape[1]
        xcols = ["x"] if n == 1 else [f"x{i}" for i in range(n)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(xcols + ["f_star", "F_star", "phi_eps"] + [f"y_argmax{j}" for j in range(m)])
        for i in range(self.x.shape[0]):
            vals = list(self.x[i]) + [self.f_star[i], self.F_star[i], self.phi_eps[i]] + list(self.y_argmax[i])
            w.writerow([f"{float(v):.17g}" for v in vals])
        return buf.getvalue() if out is None else None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _eval(fn, x, y):
    """Evaluate fn on broadcast batches; x (..., n), y (..., m) -> (value, grad_y)."""
    shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    xb = np.broadcast_to(x, shape + x.shape[-1:])
    yb = np.broadcast_to(y, shape + y.shape[-1:])
    v, _, gy = fn(xb, yb)
    return np.broadcast_to(np.asarray(v, dtype=float), shape), np.asarray(gy, dtype=float)


def _axis_grid(lo, hi, k):
    return [np.linspace(a, b, k) for a, b in zip(lo, hi)]


def _tensor(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _estimate_curvature(fn, prob, xs, samples=2000):
    """Sampled Lipschitz constant of grad_y fn, inflated by 1.5 (deterministic)."""
    rng = np.random.default_rng(0)
    lo, hi = prob.Y.lo, prob.Y.hi
    idx = np.linspace(0, xs.shape[0] - 1, min(5, xs.shape[0])).astype(int)
    best = 0.0
    for i in idx:
        y1 = lo + (hi - lo) * rng.random((samples, prob.m))
        y2 = y1 + 1e-3 * (hi - lo) * rng.standard_normal((samples, prob.m))
        y2 = prob.Y.project(y2)
        d = np.linalg.norm(y1 - y2, axis=-1)
        ok = d > 0
        _, g1 = _eval(fn, xs[i], y1)
        _, g2 = _eval(fn, xs[i], y2)
        q = np.linalg.norm(g1 - g2, axis=-1)[ok] / d[ok]
        if q.size:
            best = max(best, float(np.max(q)))
    return 1.5 * best if best > 0 else 1.0


def _bisect_into(prob, xs, y_ok, y_try, bound, iters=60):
    """Largest point on [y_ok, y_try] with f <= bound (y_ok feasible), vectorised."""
    lo = np.zeros(y_ok.shape[0])
    hi = np.ones(y_ok.shape[0])
    d = y_try - y_ok
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fv, _ = _eval(prob.f, xs, y_ok + mid[:, None] * d)
        ok = fv <= bound
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return y_ok + lo[:, None] * d


def _descent_polish(prob, xs, y, fy, step, n_steps):
    """Monotone projected gradient descent on f(x, .) for every row at once."""
    steps = np.full(y.shape[0], step)
    for _ in range(n_steps):
        _, g = _eval(prob.f, xs, y)
        y_new = prob.Y.project(y - steps[:, None] * g)
        f_new, _ = _eval(prob.f, xs, y_new)
        better = f_new <= fy
        moved = np.max(np.abs(np.where(better[:, None], y_new - y, 0.0)))
        y = np.where(better[:, None], y_new, y)
        fy = np.where(better, f_new, fy)
        steps = np.where(better, steps, 0.5 * steps)
        if moved == 0.0 and np.all(steps < 1e-30):
            break
        if moved < 1e-16 and np.all(better):
            break
    return y, fy


def _ascent_polish(prob, xs, y, Fy, bound, step, n_steps):
    """Monotone projected ascent on F(x, .) kept inside {f <= bound}."""
    steps = np.full(y.shape[0], step)
    for _ in range(n_steps):
        _, g = _eval(prob.F, xs, y)
        y_try = prob.Y.project(y + steps[:, None] * g)
        f_try, _ = _eval(prob.f, xs, y_try)
        out = f_try > bound
        if np.any(out):
            y_try[out] = _bisect_into(prob, xs[out], y[out], y_try[out], bound[out])
        F_new, _ = _eval(prob.F, xs, y_try)
        f_new, _ = _eval(prob.f, xs, y_try)
        better = (F_new >= Fy) & (f_new <= bound)
        moved = np.max(np.abs(np.where(better[:, None], y_try - y, 0.0)))
        y = np.where(better[:, None], y_try, y)
        Fy = np.where(better, F_new, Fy)
        steps = np.where(better, steps, 0.5 * steps)
        if moved < 1e-16 and np.all(better):
            break
        if moved == 0.0 and np.all(steps < 1e-30):
            break
    return y, Fy


def _local_offsets(half_width, m):
    axes = [np.linspace(-h, h, _LOCAL_POINTS) for h in half_width]
    return _tensor(axes)  # (P, m)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _coarse_chunk(prob, xs, ygrid):
    """Grid minimum of f, then grid maximum of F over the eps-sublevel set."""
    fv, _ = _eval(prob.f, xs[:, None, :], ygrid[None, :, :])
    imin = np.argmin(fv, axis=1)
    fmin = fv[np.arange(xs.shape[0]), imin]
    Fv, _ = _eval(prob.F, xs[:, None, :], ygrid[None, :, :])
    masked = np.where(fv <= fmin[:, None] + prob.eps, Fv, -np.inf)
    imax = np.argmax(masked, axis=1)
    return ygrid[imin], fmin, ygrid[imax]


def _solve_points(prob, xs, grid, alpha, ascent_step, workers):
    m = prob.m
    k = grid.y_points_per_dim
    ygrid = _tensor(_axis_grid(prob.Y.lo, prob.Y.hi, k))
    N = xs.shape[0]
    chunk = max(1, _CHUNK_ELEMENTS // ygrid.shape[0])
    bounds = [(s, min(N, s + chunk)) for s in range(0, N, chunk)]

    def run(b):
        return _coarse_chunk(prob, xs[b[0]:b[1]], ygrid)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    y_min = np.concatenate([p[0] for p in parts])
    f_min = np.concatenate([p[1] for p in parts])
    y_max = np.concatenate([p[2] for p in parts])

    # local refinement of the lower minimum
    half = (prob.Y.hi - prob.Y.lo) / (k - 1)
    offsets = [_local_offsets(half / 10**r, m) for r in range(grid.refine_rounds)]
    for off in offsets:
        cand = prob.Y.project(y_min[:, None, :] + off[None, :, :])
        fv, _ = _eval(prob.f, xs[:, None, :], cand)
        i = np.argmin(fv, axis=1)
        fbest = fv[np.arange(N), i]
        take = fbest < f_min
        y_min = np.where(take[:, None], cand[np.arange(N), i], y_min)
        f_min = np.where(take, fbest, f_min)
    y_min, f_star = _descent_polish(prob, xs, y_min, f_min, alpha, POLISH_STEPS)

    bound = f_star + prob.eps
    # the lower minimiser itself is always admissible, so the slice is never empty
    F_grid, _ = _eval(prob.F, xs, y_max)
    f_grid, _ = _eval(prob.f, xs, y_max)
    F_lo, _ = _eval(prob.F, xs, y_min)
    use_grid = (f_grid <= bound) & (F_grid >= F_lo)
    y_max = np.where(use_grid[:, None], y_max, y_min)
    F_max = np.where(use_grid, F_grid, F_lo)
    for off in offsets:
        cand = prob.Y.project(y_max[:, None, :] + off[None, :, :])
        Fv, _ = _eval(prob.F, xs[:, None, :], cand)
        fv, _ = _eval(prob.f, xs[:, None, :], cand)
        Fv = np.where(fv <= bound[:, None], Fv, -np.inf)
        i = np.argmax(Fv, axis=1)
        Fbest = Fv[np.arange(N), i]
        take = Fbest > F_max
        y_max = np.where(take[:, None], cand[np.arange(N), i], y_max)
        F_max = np.where(take, Fbest, F_max)
    y_max, F_max = _ascent_polish(prob, xs, y_max, F_max, bound, ascent_step, POLISH_STEPS)

    f_check, _ = _eval(prob.f, xs, y_max)
    if not np.all(np.isfinite(F_max)) or np.any(f_check > bound):
        raise OracleError("pessimistic maximiser left the eps-sublevel set")
    return f_star, y_min, F_max, y_max


def _step_sizes(prob, xs, lipschitz):
    if lipschitz is not None and lipschitz.L1 > 0:
        alpha = 1.0 / lipschitz.L1
    else:
        alpha = 1.0 / _estimate_curvature(prob.f, prob, xs)
    if lipschitz is not None and lipschitz.h1 > 0:
        ascent = 1.0 / lipschitz.h1
    else:
        ascent = 1.0 / _estimate_curvature(prob.F, prob, xs)
    return alpha, ascent


def _x_grid(prob, k):
    return _tensor(_axis_grid(prob.X.lo, prob.X.hi, k))


def oracle_sweep(prob: BilevelProblem, grid: Optional[GridSpec] = None,
                 lipschitz: Optional[LipschitzSpec] = None, workers=None):
    """Tabulate f_star, phi_eps and the pessimistic responses over an X grid.

    The global minimiser of phi_eps is then refined by ``refine_rounds`` local
    x grids around the incumbent (each one ten times finer).
    """
    grid = grid or GridSpec()
    workers = workers or os.cpu_count() or 1
    xs = _x_grid(prob, grid.x_points)
    alpha, ascent = _step_sizes(prob, xs, lipschitz)
    f_star, y_min, F_star, y_max = _solve_points(prob, xs, grid, alpha, ascent, workers)

    i = int(np.argmin(F_star))
    phi_min, x_best = float(F_star[i]), xs[i].copy()
    half = (prob.X.hi - prob.X.lo) / (grid.x_points - 1)
    for r in range(grid.refine_rounds):
        w = half / 10**r
        xs_loc = prob.X.project(x_best[None, :] + _tensor([np.linspace(-h, h, _LOCAL_POINTS) for h in w]))
        _, _, F_loc, _ = _solve_points(prob, xs_loc, grid, alpha, ascent, 1)
        j = int(np.argmin(F_loc))
        if F_loc[j] < phi_min:
            phi_min, x_best = float(F_loc[j]), xs_loc[j].copy()

    return OracleResult(
        x=xs, f_star=f_star, F_star=F_star, phi_eps=F_star.copy(), y_argmin=y_min,
        y_argmax=y_max, phi_min=phi_min, x_argmin=x_best, grid=grid,
    )


@dataclass(frozen=True)
class OraclePoint:
    f_star: float
    F_star: float
    y_argmin: np.ndarray
    y_argmax: np.ndarray


def oracle_point(prob: BilevelProblem, x, grid: Optional[GridSpec] = None,
                 lipschitz: Optional[LipschitzSpec] = None):
    """The oracle at a single upper-level point."""
    grid = grid or GridSpec()
    x = as_vector(x, prob.n, "x")
    xs = x[None, :]
    alpha, ascent = _step_sizes(prob, xs, lipschitz)
    f_star, y_min, F_star, y_max = _solve_points(prob, xs, grid, alpha, ascent, 1)
    return OraclePoint(float(f_star[0]), float(F_star[0]), y_min[0], y_max[0])


def point_oracle(prob, grid=None, lipschitz=None):
    """Callable x -> (f_star, F_star), the form the stationarity report expects."""
    def oracle(x):
        p = oracle_point(prob, x, grid, lipschitz)
        return p.f_star, p.F_star
    return oracle


def estimate_value_bounds(prob: BilevelProblem, x_points=101, y_points_per_dim=101):
    """Grid extrema of F and |f| over X x Y, corners included.

    Grids can miss interior extrema, hence ``estimated=True``.
    """
    xs = _x_grid(prob, x_points)
    ys = _tensor(_axis_grid(prob.Y.lo, prob.Y.hi, y_points_per_dim))
    lo, hi, fabs = math.inf, -math.inf, 0.0
    for s in range(0, xs.shape[0], max(1, _CHUNK_ELEMENTS // ys.shape[0])):
        xc = xs[s:s + max(1, _CHUNK_ELEMENTS // ys.shape[0])]
        Fv, _ = _eval(prob.F, xc[:, None, :], ys[None, :, :])
        fv, _ = _eval(prob.f, xc[:, None, :], ys[None, :, :])
        lo, hi = min(lo, float(Fv.min())), max(hi, float(Fv.max()))
        fabs = max(fabs, float(np.abs(fv).max()))
    return ValueBounds(min_F=lo, max_F=hi, max_abs_f=fabs, estimated=True)


__all__ = [
    "GridSpec", "OracleResult", "OraclePoint", "oracle_sweep", "oracle_point",
    "point_oracle", "estimate_value_bounds",
]
