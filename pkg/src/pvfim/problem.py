"""Bilevel problem instances, box feasible sets and structure constants.

Objective functions follow one evaluation contract::

    value, grad_x, grad_y = fn(x, y)

with ``x`` of shape ``(..., n)`` and ``y`` of shape ``(..., m)``.  Implementations
must be pure and should broadcast over leading axes; the solver calls them with
single points and the grid oracle calls them with whole batches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from pvfim.errors import InvalidArgumentError

SmoothFunction = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]


def as_vector(v, dim=None, name="vector"):
    """Validate and convert ``v`` to a finite 1-D float array."""
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be one-dimensional", shape=arr.shape)
    if dim is not None and arr.shape[0] != dim:
        raise InvalidArgumentError(f"{name} has wrong dimension", expected=dim, got=arr.shape[0])
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = as_vector(self.lo, name="lo")
        hi = as_vector(self.hi, dim=lo.shape[0], name="hi")
        if np.any(lo > hi):
            raise InvalidArgumentError("box is empty: lo > hi in some coordinate")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.shape[0]

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def project(self, p):
        return np.minimum(np.maximum(p, self.lo), self.hi)

    def contains(self, p):
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    def is_interior(self, p):
        return bool(np.all(p > self.lo) and np.all(p < self.hi))

    def max_norm(self):
        """sup of the Euclidean norm over the box (attained at a corner)."""
        return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))


def project_box(p, S: Box):
    """Euclidean projection of ``p`` onto the box ``S`` (coordinatewise clamp)."""
    p = as_vector(p, dim=S.dim, name="p")
    return S.project(p)


@dataclass(frozen=True)
class BilevelProblem:
    """min_x max_{y in S_eps(x)} F(x, y) with S_eps(x) = {y in Y : f(x, y) <= f*(x) + eps}."""

    F: SmoothFunction
    f: SmoothFunction
    X: Box
    Y: Box
    eps: float
    name: str = "custom"

    def __post_init__(self):
        if not (math.isfinite(self.eps) and self.eps > 0):
            raise InvalidArgumentError("eps must be a positive finite number", eps=self.eps)

    @property
    def n(self):
        return self.X.dim

    @property
    def m(self):
        return self.Y.dim


@dataclass(frozen=True)
class ValueBounds:
    """Global extrema over X x Y needed by the bound on |phi|.

    ``estimated`` marks bounds taken from a grid sweep rather than a closed form;
    a grid can under-approximate true extrema.
    """

    min_F: float
    max_F: float
    max_abs_f: float
    estimated: bool = False


@dataclass(frozen=True)
class LipschitzSpec:
    """Structure constants of a problem.

    h0, h1 bound F and grad F; L0..L3 bound f, grad f, grad_yx f and grad_yy f;
    mu is the strong-concavity modulus of F(x, .); H and M bound ||x|| and ||y||;
    c is the barrier margin, required to satisfy c <= min(eps/2, L0*H, 1).
    """

    h0: float
    h1: float
    L0: float
    L1: float
    L2: float
    L3: float
    mu: float
    H: float
    M: float
    c: float
    eps: float
    value_bounds: Optional[ValueBounds] = field(default=None)

    def validate(self):
        for name in ("h0", "h1", "L0", "L1", "L2", "L3"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidArgumentError(f"{name} must be finite and nonnegative", value=v)
        if not self.mu > 0:
            raise InvalidArgumentError("mu must be positive", mu=self.mu)
        if not self.H > 0:
            raise InvalidArgumentError("H must be positive", H=self.H)
        if not self.M > 1:
            raise InvalidArgumentError("M must exceed 1", M=self.M)
        if not self.c > 0:
            raise InvalidArgumentError("c must be positive", c=self.c)
        if not self.eps > 0:
            raise InvalidArgumentError("eps must be positive", eps=self.eps)
        if self.c > min(self.eps / 2, self.L0 * self.H, 1.0):
            raise InvalidArgumentError(
                "c must satisfy c <= min(eps/2, L0*H, 1)", c=self.c, eps=self.eps
            )
        return self


# ---------------------------------------------------------------------------
# example3: X = [pi/2, 4pi], Y = [-40, 40] x [-20, 20]
#   F(x, y) = -(y1 - x)^2 - (y2 - x/2)^2 + sin x
#   f(x, y) = (y1 - 2 y2)^2 + x
# ---------------------------------------------------------------------------

EXAMPLE3_X = (math.pi / 2, 4 * math.pi)
EXAMPLE3_Y_LO = (-40.0, -20.0)
EXAMPLE3_Y_HI = (40.0, 20.0)


def example3_upper(x, y):
    xs = x[..., 0]
    d1 = y[..., 0] - xs
    d2 = y[..., 1] - 0.5 * xs
    value = -d1 * d1 - d2 * d2 + np.sin(xs)
    grad_x = (2.0 * d1 + d2 + np.cos(xs))[..., None]
    grad_y = np.stack((-2.0 * d1, -2.0 * d2), axis=-1)
    return value, grad_x, grad_y


def example3_lower(x, y):
    xs = x[..., 0]
    r = y[..., 0] - 2.0 * y[..., 1]
    value = r * r + xs
    grad_x = np.ones_like(x)
    grad_y = np.stack((2.0 * r, -4.0 * r), axis=-1)
    return value, grad_x, grad_y


def example3_problem(eps=0.5):
    """The synthetic pessimistic bilevel instance with analytic gradients."""
    return BilevelProblem(
        F=example3_upper,
        f=example3_lower,
        X=Box(np.array([EXAMPLE3_X[0]]), np.array([EXAMPLE3_X[1]])),
        Y=Box(np.array(EXAMPLE3_Y_LO), np.array(EXAMPLE3_Y_HI)),
        eps=eps,
        name="example3",
    )


def _interval_abs_max(lo, hi):
    return max(abs(lo), abs(hi))


def example3_lipschitz(eps=0.5, c=0.25):
    """Structure constants of example3.

    Gradient-norm suprema (h0, L0) come from coordinatewise interval bounds over
    X x Y; Hessian-based constants from eigen-decompositions. The Hessian of F
    is affine in s = sin x, so its spectral norm is maximal at s = +-1.
    """
    c = min(c, eps / 2)
    xlo, xhi = EXAMPLE3_X
    (y1lo, y2lo), (y1hi, y2hi) = EXAMPLE3_Y_LO, EXAMPLE3_Y_HI

    # grad F = (2 d1 + d2 + cos x, -2 d1, -2 d2), d1 = y1 - x, d2 = y2 - x/2
    d1 = (y1lo - xhi, y1hi - xlo)
    d2 = (y2lo - xhi / 2, y2hi - xlo / 2)
    gx = _interval_abs_max(2 * d1[0] + d2[0] - 1.0, 2 * d1[1] + d2[1] + 1.0)
    g1 = 2 * _interval_abs_max(*d1)
    g2 = 2 * _interval_abs_max(*d2)
    h0 = math.sqrt(gx**2 + g1**2 + g2**2)

    h1 = 0.0
    for s in (-1.0, 1.0):
        hess_F = np.array([[-2.5 - s, 2.0, 1.0], [2.0, -2.0, 0.0], [1.0, 0.0, -2.0]])
        h1 = max(h1, float(np.max(np.abs(np.linalg.eigvalsh(hess_F)))))

    # grad f = (1, 2r, -4r) with r = y1 - 2 y2
    r_max = _interval_abs_max(y1lo - 2 * y2hi, y1hi - 2 * y2lo)
    L0 = math.sqrt(1.0 + (2 * r_max) ** 2 + (4 * r_max) ** 2)
    hess_f = np.array([[0.0, 0.0, 0.0], [0.0, 2.0, -4.0], [0.0, -4.0, 8.0]])
    L1 = float(np.max(np.abs(np.linalg.eigvalsh(hess_f))))
    # grad_yx f and grad_yy f are constant
    L2 = 0.0
    L3 = 0.0
    mu = float(-np.max(np.linalg.eigvalsh(np.array([[-2.0, 0.0], [0.0, -2.0]]))))

    H = max(abs(xlo), abs(xhi))
    M = math.hypot(max(abs(y1lo), abs(y1hi)), max(abs(y2lo), abs(y2hi)))

    # F is decreasing in x at y = (-40, -20), and that corner maximises both squares
    min_F = -((y1lo - xhi) ** 2) - (y2lo - xhi / 2) ** 2
    bounds = ValueBounds(min_F=min_F, max_F=1.0, max_abs_f=r_max**2 + xhi)
    return LipschitzSpec(
        h0=h0, h1=h1, L0=L0, L1=L1, L2=L2, L3=L3, mu=mu, H=H, M=M, c=c, eps=eps,
        value_bounds=bounds,
    ).validate()
