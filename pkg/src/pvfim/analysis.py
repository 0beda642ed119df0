"""Theory constants, step-size bounds and stationarity certificates.

The constants depend on the structure constants of a problem (a
:class:`~pvfim.problem.LipschitzSpec`) and on the number J of lower-level
descent steps. Two families share short names in the literature: gradient
bounds of f_J (stored as ``M0_J``, ``M1_J``, ``M2_J``) and global value bounds
of F and f (stored as ``value_min_F``, ``value_max_F``, ``value_max_abs_f``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from pvfim.errors import InvalidArgumentError, NumericalFailure, OracleError, PvfimError
from pvfim.problem import BilevelProblem, LipschitzSpec, as_vector


@dataclass(frozen=True)
class ConstantsReport:
    J: int
    l2: float
    sigma: Optional[float]
    M0_J: float
    M1_J: float
    M2_J: float
    L11: float
    L12: float
    L_G: float
    contraction: float  # mu / L_G
    L_phi: float
    value_min_F: float
    value_max_F: float
    value_max_abs_f: float
    value_bounds_estimated: bool
    M3: float
    l1_J: float
    lbar_J: float
    tau_bound: float
    T_min: float
    K_min: float
    spec: LipschitzSpec = field(repr=False)

    def rows(self):
        """(name, value) pairs in a fixed order, for reports."""
        names = (
            "J", "l2", "sigma", "M0_J", "M1_J", "M2_J", "L11", "L12", "L_G", "contraction",
            "L_phi", "value_min_F", "value_max_F", "value_max_abs_f", "value_bounds_estimated",
            "M3", "l1_J", "lbar_J", "tau_bound", "T_min", "K_min",
        )
        return [(n, getattr(self, n)) for n in names]

    def step_sizes(self):
        """(alpha, beta, eta) used by the theory: 1/L1, 1/L_G, 1/(L_phi/2 + l2)."""
        return 1.0 / self.spec.L1, 1.0 / self.L_G, 1.0 / (self.L_phi / 2 + self.l2)

    def admits(self, tau, T, K):
        """Whether (tau, T, K) satisfy the barrier-weight and iteration-count bounds."""
        if self.sigma is None:
            raise InvalidArgumentError("report was computed without sigma")
        return {
            "tau": tau <= self.tau_bound,
            "T": T >= self.T_min,
            "K": K >= self.K_min,
        }


def compute_constants(spec: LipschitzSpec, J, sigma=None, l2=0.5):
    spec.validate()
    if int(J) != J or J < 1:
        raise InvalidArgumentError("J must be a positive integer", J=J)
    J = int(J)
    if sigma is not None and not (0 < sigma < 1):
        raise InvalidArgumentError("sigma must lie in (0, 1)", sigma=sigma)
    if not (0 < l2 < 1):
        raise InvalidArgumentError("l2 must lie in (0, 1)", l2=l2)

    h0, h1, L0, L1, L2, L3 = spec.h0, spec.h1, spec.L0, spec.L1, spec.L2, spec.L3
    mu, H, M, c, eps = spec.mu, spec.H, spec.M, spec.c, spec.eps
    if L1 <= 0:
        raise InvalidArgumentError("L1 must be positive", L1=L1)

    # gradient bounds of x -> f_J(x)
    M0_J = float(J)
    M1_J = L0 * (J + 1)
    M2_J = L1 * (1 + J) ** 2 + (L0 * J / L1) * (1 + J) * (L2 + L3 * J)

    L11 = h1 + (M2_J + L1) / c + (M1_J + L0) ** 2 / c**2
    L12 = h1 + L1 / c + L0 * (M1_J + L0) / c**2
    L_G = h1 + 2 * L1 / c + 4 * L0**2 / c**2
    if mu >= L_G:
        raise InvalidArgumentError("contraction needs mu < L_G", mu=mu, L_G=L_G)
    L_phi = L11 * (1 + L12 / mu)

    vb = spec.value_bounds
    if vb is None:
        vmin = vmax = vabs = M3 = math.nan
        estimated = False
    else:
        vmin, vmax, vabs, estimated = vb.min_F, vb.max_F, vb.max_abs_f, vb.estimated
        M3 = max(abs(vmin + math.log(c)), abs(vmax + math.log(2 * vabs + eps)))

    l1_J = max(1.0, L11 * H, L_G)
    lbar_J = max((2 * H * (L_phi / 2 + l2) + h0 + 4 * L0 / c) ** 2 / l2, l1_J)

    if sigma is None:
        tau_bound = T_min = K_min = math.nan
    else:
        s2 = sigma * sigma
        tau_bound = c * s2 / (36 * H * J * L0 * lbar_J)
        T_min = 9 * M3 * lbar_J / s2
        K_min = 2 * math.log(s2 / (36 * M * lbar_J**2)) / math.log1p(-mu / L_G)

    return ConstantsReport(
        J=J, l2=l2, sigma=sigma, M0_J=M0_J, M1_J=M1_J, M2_J=M2_J, L11=L11, L12=L12,
        L_G=L_G, contraction=mu / L_G, L_phi=L_phi, value_min_F=vmin, value_max_F=vmax,
        value_max_abs_f=vabs, value_bounds_estimated=estimated, M3=M3, l1_J=l1_J,
        lbar_J=lbar_J, tau_bound=tau_bound, T_min=T_min, K_min=K_min, spec=spec,
    )


# ---------------------------------------------------------------------------
# stationarity certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tolerances:
    grad: float = 1e-3
    lower: float = 1e-6
    upper: float = 1e-3


# multipliers of the Fritz-John instance this certificate checks:
# weight 1 on the upper objective, 2 on the value-function constraint, 0 on the other
CERTIFICATE_MULTIPLIERS = (1.0, 2.0, 0.0)


@dataclass(frozen=True)
class StationarityReport:
    grad_F_x_norm: float
    grad_F_y_norm: float
    lower_residual: float
    upper_residual: float
    tolerances: Tolerances
    certificate_multipliers: Tuple[float, float, float] = CERTIFICATE_MULTIPLIERS

    @property
    def is_stationary(self):
        tol = self.tolerances
        return (
            self.grad_F_x_norm <= tol.grad
            and self.grad_F_y_norm <= tol.grad
            and self.lower_residual <= tol.lower
            and self.upper_residual <= tol.upper
        )


def stationarity_report(prob: BilevelProblem, x, y, oracle: Callable, tolerances=None):
    """Check grad F(x, y) = 0 together with feasibility of y for the relaxed lower level.

    ``oracle(x)`` must return ``(f_star, F_star)``: the lower optimal value and
    the pessimistic value at x.
    lower_residual = f(x, y) - f_star - eps (<= 0 when y is eps-optimal);
    upper_residual = F_star - F(x, y) (<= 0 when y attains the pessimistic value).
    """
    tol = tolerances or Tolerances()
    x = as_vector(x, prob.n, "x")
    y = as_vector(y, prob.m, "y")
    if not prob.X.contains(x):
        raise InvalidArgumentError("x must lie in X")
    if not prob.Y.contains(y):
        raise InvalidArgumentError("y must lie in Y")
    try:
        f_star, F_star = oracle(x)
    except PvfimError as err:
        raise err.with_context(x=x.tolist())
    except Exception as err:
        raise OracleError(f"oracle failed: {err}", x=x.tolist()) from err
    Fv, Fx, Fy = prob.F(x, y)
    fv = float(prob.f(x, y)[0])
    return StationarityReport(
        grad_F_x_norm=float(np.linalg.norm(Fx)),
        grad_F_y_norm=float(np.linalg.norm(Fy)),
        lower_residual=fv - float(f_star) - prob.eps,
        upper_residual=float(F_star) - float(Fv),
        tolerances=tol,
    )


def fd_gradient_check(fn, point, step=1e-6):
    """Compare the analytic gradient of ``fn`` with central differences.

    ``fn(p)`` returns ``(value, grad)``. The relative error of a coordinate is
    |analytic - fd| / max(|analytic|, |fd|, 1).
    Returns ``(analytic_grad, fd_grad, max_rel_err)``.
    """
    p = as_vector(point, name="point")
    value, grad = fn(p)
    grad = np.asarray(grad, dtype=float).reshape(p.shape)
    if not (math.isfinite(float(value)) and np.all(np.isfinite(grad))):
        raise NumericalFailure("non-finite evaluation at the base point")
    fd = np.empty_like(p)
    for i in range(p.shape[0]):
        e = np.zeros_like(p)
        e[i] = step
        vp = float(fn(p + e)[0])
        vm = float(fn(p - e)[0])
        if not (math.isfinite(vp) and math.isfinite(vm)):
            raise NumericalFailure("non-finite evaluation in finite differences", coordinate=i)
        fd[i] = (vp - vm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1.0)
    err = float(np.max(np.abs(grad - fd) / denom)) if p.size else 0.0
    return grad, fd, err
