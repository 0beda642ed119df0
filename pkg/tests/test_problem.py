import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvfim.errors import InvalidArgumentError
from pvfim.problem import BilevelProblem, Box, LipschitzSpec, example3_lipschitz, project_box

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_clamp_example():
    box = Box(np.zeros(2), np.ones(2))
    assert project_box([5, -3], box).tolist() == [1.0, 0.0]


def test_clamp_at_lower_box(prob):
    assert project_box([41, 0], prob.Y).tolist() == [40.0, 0.0]


def test_inside_point_unchanged(prob):
    p = np.array([1.25, -3.5])
    assert np.array_equal(project_box(p, prob.Y), p)


def test_dimension_mismatch_rejected(prob):
    with pytest.raises(InvalidArgumentError):
        project_box([1.0, 2.0, 3.0], prob.Y)


def test_nonfinite_rejected(prob):
    with pytest.raises(InvalidArgumentError):
        project_box([math.nan, 0.0], prob.Y)


def test_empty_box_rejected():
    with pytest.raises(InvalidArgumentError):
        Box(np.array([1.0]), np.array([0.0]))


def test_box_is_read_only(prob):
    with pytest.raises(ValueError):
        prob.Y.lo[0] = 3.0


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=2, max_size=2))
def test_projection_idempotent(p):
    box = Box(np.array([-40.0, -20.0]), np.array([40.0, 20.0]))
    once = project_box(p, box)
    assert np.array_equal(project_box(once, box), once)
    assert box.contains(once)


def test_projection_nonexpansive(prob, rng):
    p = rng.uniform(-100, 100, size=(1000, 2))
    q = rng.uniform(-100, 100, size=(1000, 2))
    d_proj = np.linalg.norm(prob.Y.project(p) - prob.Y.project(q), axis=1)
    assert np.all(d_proj <= np.linalg.norm(p - q, axis=1) + 1e-12)


def test_eps_must_be_positive(prob):
    with pytest.raises(InvalidArgumentError):
        BilevelProblem(prob.F, prob.f, prob.X, prob.Y, eps=0.0)


def test_upper_objective_at_maximiser(prob):
    x = 1.5 * math.pi
    v, _, _ = prob.F(np.array([x]), np.array([x, x / 2]))
    assert v == pytest.approx(-1.0, abs=1e-15)


def test_lower_objective_on_zero_set(prob):
    v, _, _ = prob.f(np.array([2.7]), np.array([3.0, 1.5]))
    assert v == 2.7


def test_lower_gradient_example(prob):
    _, _, gy = prob.f(np.array([0.0]), np.array([1.0, 0.0]))
    assert gy.tolist() == [2.0, -4.0]


def _central(fn, x, y, h=1e-6):
    gx = np.array([(fn(x + h * e, y)[0] - fn(x - h * e, y)[0]) / (2 * h) for e in np.eye(1)])
    gy = np.array([(fn(x, y + h * e)[0] - fn(x, y - h * e)[0]) / (2 * h) for e in np.eye(2)])
    return gx, gy


@pytest.mark.parametrize("which", ["F", "f"])
def test_analytic_gradients_match_differences(prob, rng, which):
    fn = getattr(prob, which)
    for _ in range(100):
        x = rng.uniform(prob.X.lo, prob.X.hi)
        y = rng.uniform(prob.Y.lo, prob.Y.hi)
        _, gx, gy = fn(x, y)
        fx, fy = _central(fn, x, y)
        a = np.concatenate([gx, gy])
        d = np.concatenate([fx, fy])
        assert np.max(np.abs(a - d) / np.maximum(np.abs(a), 1.0)) <= 1e-5


def test_batched_evaluation_matches_pointwise(prob, rng):
    xs = rng.uniform(prob.X.lo, prob.X.hi, size=(7, 1))
    ys = rng.uniform(prob.Y.lo, prob.Y.hi, size=(7, 2))
    v, gx, gy = prob.F(xs, ys)
    for i in range(7):
        vi, gxi, gyi = prob.F(xs[i], ys[i])
        assert v[i] == vi and np.array_equal(gx[i], gxi) and np.array_equal(gy[i], gyi)


def test_lipschitz_constants(lip):
    assert lip.c == 0.25
    assert lip.L1 == pytest.approx(10.0, rel=1e-14)
    assert lip.mu == pytest.approx(2.0, rel=1e-14)
    assert lip.H == pytest.approx(4 * math.pi)
    assert lip.M == pytest.approx(math.sqrt(40**2 + 20**2))


def test_curvature_constants_by_hand(lip):
    # lower Hessian in y is [[2, -4], [-4, 8]]: trace 10, determinant 0
    tr, det = 10.0, 0.0
    assert lip.L1 == pytest.approx((tr + math.sqrt(tr * tr - 4 * det)) / 2, rel=1e-14)
    # upper Hessian in y is -2 I
    assert lip.mu == pytest.approx(2.0, rel=1e-14)


def test_lipschitz_sampled_consistency(prob, lip, rng):
    z1 = np.column_stack([rng.uniform(prob.X.lo, prob.X.hi, (1000, 1)), rng.uniform(prob.Y.lo, prob.Y.hi, (1000, 2))])
    z2 = np.column_stack([rng.uniform(prob.X.lo, prob.X.hi, (1000, 1)), rng.uniform(prob.Y.lo, prob.Y.hi, (1000, 2))])
    d = np.linalg.norm(z1 - z2, axis=1)

    def parts(fn, z):
        v, gx, gy = fn(z[:, :1], z[:, 1:])
        return v, np.column_stack([gx, gy])

    for fn, c0, c1 in ((prob.f, lip.L0, lip.L1), (prob.F, lip.h0, lip.h1)):
        v1, g1 = parts(fn, z1)
        v2, g2 = parts(fn, z2)
        assert np.all(np.abs(v1 - v2) / d <= c0)
        assert np.all(np.linalg.norm(g1 - g2, axis=1) / d <= c1 * (1 + 1e-12))


def test_lipschitz_validation_rejects_large_margin(lip):
    bad = LipschitzSpec(**{**lip.__dict__, "c": 0.3})
    with pytest.raises(InvalidArgumentError):
        bad.validate()


def test_value_bounds_are_attained_extrema(prob, lip, rng):
    vb = lip.value_bounds
    x = rng.uniform(prob.X.lo, prob.X.hi, (20000, 1))
    y = rng.uniform(prob.Y.lo, prob.Y.hi, (20000, 2))
    F = prob.F(x, y)[0]
    f = prob.f(x, y)[0]
    assert F.min() >= vb.min_F and F.max() <= vb.max_F
    assert np.abs(f).max() <= vb.max_abs_f
    corner = prob.F(np.array([4 * math.pi]), np.array([-40.0, -20.0]))[0]
    assert corner == pytest.approx(vb.min_F, abs=1e-9)
