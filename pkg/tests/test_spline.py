from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize, stats

from hhsmm.emissions import EmissionError, Nonpar, emission_from_dict
from hhsmm.emissions.spline import (SplineEmissionParams, bspline_basis, bspline_design, dnonpar, knot_spacing,
                                    nonpar_mstep, penalized_objective, rnonpar, second_difference,
                                    simplex_newton, uniform_spline_params)


def padded(K, lo, hi):
    h = knot_spacing(2 * K + 1, lo, hi)
    return lo - 3 * h, hi + 3 * h


def trapezoid_columns(K, lo, hi, n=10_001):
    a, b = padded(K, lo, hi)
    g = np.linspace(a, b, n)
    return np.trapezoid(bspline_basis(g, K, (lo, hi)), g, axis=0)


@pytest.mark.parametrize("K, lo, hi", [(2, 0.0, 1.0), (5, -3.0, 4.0), (15, 10.0, 10.5)])
def test_columns_integrate_to_one(K, lo, hi):
    np.testing.assert_allclose(trapezoid_columns(K, lo, hi), 1.0, atol=1e-8)


def test_interior_support_and_errors():
    B = bspline_design([0.37], 11, 0.0, 1.0)
    assert B.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.count_nonzero(B) <= 4
    a, b = padded(5, 0.0, 1.0)
    bspline_basis([a, b], 5, (0, 1))
    with pytest.raises(EmissionError):
        bspline_basis([b + 0.01], 5, (0, 1))
    with pytest.raises(EmissionError):
        bspline_basis([0.5], 1, (0, 1))
    with pytest.raises(EmissionError):
        bspline_basis([0.5], 3, (1, 1))


@given(st.floats(-50, 50), st.floats(0.1, 10), st.integers(2, 12))
def test_translation_equivariance(c, width, K):
    pts = np.linspace(0.0, 1.0, 15) * width
    np.testing.assert_allclose(bspline_basis(pts + c, K, (c, c + width)),
                               bspline_basis(pts, K, (0.0, width)), atol=1e-9 / width)


def _params(a, K=4, rng=((0.0, 1.0),)):
    return SplineEmissionParams(K, rng, np.asarray(a, dtype=float).reshape(1, len(rng), -1))


def test_point_mass_is_basis_column():
    K = 4
    a = np.zeros(2 * K + 1)
    a[3] = 1.0
    x = np.linspace(-0.2, 1.2, 9)
    got = np.array([dnonpar([v], 0, _params(a)) for v in x])
    np.testing.assert_allclose(got, np.maximum(bspline_basis(x, K, (0, 1))[:, 3], 1e-300), rtol=1e-12)


def test_uniform_coefficients_integrate_to_one():
    K = 6
    a, b = padded(K, 0.0, 1.0)
    g = np.linspace(a, b, 10_001)
    f = dnonpar(g[:, None], 0, _params(np.full(2 * K + 1, 1 / (2 * K + 1)), K))
    assert abs(np.trapezoid(f, g) - 1) <= 1e-8


def test_two_dimensions_multiply():
    rng = np.random.default_rng(0)
    K = 3
    a = rng.dirichlet(np.ones(2 * K + 1), size=2)
    both = SplineEmissionParams(K, [(0, 1), (-2, 2)], a[None])
    x = np.array([0.3, 1.1])
    one = _params(a[0], K, ((0, 1),))
    two = _params(a[1], K, ((-2, 2),))
    assert dnonpar(x, 0, both) == pytest.approx(dnonpar(x[:1], 0, one) * dnonpar(x[1:], 0, two), rel=1e-14)


def test_outside_support_floor_and_missing():
    p = _params(np.full(9, 1 / 9))
    assert dnonpar([100.0], 0, p) == pytest.approx(1e-300, rel=1e-12)
    both = SplineEmissionParams(4, [(0, 1), (0, 1)], np.full((1, 2, 9), 1 / 9))
    assert dnonpar([0.5, np.nan], 0, both) == pytest.approx(dnonpar([0.5], 0, p), rel=1e-14)


def _fit_normal(n=5000, K=15, seed=0):
    x = np.random.default_rng(seed).normal(size=(n, 1))
    params = uniform_spline_params(x, 1, K)
    for _ in range(5):
        params = nonpar_mstep(x, np.ones((n, 1)), params)
    return params


def test_standard_normal_recovery():
    params = _fit_normal()
    g = np.linspace(-3, 3, 601)
    err = np.max(np.abs(dnonpar(g[:, None], 0, params) - stats.norm.pdf(g)))
    assert err <= 0.05
    a, b = padded(params.K, *params.range[0])
    grid = np.linspace(a, b, 20_001)
    assert abs(np.trapezoid(dnonpar(grid[:, None], 0, params), grid) - 1) <= 1e-6


def _linear_profile_oracle(Phi):
    """Best simplex coefficients of the form ``a_k = 1/n + d*(k - c)`` by 1-D search."""
    n = Phi.shape[1]
    k = np.arange(n) - (n - 1) / 2
    bound = 1 / (n * k.max())
    res = optimize.minimize_scalar(lambda d: -np.sum(np.log(Phi @ (1 / n + d * k))),
                                   bounds=(-bound, bound), method="bounded", options={"xatol": 1e-14})
    return 1 / n + res.x * k


@pytest.mark.parametrize("n", [40, 400])
def test_infinite_smoothing_limit(n):
    x = np.random.default_rng(1).normal(size=n)
    Phi = bspline_basis(x, 6, (x.min(), x.max()))
    a, _ = simplex_newton(Phi, np.ones(n), 1e12, np.full(13, 1 / 13), max_iter=200, tol=1e-15)
    da = second_difference(13) @ a
    assert np.max(np.abs(da)) < 1e-8
    np.testing.assert_allclose(a, _linear_profile_oracle(Phi), atol=1e-6)
    if n <= 40:
        # the residual penalty scales like n^2 / lambda
        assert 0.5 * 1e12 * da @ da < 1e-6


def test_inner_iterations_monotone():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.normal(-2, 0.5, 300), rng.gamma(2, 1, 200)])
    w = rng.random(x.size)
    lo, hi = x.min(), x.max()
    Phi = bspline_basis(x, 8, (lo, hi))
    for lam in (0.0, 1.0, 100.0):
        _, trace = simplex_newton(Phi, w, lam, np.full(17, 1 / 17))
        assert np.all(np.diff(trace) >= -1e-9)


def test_weight_scaling_invariance_without_penalty():
    rng = np.random.default_rng(3)
    x = rng.normal(size=300)
    w = rng.random(300)
    Phi = bspline_basis(x, 5, (x.min(), x.max()))
    a1, _ = simplex_newton(Phi, w, 0.0, np.full(11, 1 / 11), max_iter=200, tol=1e-14)
    a2, _ = simplex_newton(Phi, 2 * w, 0.0, np.full(11, 1 / 11), max_iter=200, tol=1e-14)
    np.testing.assert_allclose(a1, a2, atol=1e-6)


def test_newton_beats_perturbations():
    rng = np.random.default_rng(4)
    x = rng.normal(size=500)
    Phi = bspline_basis(x, 5, (x.min(), x.max()))
    D = second_difference(11)
    a, _ = simplex_newton(Phi, np.ones(500), 0.5, np.full(11, 1 / 11), max_iter=200, tol=1e-14)
    best = penalized_objective(a, Phi, np.ones(500), 0.5, D)
    for _ in range(50):
        b = np.clip(a + 1e-3 * rng.normal(size=11), 0, None)
        b /= b.sum()
        assert penalized_objective(b, Phi, np.ones(500), 0.5, D) <= best + 1e-9


def test_mstep_errors_and_lambda_nonnegative():
    x = np.random.default_rng(5).normal(size=(50, 1))
    params = uniform_spline_params(x, 2, 4)
    out = nonpar_mstep(x, np.column_stack([np.ones(50), np.full(50, 0.5)]), params)
    assert np.all(out.lam >= 0)
    np.testing.assert_allclose(out.a.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(out.a >= 0)
    with pytest.raises(EmissionError):
        nonpar_mstep(x, np.column_stack([np.ones(50), np.zeros(50)]), params)


def test_sampler_matches_density():
    rng = np.random.default_rng(6)
    a = rng.dirichlet(np.ones(9))
    params = _params(a)
    draws = np.array([rnonpar(0, params, rng)[0] for _ in range(20_000)])
    cdf = lambda v: np.array([np.trapezoid(dnonpar(g[:, None], 0, params), g)
                              for g in (np.linspace(-1, u, 2001) for u in np.atleast_1d(v))])
    grid = np.linspace(-0.3, 1.3, 9)
    emp = np.array([np.mean(draws <= g) for g in grid])
    np.testing.assert_allclose(emp, cdf(grid), atol=0.015)


def test_json_round_trip():
    x = np.random.default_rng(7).normal(size=(40, 2))
    em = Nonpar(uniform_spline_params(x, 2, 3))
    back = emission_from_dict(em.to_dict())
    np.testing.assert_array_equal(back.log_density(x), em.log_density(x))
    assert em.to_dict()["family"] == "nonpar"
