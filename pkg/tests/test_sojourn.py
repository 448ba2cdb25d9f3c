from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from hhsmm.sojourn import (SojournError, SojournSpec, fit_sojourn_moments, geometric_pmf,
                           select_sojourn_auto, sojourn_pmf, sojourn_summary, sojourn_survival)


def quad_pmf(pdf, M):
    """Interval masses by adaptive quadrature, renormalized on (0, M]."""
    mass = np.array([integrate.quad(pdf, u - 1, u, epsabs=1e-15, epsrel=1e-13)[0] for u in range(1, M + 1)])
    return mass / mass.sum()


def one_state(type, **params):
    return SojournSpec(type, {k: [v] for k, v in params.items()})


def test_exponential_special_case():
    d = sojourn_pmf(one_state("gamma", shape=1.0, scale=1.0), 0, 50)
    assert d[0] == pytest.approx((1 - np.exp(-1)) / (1 - np.exp(-50)), abs=1e-15)
    assert d[0] == pytest.approx(0.6321206, abs=1e-7)


@pytest.mark.parametrize("spec, dist, M", [
    (one_state("gamma", shape=3.0, scale=10.0), stats.gamma(3, scale=10), 600),
    (one_state("weibull", shape=2.0, scale=5.0), stats.weibull_min(2, scale=5), 40),
    (one_state("lognormal", mu=1.0, sigma=0.5), stats.lognorm(0.5, scale=np.e), 60),
])
def test_discretization_matches_quadrature(spec, dist, M):
    d = sojourn_pmf(spec, 0, M)
    assert abs(d.sum() - 1) <= 1e-12
    np.testing.assert_allclose(d, quad_pmf(dist.pdf, M), atol=1e-10, rtol=0)


def test_nonparametric_identity_and_errors():
    np.testing.assert_array_equal(sojourn_pmf(SojournSpec("nonparametric", {"d": [[0.2, 0.3, 0.5]]}), 0, 3),
                                  [0.2, 0.3, 0.5])
    with pytest.raises(SojournError):
        sojourn_pmf(one_state("gamma", shape=-1.0, scale=1.0), 0, 10)
    with pytest.raises(SojournError):
        SojournSpec("poisson", {})


@given(st.sampled_from(["gamma", "weibull", "lognormal"]), st.floats(0.3, 8), st.floats(0.3, 20),
       st.integers(1, 300))
def test_pmf_sums_to_one(type, a, b, M):
    params = {"mu": np.log(b), "sigma": a / 4} if type == "lognormal" else {"shape": a, "scale": b}
    d = sojourn_pmf(one_state(type, **params), 0, M)
    assert np.all(d >= 0)
    assert abs(d.sum() - 1) <= 1e-12


def test_geometric_examples():
    np.testing.assert_allclose(geometric_pmf(0.7, 3), [0.3, 0.21, 0.147], atol=1e-15)
    np.testing.assert_array_equal(geometric_pmf(0.0, 4), [1, 0, 0, 0])
    assert geometric_pmf(0.5, 20).sum() == pytest.approx(1 - 2.0 ** -20, abs=1e-15)
    with pytest.raises(SojournError):
        geometric_pmf(1.0, 5)


@given(st.floats(0, 0.999), st.integers(1, 400))
def test_geometric_partial_sums(p, M):
    assert abs(geometric_pmf(p, M).sum() - (1 - p ** M)) <= 1e-12


def test_survival_examples():
    np.testing.assert_allclose(sojourn_survival([0.5, 0.3, 0.2]), [1.0, 0.5, 0.2])
    np.testing.assert_array_equal(sojourn_survival(np.zeros(4)), np.zeros(4))
    d = np.random.default_rng(0).random(10)
    oracle = [sum(d[u:]) for u in range(10)]
    np.testing.assert_allclose(sojourn_survival(d), oracle, atol=1e-14)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=30))
def test_survival_differences_give_pmf(d):
    D = sojourn_survival(d)
    np.testing.assert_allclose(D[:-1] - D[1:], d[:-1], atol=1e-12)


def test_gamma_moments_monte_carlo():
    rng = np.random.default_rng(1)
    fit = fit_sojourn_moments(rng.gamma(3.0, 10.0, 5000), None, "gamma")
    assert fit["shape"] == pytest.approx(3.0, rel=0.1)
    assert fit["scale"] == pytest.approx(10.0, rel=0.1)


def test_gamma_moments_closed_form():
    rng = np.random.default_rng(4)
    u = rng.integers(3, 17, 40).astype(float)
    w = rng.random(40)
    m = np.sum(w * u) / w.sum()
    v = np.sum(w * (u - m) ** 2) / w.sum()
    fit = fit_sojourn_moments(u, w, "gamma")
    assert fit["shape"] == pytest.approx(m * m / v, abs=1e-10)
    assert fit["scale"] == pytest.approx(v / m, abs=1e-10)


def test_lognormal_moments_monte_carlo():
    rng = np.random.default_rng(2)
    fit = fit_sojourn_moments(np.exp(rng.normal(1.0, 0.5, 5000)), None, "lognormal")
    assert fit["mu"] == pytest.approx(1.0, rel=0.05)
    assert fit["sigma"] == pytest.approx(0.5, rel=0.05)


def test_weibull_moments_reproduce_mean_and_variance():
    rng = np.random.default_rng(3)
    x = rng.weibull(2.0, 4000) * 5.0
    fit = fit_sojourn_moments(x, None, "weibull")
    dist = stats.weibull_min(fit["shape"], scale=fit["scale"])
    assert dist.mean() == pytest.approx(x.mean(), rel=1e-8)
    assert dist.var() == pytest.approx(x.var(), rel=1e-6)


def test_zero_variance_error():
    with pytest.raises(SojournError, match="zero variance"):
        fit_sojourn_moments(np.full(10, 4.0), None, "gamma")


@pytest.mark.parametrize("type, draw, truth", [
    ("gamma", lambda r, n: r.gamma(3.0, 10.0, n), {"shape": 3.0, "scale": 10.0}),
    ("lognormal", lambda r, n: np.exp(r.normal(1.0, 0.5, n)), {"mu": 1.0, "sigma": 0.5}),
])
def test_moment_error_shrinks_with_n(type, draw, truth):
    rng = np.random.default_rng(5)
    err = {}
    for n in (500, 5000):
        fits = [fit_sojourn_moments(draw(rng, n), None, type) for _ in range(30)]
        err[n] = np.mean([sum(abs(f[k] - v) / v for k, v in truth.items()) for f in fits])
    assert err[5000] < err[500]


def _discrete_draws(dist, n, rng):
    return np.ceil(dist.rvs(size=n, random_state=rng)).astype(int)


@pytest.mark.parametrize("family, dist", [
    ("gamma", stats.gamma(3, scale=10)),
    ("lognormal", stats.lognorm(0.5, scale=np.exp(3.0))),
])
def test_auto_selection_rate(family, dist):
    rng = np.random.default_rng(6)
    picks = [select_sojourn_auto([_discrete_draws(dist, 2000, rng)]) for _ in range(20)]
    assert np.mean([p == family for p in picks]) >= 0.9


def test_auto_selection_single_bin_error():
    with pytest.raises(SojournError):
        select_sojourn_auto([np.array([1, 1, 1, 2])])


def test_summary_examples():
    s = sojourn_summary([1.0])
    assert (s.mean, s.sd, s.mode) == (1.0, 0.0, 1)
    s = sojourn_summary([0.5, 0.5])
    assert (s.mean, s.sd, s.mode) == (1.5, 0.5, 1)
    d = sojourn_pmf(one_state("gamma", shape=3.0, scale=10.0), 0, 600)
    assert abs(sojourn_summary(d).mean - 30) <= 0.5
    with pytest.raises(SojournError):
        sojourn_summary([0.5, 0.4])


def test_summary_quantile_convention():
    d = np.array([0.01, 0.02, 0.07, 0.4, 0.4, 0.07, 0.02, 0.01])
    s = sojourn_summary(d, gamma=0.1)
    # largest v with cumulative mass <= 0.05 is 2; smallest v with tail beyond v <= 0.05 is 6
    assert (s.lower, s.upper) == (2, 6)
    assert sojourn_summary(np.array([0.9, 0.1]), gamma=0.1).lower == 0
