from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hhsmm import MixMVN, MixMVNParams, ModelError, ModelSpec, SojournSpec, hhsmmdata, hhsmmfit, score, simulate
from hhsmm.inference import NumericError, backward, estep, forward, mstep_core

from builders import random_hybrid, three_state_model
from oracle import PathModel, enumerate_paths


def gaussian_em(means, var=1.0):
    J = len(means)
    return MixMVN(MixMVNParams([np.ones(1)] * J, [np.array([[m]]) for m in means],
                               [np.array([[[var]]])] * J))


def markov_model(P, init, means):
    return ModelSpec(init, P, [False] * len(init), 10, None, gaussian_em(means))


def test_single_state_closed_form():
    spec = markov_model([[1.0]], [1.0], [0.5])
    x = np.random.default_rng(0).normal(size=(7, 1))
    fw = forward(spec.emission.log_density(x), spec)
    np.testing.assert_allclose(fw.loglik, stats.norm.logpdf(x[:, 0], 0.5).sum(), atol=1e-12)
    np.testing.assert_allclose(np.exp(fw.logN), stats.norm.pdf(x[:, 0], 0.5), rtol=1e-12)
    np.testing.assert_allclose(backward(fw, spec).L, 1.0, atol=1e-14)
    assert score(hhsmmdata(x), spec)[0] == pytest.approx(fw.loglik, abs=1e-12)


def _check_against_oracle(spec, x, pm, atol):
    logb = spec.emission.log_density(x)
    fw = forward(logb, spec)
    bw = backward(fw, spec)
    o = enumerate_paths(logb, pm)
    assert abs(fw.loglik - o.loglik) <= atol
    np.testing.assert_allclose(bw.L, o.L, atol=atol)
    np.testing.assert_allclose(bw.xi, o.xi, atol=atol)
    for j in np.nonzero(spec.semi)[0]:
        np.testing.assert_allclose(bw.eta[j], o.eta[j], atol=atol)
    return fw, bw, o


def test_two_state_markov_enumeration():
    spec = markov_model([[0.7, 0.3], [0.4, 0.6]], [0.6, 0.4], [-1.0, 1.5])
    x = np.random.default_rng(1).normal(size=(6, 1))
    pm = PathModel(spec.init, spec.transition, spec.semi, [None, None])
    _check_against_oracle(spec, x, pm, 1e-10)


def test_hybrid_nonparametric_enumeration():
    spec = ModelSpec([0.5, 0.5], [[0.0, 1.0], [0.6, 0.4]], [True, False], [2, 10],
                     SojournSpec("nonparametric", {"d": [[0.3, 0.7], [1.0]]}), gaussian_em([0.0, 2.0]))
    x = np.random.default_rng(2).normal(size=(5, 1))
    pm = PathModel(spec.init, spec.transition, spec.semi, [np.array([0.3, 0.7]), None])
    _check_against_oracle(spec, x, pm, 1e-10)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60)
def test_random_hybrid_matches_enumeration(seed):
    spec, x, pm = random_hybrid(np.random.default_rng(seed))
    fw, bw, _ = _check_against_oracle(spec, x, pm, 1e-8)
    np.testing.assert_allclose(bw.L.sum(axis=1), 1.0, atol=1e-8)
    assert np.all(bw.L <= 1 + 1e-10)
    assert np.all(np.isfinite(fw.logN))


def test_estep_aggregation():
    spec = three_state_model(M=30)
    one = simulate(spec, [25], seed=3)
    twice = hhsmmdata(np.vstack([one.x, one.x]), [25, 25])
    a, b = estep(one, spec), estep(twice, spec)
    np.testing.assert_allclose(b.eta[1], 2 * a.eta[1], rtol=1e-12)
    np.testing.assert_allclose(b.xi, 2 * a.xi, rtol=1e-12)
    three = simulate(spec, [10, 20, 15], seed=4)
    cache = estep(three, spec)
    assert cache.loglik == pytest.approx(score(three, spec).sum(), abs=1e-12)
    np.testing.assert_allclose(cache.L.sum(axis=1), 1.0, atol=1e-8)


def test_mstep_core_examples():
    spec = three_state_model(M=30)
    data = simulate(spec, [40, 30], seed=5)
    cache = estep(data, spec)
    locked = mstep_core(cache, spec, lock_init=True)
    np.testing.assert_array_equal(locked.init, spec.init)
    new = mstep_core(cache, spec)
    np.testing.assert_allclose(new.transition.sum(axis=1), 1.0, atol=1e-14)
    assert new.transition[1, 1] == 0.0
    np.testing.assert_array_equal(mstep_core(cache, spec, lock_transition=True).transition, spec.transition)


def test_nonparametric_sojourn_normalizes_eta():
    spec = ModelSpec([1.0, 0.0], [[0.0, 1.0], [0.5, 0.5]], [True, False], [3, 10],
                     SojournSpec("nonparametric", {"d": [[0.2, 0.3, 0.5], [1.0]]}), gaussian_em([0.0, 3.0]))
    cache = estep(hhsmmdata(np.zeros((4, 1))), spec)
    cache.eta[0] = np.array([2.0, 6.0, 2.0])
    np.testing.assert_allclose(mstep_core(cache, spec).sojourn.params["d"][0], [0.2, 0.6, 0.2])


def test_markov_transition_update_matches_enumeration():
    spec = markov_model([[0.7, 0.3], [0.4, 0.6]], [0.6, 0.4], [-1.0, 1.5])
    x = np.random.default_rng(6).normal(size=(6, 1))
    pm = PathModel(spec.init, spec.transition, spec.semi, [None, None])
    o = enumerate_paths(spec.emission.log_density(x), pm)
    new = mstep_core(estep(hhsmmdata(x), spec), spec)
    np.testing.assert_allclose(new.transition, o.xi / o.xi.sum(axis=1, keepdims=True), atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_markov_em_monotone(seed):
    rng = np.random.default_rng(seed)
    truth = markov_model([[0.9, 0.1], [0.2, 0.8]], [0.5, 0.5], [-1.0, 1.0])
    data = simulate(truth, [60, 40], seed=seed)
    start = markov_model([[0.6, 0.4], [0.4, 0.6]], [0.5, 0.5], list(rng.normal(size=2)))
    fit = hhsmmfit(data, start, maxit=30, tol=0)
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)


def test_hybrid_fit_improves_and_scores():
    spec = three_state_model(M=60)
    data = simulate(spec, [80, 60], seed=7)
    fit = hhsmmfit(data, spec, maxit=10)
    assert fit.loglik >= fit.loglik_trace[0]
    np.testing.assert_allclose(score(data, fit).sum(), fit.loglik, atol=1e-10)
    k = fit.model.n_params()
    assert fit.AIC == pytest.approx(-2 * fit.loglik + 2 * k)
    assert fit.BIC == pytest.approx(-2 * fit.loglik + k * np.log(140))


def test_lock_init_bit_exact_through_fit():
    spec = three_state_model(M=40).with_updates(init=np.array([0.2, 0.5, 0.3]))
    data = simulate(spec, [50], seed=8)
    fit = hhsmmfit(data, spec, maxit=3, lock_init=True)
    np.testing.assert_array_equal(fit.model.init, spec.init)


def test_fixed_point_converges_immediately():
    # a single Markov state with exact Gaussian moments is an EM fixed point
    x = np.random.default_rng(9).normal(size=(50, 1))
    spec = ModelSpec([1.0], [[1.0]], [False], 10, None, gaussian_em([x.mean()], x.var()))
    fit = hhsmmfit(hhsmmdata(x), spec)
    assert fit.converged and len(fit.loglik_trace) <= 3
    assert abs(fit.loglik_trace[1] - fit.loglik_trace[0]) <= 1e-4 * abs(fit.loglik_trace[0])


def test_geometric_semi_state_matches_markov():
    p = 0.9
    M = 200
    d = (1 - p) * p ** np.arange(M)
    d /= d.sum()
    P = [[p, 1 - p], [0.3, 0.7]]
    markov = ModelSpec([0.5, 0.5], P, [False, False], M, None, gaussian_em([0.0, 2.0]))
    hybrid = ModelSpec([0.5, 0.5], [[0.0, 1.0], [0.3, 0.7]], [True, False], M,
                       SojournSpec("nonparametric", {"d": [list(d), [1.0]]}), gaussian_em([0.0, 2.0]))
    data = simulate(markov, [60] * 3, seed=10)
    a, b = score(data, markov), score(data, hybrid)
    np.testing.assert_allclose(b, a, rtol=1e-3)


def test_errors():
    bad = markov_model([[0.5, 0.6], [0.5, 0.5]], [0.5, 0.5], [0.0, 1.0])
    with pytest.raises(ModelError):
        hhsmmfit(hhsmmdata(np.zeros((5, 1))), bad)
    one = markov_model([[1.0]], [1.0], [0.0])
    # emission underflow is floored, so extreme outliers stay finite
    assert np.isfinite(forward(one.emission.log_density(np.array([[1e100]])), one).loglik)
    dead = markov_model([[1.0]], [0.0], [0.0])
    with pytest.raises(NumericError, match="t=0"):
        forward(np.zeros((3, 1)), dead)


def test_collapsing_component_keeps_em_monotone():
    # one state locks onto a lone outlier; its variance stops at the floor
    x = np.random.default_rng(0).normal(size=(60, 1))
    x[30] = 8.0
    em = MixMVN(MixMVNParams([np.ones(1)] * 3, [np.array([[-1.0]]), np.array([[1.0]]), np.array([[8.0]])],
                             [np.array([[[1.0]]])] * 2 + [np.array([[[0.5]]])]))
    spec = ModelSpec([1 / 3] * 3, np.full((3, 3), 1 / 3), [False] * 3, 10, None, em)
    fit = hhsmmfit(hhsmmdata(x), spec, maxit=40, tol=0)
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
    assert fit.model.emission.params.covs[2][0, 0, 0] == pytest.approx(1e-8 * x.var(), rel=1e-6)
