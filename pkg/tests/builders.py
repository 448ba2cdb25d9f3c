"""Model and data builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from hhsmm import MixLM, MixLMParams, MixMVN, MixMVNParams, ModelSpec, SequenceSet, SojournSpec, simulate


def three_state_model(M: int = 200) -> ModelSpec:
    """Two Markovian states around one gamma(3, 10) semi state, 1-D Gaussian mixtures."""
    em = MixMVN(MixMVNParams(
        [np.array([0.3, 0.7]), np.array([0.2, 0.3, 0.5]), np.array([0.5, 0.5])],
        [np.array([[7.0], [8.0]]), np.array([[10.0], [9.0], [11.0]]), np.array([[12.0], [14.0]])],
        [np.array([[[3.8]], [[4.9]]]), np.array([[[4.3]], [[4.2]], [[5.4]]]),
         np.array([[[4.5]], [[6.1]]])]))
    return ModelSpec([1, 0, 0], [[0.8, 0.1, 0.1], [0.5, 0, 0.5], [0.1, 0.2, 0.7]],
                     [False, True, False], M,
                     SojournSpec("gamma", {"shape": [0, 3, 0], "scale": [0, 10, 0]}), em)


def two_dim_model(M: int = 200) -> ModelSpec:
    """Bivariate variant of :func:`three_state_model` with diagonal covariances."""
    mu = [np.array([[7, 17], [8, 18.0]]), np.array([[15, 25], [14, 24], [16, 16.0]]),
          np.array([[0, 10], [2, 12.0]])]
    sg = [np.array([np.diag([2.8, 4.8]), np.diag([3.9, 5.9])]),
          np.array([np.diag([3.3, 5.3]), np.diag([3.2, 5.2]), np.diag([4.4, 6.4])]),
          np.array([np.diag([3.5, 5.5]), np.diag([5.1, 7.1])])]
    em = MixMVN(MixMVNParams([np.array([0.3, 0.7]), np.array([0.2, 0.3, 0.5]), np.array([0.5, 0.5])], mu, sg))
    return ModelSpec([1, 0, 0], [[0.8, 0.1, 0.1], [0.5, 0, 0.5], [0.1, 0.2, 0.7]],
                     [False, True, False], M,
                     SojournSpec("gamma", {"shape": [0, 3, 0], "scale": [0, 10, 0]}), em)


def regime_model() -> ModelSpec:
    """Three-state switching regression; the middle state mixes two lines."""
    em = MixLM(MixLMParams([[3.0], [-10.0, -1.0], [14.0]], [[-1.0], [1.0, 5.0], [-7.0]],
                           [[1.2], [2.3, 3.4], [1.1]], [[1.0], [0.4, 0.6], [1.0]]))
    return ModelSpec([1, 0, 0], [[0.5, 0.2, 0.3], [0.2, 0.5, 0.3], [0.1, 0.4, 0.5]],
                     [False] * 3, 100, None, em)


def ar_model() -> ModelSpec:
    """Two-state first-order autoregression; response is the second lagged column."""
    em = MixLM(MixLMParams([[0.5], [-0.8]], [[-0.8], [0.7]], [[0.5], [0.2]], [[1.0], [1.0]]),
               resp_ind=[1])
    return ModelSpec([1, 0], [[0.2, 0.8], [0.1, 0.9]], [False] * 2, 100, None, em)


def ltr_model() -> ModelSpec:
    """Five-state left-to-right degradation model with an absorbing failure state."""
    P = np.zeros((5, 5))
    for i in range(4):
        P[i, i + 1] = 1.0
    P[4, 4] = 1.0
    means = [np.array([[v, v]]) for v in (0.0, 1.0, 2.0, 3.0, 4.5)]
    em = MixMVN(MixMVNParams([np.ones(1)] * 5, means, [np.array([np.eye(2) * 0.25])] * 5))
    return ModelSpec([1, 0, 0, 0, 0], P, [True] * 4 + [False], 100,
                     SojournSpec("gamma", {"shape": [4.0] * 4 + [0.0], "scale": [5.0] * 4 + [0.0]}), em)


def run_to_failure(model: ModelSpec, n_units: int, seed: int, censor: bool) -> SequenceSet:
    """Units of ``ltr_model``: complete histories ending at the first failure row, or
    histories cut at a uniform time before failure with the true RUL attached."""
    raw = simulate(model, [250] * n_units, seed=seed)
    failure = model.J - 1
    rng = np.random.default_rng(seed + 7)
    xs, Ns, ss, rul = [], [], [], []
    for sl in raw.slices():
        s, x = raw.s[sl], raw.x[sl]
        fail = int(np.argmax(s == failure))
        assert s[fail] == failure, "unit did not fail within the horizon"
        stop = int(rng.integers(10, fail)) if censor else fail + 1
        xs.append(x[:stop])
        ss.append(s[:stop])
        Ns.append(stop)
        rul.append(fail - (stop - 1))
    return SequenceSet(np.vstack(xs), np.array(Ns), np.concatenate(ss),
                       np.array(rul) if censor else None)


def corrupt(data: SequenceSet, rng, less_frac: int = 10, all_frac: int = 20, rate: float = 0.2) -> SequenceSet:
    """Blank ``n // all_frac`` whole rows and, in ``n // less_frac`` rows, each cell w.p. ``rate``."""
    x = data.x.copy()
    n, p = x.shape
    some = rng.choice(n, n // less_frac, replace=False)
    whole = rng.choice(n, n // all_frac, replace=False)
    mask = rng.binomial(1, rate, (n // less_frac, p)).astype(bool)
    x[whole] = np.nan
    for i, r in enumerate(some):
        x[r, mask[i]] = np.nan
    return SequenceSet(x, data.N, data.s)


def random_hybrid(rng, max_J: int = 3, max_tau: int = 8, max_M: int = 4, max_p: int = 2):
    """Small random hybrid model with nonparametric sojourns plus one observed
    sequence; returns ``(spec, x, path_model)`` for the enumeration oracle."""
    from oracle import PathModel

    J = int(rng.integers(1, max_J + 1))
    tau = int(rng.integers(1, max_tau + 1))
    p = int(rng.integers(1, max_p + 1))
    semi = rng.random(J) < 0.5
    M = rng.integers(1, max_M + 1, size=J)
    P = rng.random((J, J))
    P[np.diag_indices(J)] *= ~semi
    if J == 1:
        P[:] = 1.0
        semi[:] = False
    P /= P.sum(axis=1, keepdims=True)
    init = rng.dirichlet(np.ones(J))
    d = [rng.dirichlet(np.ones(M[j])) if semi[j] else np.array([1.0]) for j in range(J)]
    em = MixMVN(MixMVNParams([np.ones(1)] * J, [rng.normal(size=(1, p)) * 2 for _ in range(J)],
                             [np.eye(p)[None]] * J))
    spec = ModelSpec(init, P, semi, M, SojournSpec("nonparametric", {"d": [list(r) for r in d]}), em)
    x = rng.normal(size=(tau, p)) * 2
    path_model = PathModel(init, P, semi, [d[j] if semi[j] else None for j in range(J)])
    return spec, x, path_model
