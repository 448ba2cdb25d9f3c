"""Mixture of multivariate normals emission, including missing-data variants."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from ..data import DataError, SequenceSet
from .base import Emission, EmissionError, check_weights

_LOG2PI = np.log(2 * np.pi)
COV_FLOOR_REL = 1e-8


def safe_cholesky(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower Cholesky factor of ``cov``, adding diagonal jitter when needed.

    The jitter starts at ``1e-8 * trace / p`` and grows tenfold up to three
    times. Returns the factor and the (possibly jittered) matrix.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    p = cov.shape[0]
    try:
        return linalg.cholesky(cov, lower=True), cov
    except linalg.LinAlgError:
        pass
    scale = np.trace(cov) / p
    if not scale > 0:
        scale = 1.0
    jitter = 1e-8 * scale
    for _ in range(4):
        trial = cov + jitter * np.eye(p)
        try:
            return linalg.cholesky(trial, lower=True), trial
        except linalg.LinAlgError:
            jitter *= 10
    raise EmissionError("covariance matrix is not positive definite")


def covariance_floor(x: np.ndarray) -> np.ndarray:
    """Per-dimension variance floor ``COV_FLOOR_REL * var(x)`` (NaN cells ignored)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        var = np.nanvar(x, axis=0)
    var = np.where(np.isfinite(var) & (var > 0), var, 1.0)
    return COV_FLOOR_REL * var


def floor_covariance(cov: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """Covariance constrained to ``cov >= diag(floor)``.

    Eigenvalues below 1 are raised to 1 after whitening by ``diag(floor)``.
    For a weighted scatter matrix this is the exact maximizer of the Gaussian
    log-likelihood over the constrained set, so EM stays monotone.
    """
    cov = 0.5 * (cov + cov.T)
    d = np.sqrt(floor)
    vals, vecs = linalg.eigh(cov / np.outer(d, d))
    if vals.min() >= 1.0:
        return cov
    out = (vecs * np.maximum(vals, 1.0)) @ vecs.T * np.outer(d, d)
    return 0.5 * (out + out.T)


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    diff = np.atleast_2d(x) - mean
    z = linalg.solve_triangular(chol, diff.T, lower=True)
    logdet = 2 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(z * z, axis=0) + logdet + mean.size * _LOG2PI)


@dataclass
class MixMVNParams:
    """Per-state mixture weights, means ``(K_j, p)`` and covariances ``(K_j, p, p)``."""

    weights: list[np.ndarray]
    means: list[np.ndarray]
    covs: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.atleast_1d(np.asarray(w, dtype=float)) for w in self.weights]
        self.means = [np.asarray(m, dtype=float).reshape(len(w), -1)
                      for m, w in zip(self.means, self.weights)]
        p = self.means[0].shape[1]
        self.covs = [np.asarray(c, dtype=float).reshape(len(w), p, p)
                     for c, w in zip(self.covs, self.weights)]

    @property
    def n_states(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means[0].shape[1]


def _completed(x: np.ndarray, mean: np.ndarray, cov: np.ndarray):
    """Plug in conditional means for NaN cells; also return conditional covariances.

    Returns the completed rows and, per row, the conditional covariance of
    the missing block embedded in a ``(p, p)`` zero matrix.
    """
    x = np.atleast_2d(x)
    n, p = x.shape
    out = x.copy()
    ccov = np.zeros((n, p, p))
    miss = np.isnan(x)
    if not miss.any():
        return out, ccov
    patterns, inverse = np.unique(miss, axis=0, return_inverse=True)
    inverse = np.ravel(inverse)
    for k, pat in enumerate(patterns):
        if not pat.any():
            continue
        rows = np.nonzero(inverse == k)[0]
        m, o = np.nonzero(pat)[0], np.nonzero(~pat)[0]
        if o.size == 0:
            out[np.ix_(rows, m)] = mean[m]
            cond = cov[np.ix_(m, m)]
        else:
            s_oo = cov[np.ix_(o, o)]
            s_mo = cov[np.ix_(m, o)]
            try:
                gain = linalg.solve(s_oo, s_mo.T, assume_a="pos").T
            except linalg.LinAlgError:
                raise EmissionError("observed-block covariance is singular") from None
            out[np.ix_(rows, m)] = mean[m] + (x[np.ix_(rows, o)] - mean[o]) @ gain.T
            cond = cov[np.ix_(m, m)] - gain @ s_mo.T
        ccov[np.ix_(rows, m, m)] = cond
    return out, ccov


def component_log_densities(x: np.ndarray, params: MixMVNParams, j: int) -> np.ndarray:
    """``log(lambda_k N(x_t; mu_k, Sigma_k))`` for every row and component of state ``j``.

    Missing cells are replaced by their component-wise conditional means.
    """
    x = np.atleast_2d(x)
    w, mu, cov = params.weights[j], params.means[j], params.covs[j]
    out = np.empty((x.shape[0], w.size))
    for k in range(w.size):
        chol, cov_k = safe_cholesky(cov[k])
        xc, _ = _completed(x, mu[k], cov_k)
        with np.errstate(divide="ignore"):
            out[:, k] = np.log(w[k]) + mvn_logpdf(xc, mu[k], chol)
    return out


def dmixmvnorm(x, j: int, params: MixMVNParams) -> np.ndarray | float:
    """Mixture density of state ``j`` at one row (scalar result) or several rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x2 = x.reshape(1, -1) if single else x
    if x2.shape[1] != params.dim:
        raise EmissionError("observation dimension does not match the parameters")
    val = np.exp(logsumexp(component_log_densities(x2, params, j), axis=1))
    return float(val[0]) if single else val


def responsibilities(x: np.ndarray, params: MixMVNParams, j: int) -> np.ndarray:
    lc = component_log_densities(x, params, j)
    tot = logsumexp(lc, axis=1, keepdims=True)
    gam = np.exp(lc - tot)
    bad = ~np.isfinite(tot[:, 0])
    if bad.any():
        gam[bad] = params.weights[j]
    return gam


def _weighted_update(xc, ccov, w, prev_mean, prev_cov, floor):
    tot = w.sum()
    if not tot > 0:
        return prev_mean, prev_cov
    mean = w @ xc / tot
    diff = xc - mean
    cov = (diff.T * w) @ diff / tot + np.tensordot(w, ccov, axes=1) / tot
    _, cov = safe_cholesky(floor_covariance(cov, floor))
    return mean, cov


def mixmvnorm_mstep(x, weights, params_prev: MixMVNParams) -> MixMVNParams:
    """Weighted EM update of the mixture parameters of every state."""
    x = np.asarray(x, dtype=float)
    if np.isnan(x).any():
        raise EmissionError("x has missing values; use miss_mixmvnorm_mstep")
    return _mstep(x, weights, params_prev, missing=False)


def miss_mixmvnorm_mstep(x, weights, params_prev: MixMVNParams) -> MixMVNParams:
    """M-step with NaN cells handled through conditional first and second moments."""
    return _mstep(np.asarray(x, dtype=float), weights, params_prev, missing=True)


def _mstep(x, weights, prev: MixMVNParams, missing: bool) -> MixMVNParams:
    w = check_weights(weights, prev.n_states)
    floor = covariance_floor(x)
    lam, means, covs = [], [], []
    for j in range(prev.n_states):
        gam = responsibilities(x, prev, j)
        wj = w[:, j]
        K = prev.weights[j].size
        lam.append(gam.T @ wj / wj.sum())
        mj, cj = np.empty_like(prev.means[j]), np.empty_like(prev.covs[j])
        for k in range(K):
            if missing:
                _, cov_k = safe_cholesky(prev.covs[j][k])
                xc, ccov = _completed(x, prev.means[j][k], cov_k)
            else:
                xc, ccov = x, np.zeros((x.shape[0], x.shape[1], x.shape[1]))
            mj[k], cj[k] = _weighted_update(xc, ccov, gam[:, k] * wj, prev.means[j][k], prev.covs[j][k],
                                                floor)
        means.append(mj)
        covs.append(cj)
    return MixMVNParams(lam, means, covs)


def rmixmvnorm(j: int, params: MixMVNParams, rng: np.random.Generator) -> np.ndarray:
    """One draw from the mixture of state ``j``."""
    w = params.weights[j]
    k = rng.choice(w.size, p=w / w.sum())
    chol, _ = safe_cholesky(params.covs[j][k])
    return params.means[j][k] + chol @ rng.standard_normal(params.dim)


def impute_initial(data: SequenceSet) -> SequenceSet:
    """Initial imputation used before clustering.

    Partially missing cells take the within-sequence column mean (falling
    back to the global column mean); fully missing rows then take the average
    of the nearest previous and next rows of the same sequence.
    """
    x = data.x.copy()
    miss = np.isnan(x)
    if not miss.any():
        return data
    glob = np.nanmean(np.where(miss, np.nan, x), axis=0) if (~miss).any() else None
    if glob is None or np.isnan(glob).any():
        raise DataError("a column has no observed values")
    for sl in data.slices():
        seq = x[sl]
        m = np.isnan(seq)
        full = m.all(axis=1)
        part = m & ~full[:, None]
        if part.any():
            obs = np.where(m[~full], np.nan, seq[~full])
            with np.errstate(all="ignore"):
                colmean = np.nanmean(obs, axis=0) if obs.size else glob
            colmean = np.where(np.isnan(colmean), glob, colmean)
            r, c = np.nonzero(part)
            seq[r, c] = colmean[c]
        if full.any():
            present = np.nonzero(~full)[0]
            if present.size == 0:
                seq[:] = glob
            else:
                for t in np.nonzero(full)[0]:
                    prev = present[present < t]
                    nxt = present[present > t]
                    nb = [seq[prev[-1]]] if prev.size else []
                    nb += [seq[nxt[0]]] if nxt.size else []
                    seq[t] = np.mean(nb, axis=0)
        x[sl] = seq
    return SequenceSet(x, data.N, data.s, data.rul, list(data.columns))


class MixMVN(Emission):
    """Gaussian-mixture emission; NaN cells use the plug-in conditional-mean density."""

    family = "mixmvnorm"

    def __init__(self, params: MixMVNParams):
        self.params = params

    @property
    def n_states(self) -> int:
        return self.params.n_states

    def log_density(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.column_stack([logsumexp(component_log_densities(x, self.params, j), axis=1)
                                for j in range(self.n_states)])

    def mstep(self, x, weights):
        x = np.asarray(x, dtype=float)
        if np.isnan(x).any():
            return MixMVN(miss_mixmvnorm_mstep(x, weights, self.params))
        return MixMVN(mixmvnorm_mstep(x, weights, self.params))

    def sample(self, j, rng, context=None):
        return rmixmvnorm(j, self.params, rng)

    def n_params(self) -> int:
        p = self.params.dim
        return sum(w.size - 1 + w.size * (p + p * (p + 1) // 2) for w in self.params.weights)

    def to_dict(self) -> dict:
        pr = self.params
        return {
            "family": self.family,
            "K": [int(w.size) for w in pr.weights],
            "lambda": [w.tolist() for w in pr.weights],
            "mu": [m.tolist() for m in pr.means],
            "sigma": [c.tolist() for c in pr.covs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(MixMVNParams(d["lambda"], d["mu"], d["sigma"]))
