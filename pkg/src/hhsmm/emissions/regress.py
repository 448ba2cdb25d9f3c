"""Regime-switching regression emissions.

Rows are split into response columns (``resp_ind``) and covariates (every
other column). ``MixLM`` is a per-state mixture of linear Gaussian
regressions; ``AddReg`` is a per-state additive model with penalized cubic
spline components.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .base import Emission, EmissionError, check_weights
from .mixmvnorm import covariance_floor, floor_covariance, mvn_logpdf, safe_cholesky
from .spline import LAMBDA_MAX, bspline_design, second_difference, update_lambda


def split_columns(x: np.ndarray, resp_ind) -> tuple[np.ndarray, np.ndarray]:
    """Response block and covariate block of ``x`` (0-based ``resp_ind``)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    resp = np.asarray(resp_ind, dtype=int)
    if resp.size == 0 or np.any(resp < 0) or np.any(resp >= x.shape[1]):
        raise EmissionError(f"response indices {resp.tolist()} do not fit {x.shape[1]} columns")
    cov = np.setdiff1d(np.arange(x.shape[1]), resp)
    if np.isnan(x).any():
        raise EmissionError("regression emissions do not support missing values")
    return x[:, resp], x[:, cov]



@dataclass
class MixLMParams:
    """Per state ``j`` and component ``k``: intercept ``(q,)``, coefficients
    ``(r, q)`` (covariates by responses), residual covariance ``(q, q)`` and
    mixture weight."""

    intercept: list[np.ndarray]
    coefficient: list[np.ndarray]
    csigma: list[np.ndarray]
    mix_p: list[np.ndarray]

    def __post_init__(self):
        self.mix_p = [np.atleast_1d(np.asarray(m, dtype=float)) for m in self.mix_p]
        self.intercept = [np.asarray(b, dtype=float).reshape(m.size, -1)
                          for b, m in zip(self.intercept, self.mix_p)]
        q = self.intercept[0].shape[1]
        coefs = []
        for c, m in zip(self.coefficient, self.mix_p):
            c = np.asarray(c, dtype=float)
            coefs.append(c.reshape(m.size, -1, q))
        self.coefficient = coefs
        self.csigma = [np.asarray(s, dtype=float).reshape(m.size, q, q)
                       for s, m in zip(self.csigma, self.mix_p)]

    @property
    def n_states(self) -> int:
        return len(self.mix_p)

    @property
    def n_resp(self) -> int:
        return self.intercept[0].shape[1]

    @property
    def n_cov(self) -> int:
        return self.coefficient[0].shape[1]


def _mixlm_component_logdens(y, xc, params: MixLMParams, j: int) -> np.ndarray:
    K = params.mix_p[j].size
    out = np.empty((y.shape[0], K))
    for k in range(K):
        chol, _ = safe_cholesky(params.csigma[j][k])
        mean = params.intercept[j][k] + xc @ params.coefficient[j][k]
        with np.errstate(divide="ignore"):
            out[:, k] = np.log(params.mix_p[j][k]) + mvn_logpdf(y - mean, np.zeros(params.n_resp), chol)
    return out


def log_dmixlm(x, j: int, params: MixLMParams, resp_ind) -> np.ndarray:
    y, xc = split_columns(x, resp_ind)
    if y.shape[1] != params.n_resp or xc.shape[1] != params.n_cov:
        raise EmissionError("row dimensions do not match the regression parameters")
    return logsumexp(_mixlm_component_logdens(y, xc, params, j), axis=1)


def dmixlm(x, j: int, params: MixLMParams, resp_ind=(0,)):
    """``sum_k p_k N(y; b0_k + x B_k, S_k)`` for one row (scalar) or several rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    val = np.exp(log_dmixlm(x.reshape(1, -1) if single else x, j, params, resp_ind))
    return float(val[0]) if single else val


def weighted_lstsq(design: np.ndarray, y: np.ndarray, w: np.ndarray, state: int):
    """Weighted least squares with an explicit rank check."""
    keep = w > 0
    sw = np.sqrt(w[keep])[:, None]
    Xw, yw = design[keep] * sw, y[keep] * sw
    if np.linalg.matrix_rank(Xw) < design.shape[1]:
        raise EmissionError(f"rank-deficient weighted design in state {state}")
    beta, *_ = linalg.lstsq(Xw, yw)
    return beta


def mixlm_mstep(x, weights, params_prev: MixLMParams, resp_ind=(0,)) -> MixLMParams:
    """Weighted EM update of every state's mixture of linear regressions."""
    y, xc = split_columns(x, resp_ind)
    pr = params_prev
    w = check_weights(weights, pr.n_states)
    design = np.column_stack([np.ones(y.shape[0]), xc])
    floor = covariance_floor(y)
    out = {"intercept": [], "coefficient": [], "csigma": [], "mix_p": []}
    for j in range(pr.n_states):
        lc = _mixlm_component_logdens(y, xc, pr, j)
        tot = logsumexp(lc, axis=1, keepdims=True)
        gam = np.exp(lc - tot)
        bad = ~np.isfinite(tot[:, 0])
        gam[bad] = pr.mix_p[j]
        wj = w[:, j]
        K = pr.mix_p[j].size
        b0, B, S = [], [], []
        for k in range(K):
            wk = gam[:, k] * wj
            if not wk.sum() > 0:
                b0.append(pr.intercept[j][k])
                B.append(pr.coefficient[j][k])
                S.append(pr.csigma[j][k])
                continue
            beta = weighted_lstsq(design, y, wk, j)
            res = y - design @ beta
            cov = (res.T * wk) @ res / wk.sum()
            _, cov = safe_cholesky(floor_covariance(cov, floor))
            b0.append(beta[0])
            B.append(beta[1:])
            S.append(cov)
        out["intercept"].append(np.array(b0))
        out["coefficient"].append(np.array(B))
        out["csigma"].append(np.array(S))
        out["mix_p"].append(gam.T @ wj / wj.sum())
    return MixLMParams(**out)


Covariate = Callable[[np.random.Generator], np.ndarray] | dict | None


def draw_covariate(covar: Covariate, n_cov: int, rng: np.random.Generator) -> np.ndarray:
    if covar is None:
        return rng.standard_normal(n_cov)
    if callable(covar):
        return np.atleast_1d(np.asarray(covar(rng), dtype=float))
    mean = np.atleast_1d(np.asarray(covar.get("mean", np.zeros(n_cov)), dtype=float))
    cov = np.atleast_2d(np.asarray(covar.get("cov", np.eye(n_cov)), dtype=float))
    chol, _ = safe_cholesky(cov)
    return mean + chol @ rng.standard_normal(mean.size)


def assemble_row(y: np.ndarray, xc: np.ndarray, resp_ind) -> np.ndarray:
    resp = np.asarray(resp_ind, dtype=int)
    row = np.empty(y.size + xc.size)
    cov_idx = np.setdiff1d(np.arange(row.size), resp)
    row[resp] = y
    row[cov_idx] = xc
    return row


def rmixlm(j: int, params: MixLMParams, covar: Covariate, rng: np.random.Generator,
           resp_ind=(0,)) -> np.ndarray:
    """Draw a covariate, a component and the response; return the full row."""
    xc = draw_covariate(covar, params.n_cov, rng)
    p = params.mix_p[j]
    k = rng.choice(p.size, p=p / p.sum())
    chol, _ = safe_cholesky(params.csigma[j][k])
    mean = params.intercept[j][k] + xc @ params.coefficient[j][k]
    y = mean + chol @ rng.standard_normal(params.n_resp)
    return assemble_row(y, xc, resp_ind)


def _sample_context(context, n_cov):
    if context is None:
        return None
    if "covariate" in context:
        val = np.atleast_1d(np.asarray(context["covariate"], dtype=float))
        return lambda rng: val
    return context.get("covar")


class MixLM(Emission):
    """Mixture of linear regressions of ``x[:, resp_ind]`` on the other columns."""

    family = "mixlm"

    def __init__(self, params: MixLMParams, resp_ind=(0,)):
        self.params = params
        self.resp_ind = [int(i) for i in np.atleast_1d(resp_ind)]

    @property
    def n_states(self) -> int:
        return self.params.n_states

    def log_density(self, x):
        return np.column_stack([log_dmixlm(x, j, self.params, self.resp_ind)
                                for j in range(self.n_states)])

    def mstep(self, x, weights):
        return MixLM(mixlm_mstep(x, weights, self.params, self.resp_ind), self.resp_ind)

    def sample(self, j, rng, context=None):
        return rmixlm(j, self.params, _sample_context(context, self.params.n_cov), rng, self.resp_ind)

    def n_params(self) -> int:
        q, r = self.params.n_resp, self.params.n_cov
        per = q + r * q + q * (q + 1) // 2
        return sum(m.size - 1 + m.size * per for m in self.params.mix_p)

    def to_dict(self) -> dict:
        pr = self.params
        return {
            "family": self.family,
            "resp_ind": [i + 1 for i in self.resp_ind],
            "intercept": [b.tolist() for b in pr.intercept],
            "coefficient": [c.tolist() for c in pr.coefficient],
            "csigma": [s.tolist() for s in pr.csigma],
            "mix_p": [m.tolist() for m in pr.mix_p],
        }

    @classmethod
    def from_dict(cls, d):
        params = MixLMParams(d["intercept"], d["coefficient"], d["csigma"], d["mix_p"])
        return cls(params, [int(i) - 1 for i in d["resp_ind"]])


# ---------------------------------------------------------------- additive model


@dataclass
class AdditiveRegParams:
    """Per state: intercept ``mu (q,)``, raw spline coefficients ``coef (L, K, q)``,
    residual covariance ``sigma (q, q)`` and smoothing parameter; shared
    covariate ranges ``(L, 2)``."""

    K: int
    range: np.ndarray
    mu: np.ndarray
    coef: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.range = np.asarray(self.range, dtype=float).reshape(-1, 2)
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        J, q = self.mu.shape
        L = self.range.shape[0]
        self.coef = np.asarray(self.coef, dtype=float).reshape(J, L, self.K, q)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(J, q, q)
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))

    @property
    def n_states(self) -> int:
        return self.mu.shape[0]

    @property
    def n_resp(self) -> int:
        return self.mu.shape[1]

    @property
    def n_cov(self) -> int:
        return self.range.shape[0]


def _designs(xc: np.ndarray, K: int, ranges: np.ndarray) -> list[np.ndarray]:
    return [bspline_design(xc[:, l], K, *ranges[l]) for l in range(ranges.shape[0])]


def additive_mean(xc: np.ndarray, j: int, params: AdditiveRegParams) -> np.ndarray:
    xc = np.atleast_2d(xc)
    if xc.shape[1] != params.n_cov:
        raise EmissionError("covariate dimension does not match the additive model")
    mean = np.tile(params.mu[j], (xc.shape[0], 1))
    for l, B in enumerate(_designs(xc, params.K, params.range)):
        mean += B @ params.coef[j, l]
    return mean


def log_dnorm_additive_reg(x, j: int, params: AdditiveRegParams, resp_ind) -> np.ndarray:
    y, xc = split_columns(x, resp_ind)
    chol, _ = safe_cholesky(params.sigma[j])
    return mvn_logpdf(y - additive_mean(xc, j, params), np.zeros(params.n_resp), chol)


def dnorm_additive_reg(x, j: int, params: AdditiveRegParams, resp_ind=(0,)):
    """``N(y; mu_j + sum_l f_jl(x_l), sigma_j)`` for one row (scalar) or several."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    val = np.exp(log_dnorm_additive_reg(x.reshape(1, -1) if single else x, j, params, resp_ind))
    return float(val[0]) if single else val


def _centering_basis(Bw_sum: np.ndarray) -> np.ndarray:
    """Orthonormal basis ``Z (K, K-1)`` of the null space of the row ``w'B``."""
    return linalg.null_space(Bw_sum[None, :])


def additive_objective(y, X, theta, w, sigma, lam, S) -> float:
    """Penalized weighted Gaussian log-likelihood."""
    res = y - X @ theta
    chol, _ = safe_cholesky(sigma)
    ll = w @ mvn_logpdf(res, np.zeros(y.shape[1]), chol)
    return float(ll - 0.5 * lam * np.trace(theta.T @ S @ theta))


def _penalized_solve(X, y, w, sigma_inv, lam, S):
    """Maximize over ``theta`` for fixed ``sigma``: Kronecker normal equations."""
    G = (X.T * w) @ X
    q = y.shape[1]
    lhs = np.kron(sigma_inv, G) + np.kron(np.eye(q), lam * S)
    rhs = ((X.T * w) @ y @ sigma_inv).reshape(-1, order="F")
    try:
        vec = linalg.solve(lhs, rhs, assume_a="sym")
    except linalg.LinAlgError:
        raise EmissionError("singular penalized system") from None
    if not np.all(np.isfinite(vec)):
        raise EmissionError("singular penalized system")
    return vec.reshape(X.shape[1], q, order="F"), lhs, np.kron(sigma_inv, G)


def _fit_state(y, Bs, w, lam, sigma0, K, state, max_inner=100, tol=1e-10):
    """Alternate the exact ``theta`` and ``sigma`` maximizers; returns the fit,
    its degrees of freedom and the objective trace."""
    n, q = y.shape
    keep = w > 0
    D2 = second_difference(K)
    Zs = [_centering_basis(w @ B) for B in Bs]
    X = np.column_stack([np.ones(n)] + [B @ Z for B, Z in zip(Bs, Zs)])
    if np.linalg.matrix_rank(X[keep] * np.sqrt(w[keep])[:, None]) < X.shape[1] and lam == 0:
        raise EmissionError(f"singular penalized system in state {state}")
    blocks = [Z.T @ D2.T @ D2 @ Z for Z in Zs]
    S = linalg.block_diag(np.zeros((1, 1)), *blocks)
    sigma = sigma0
    trace = []
    for _ in range(max_inner):
        sigma_inv = np.linalg.inv(safe_cholesky(sigma)[1])
        theta, H_lam, H_0 = _penalized_solve(X, y, w, sigma_inv, lam, S)
        res = y - X @ theta
        sigma = (res.T * w) @ res / w.sum()
        _, sigma = safe_cholesky(0.5 * (sigma + sigma.T))
        trace.append(additive_objective(y, X, theta, w, sigma, lam, S))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * max(1.0, abs(trace[-1])):
            break
    sigma_inv = np.linalg.inv(sigma)
    theta, H_lam, H_0 = _penalized_solve(X, y, w, sigma_inv, lam, S)
    df = float(np.trace(linalg.solve(H_lam, H_0)))
    mu = theta[0]
    coefs = []
    off = 1
    for Z in Zs:
        coefs.append(Z @ theta[off:off + Z.shape[1]])
        off += Z.shape[1]
    rough = float(sum(np.sum((D2 @ c) ** 2) for c in coefs))
    return mu, np.array(coefs), sigma, df, rough, trace


def additive_reg_mstep(x, weights, K: int = 10, resp_ind=(0,), lam=1.0,
                       params_prev: AdditiveRegParams | None = None,
                       lambda_updates: int = 1) -> AdditiveRegParams:
    """Penalized weighted additive fit of every state.

    Covariate ranges come from ``params_prev`` when given, otherwise from
    the data. Each component function is centered to weighted mean zero.
    """
    y, xc = split_columns(x, resp_ind)
    n_states = np.asarray(weights).shape[1]
    w = check_weights(weights, n_states)
    if params_prev is not None:
        ranges, K = params_prev.range, params_prev.K
        lams = params_prev.lam.copy()
    else:
        lo, hi = xc.min(axis=0), xc.max(axis=0)
        ranges = np.column_stack([lo, np.where(hi > lo, hi, lo + 1.0)])
        lams = np.broadcast_to(np.asarray(lam, dtype=float), (n_states,)).copy()
    for l in range(xc.shape[1]):
        if np.unique(xc[:, l]).size < K + 4:
            raise EmissionError(f"covariate {l} needs at least K+4 distinct values")
    Bs = _designs(xc, K, ranges)
    q = y.shape[1]
    mus, coefs, sigmas = [], [], []
    for j in range(n_states):
        wj = w[:, j]
        sigma0 = params_prev.sigma[j] if params_prev is not None else np.cov(y.T, aweights=wj).reshape(q, q)
        lam_j = lams[j]
        for rep in range(lambda_updates + 1):
            mu, c, sigma, df, rough, _ = _fit_state(y, Bs, wj, lam_j, sigma0, K, j)
            if rep < lambda_updates:
                lam_j = update_lambda(df, rough, xc.shape[1])
        lams[j] = lam_j
        mus.append(mu)
        coefs.append(c)
        sigmas.append(sigma)
    return AdditiveRegParams(K, ranges, np.array(mus), np.array(coefs), np.array(sigmas), lams)


def addreg_hhsmm_predict(fit, xnew, K: int | None = None) -> list[np.ndarray]:
    """Per-state predicted responses ``mu_j + sum_l f_jl(xnew_l)``.

    ``fit`` is an :class:`AddReg` emission, its parameters, or any object with
    an ``emission`` (or ``model.emission``) attribute holding one.
    """
    params = fit
    for attr in ("model", "emission", "params"):
        if not isinstance(params, AdditiveRegParams) and hasattr(params, attr):
            params = getattr(params, attr)
    if not isinstance(params, AdditiveRegParams):
        raise EmissionError("fit does not hold an additive regression emission")
    if K is not None and K != params.K:
        raise EmissionError(f"K={K} does not match the fitted basis size {params.K}")
    xnew = np.atleast_2d(np.asarray(xnew, dtype=float))
    return [additive_mean(xnew, j, params) for j in range(params.n_states)]


class AddReg(Emission):
    """Additive spline regression of ``x[:, resp_ind]`` on the other columns."""

    family = "addreg"

    def __init__(self, params: AdditiveRegParams | None, resp_ind=(0,), K: int = 10,
                 lam: float = 1.0, lambda_updates: int = 1, n_states: int | None = None):
        self.params = params
        self.resp_ind = [int(i) for i in np.atleast_1d(resp_ind)]
        self.K = params.K if params is not None else K
        self.lam = lam
        self.lambda_updates = lambda_updates
        self._n_states = params.n_states if params is not None else n_states

    @property
    def n_states(self) -> int:
        return self._n_states

    def _require(self):
        if self.params is None:
            raise EmissionError("additive regression emission is not fitted yet")
        return self.params

    def log_density(self, x):
        pr = self._require()
        return np.column_stack([log_dnorm_additive_reg(x, j, pr, self.resp_ind)
                                for j in range(pr.n_states)])

    def mstep(self, x, weights):
        new = additive_reg_mstep(x, weights, self.K, self.resp_ind, self.lam, self.params,
                                 self.lambda_updates)
        return AddReg(new, self.resp_ind, lam=self.lam, lambda_updates=self.lambda_updates)

    def n_params(self) -> int:
        pr = self._require()
        q = pr.n_resp
        return pr.n_states * (q + pr.n_cov * (pr.K - 1) * q + q * (q + 1) // 2)

    def to_dict(self) -> dict:
        pr = self._require()
        return {"family": self.family, "resp_ind": [i + 1 for i in self.resp_ind], "K": int(pr.K),
                "range": pr.range.tolist(), "mu": pr.mu.tolist(), "coef": pr.coef.tolist(),
                "sigma": pr.sigma.tolist(), "lambda": pr.lam.tolist()}

    @classmethod
    def from_dict(cls, d):
        params = AdditiveRegParams(int(d["K"]), d["range"], d["mu"], d["coef"], d["sigma"], d["lambda"])
        return cls(params, [int(i) - 1 for i in d["resp_ind"]])


__all__ = [
    "LAMBDA_MAX", "MixLMParams", "MixLM", "dmixlm", "mixlm_mstep", "rmixlm",
    "AdditiveRegParams", "AddReg", "dnorm_additive_reg", "additive_reg_mstep",
    "addreg_hhsmm_predict", "split_columns",
]
