"""Hybrid forward-backward recursions and the EM driver.

All quantities are carried per time step normalized by ``N_t``, the
predictive density of ``x_t`` given ``x_{0:t-1}``, so the log-likelihood is
``sum_t log N_t``. Semi-Markovian states use explicit segment sums over the
sojourn length ``u = 1..M_j``; the last segment of a sequence is right
censored through the survival function ``D_j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import SequenceSet
from .model import ModelError, ModelSpec, save_json, validate_model
from .sojourn import SojournError, fit_sojourn_moments, sojourn_survival

log = logging.getLogger(__name__)

LOG_FLOOR = -1e30


class NumericError(RuntimeError):
    pass


def _lse(a, axis=None):
    """``log(sum(exp(a)))`` without scipy's per-call overhead (hot loops)."""
    a = np.asarray(a)
    if a.size == 0:
        return -np.inf if axis is None else np.full(np.delete(a.shape, axis), -np.inf)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


@dataclass
class _Sojourn:
    """Log pmf and log survival rows for every semi state."""

    logd: list
    logD: list

    @classmethod
    def of(cls, spec: ModelSpec) -> "_Sojourn":
        logd, logD = [], []
        for j in range(spec.J):
            if spec.semi[j]:
                d = spec.sojourn_pmf(j)
                logd.append(_log(d))
                logD.append(_log(sojourn_survival(d)))
            else:
                logd.append(None)
                logD.append(None)
        return cls(logd, logD)


@dataclass
class ForwardResult:
    """Per-sequence forward quantities (natural logs unless stated).

    ``logE[t, j]``: entry into a new ``j`` segment at ``t`` given ``x_{0:t-1}``.
    ``logPhi[t, j]``: leaving ``j`` after ``t`` (semi: segment ends at ``t``;
    Markov: occupancy ``F~``), given ``x_{0:t}``.
    ``filtered[t, j]``: ``P(S_t = j | x_{0:t})``.
    ``C[t + 1, j]``: cumulative ``sum_{s <= t} (log b_j(x_s) - log N_s)``.
    """

    logb: np.ndarray
    logN: np.ndarray
    logE: np.ndarray
    logPhi: np.ndarray
    filtered: np.ndarray
    C: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.logN.sum())


def _window(t: int, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Sojourn lengths ``u = 1..min(t+1, M)`` ending at ``t`` and their start times."""
    u = np.arange(1, min(t + 1, M) + 1)
    return u, t + 1 - u


def forward(logb: np.ndarray, spec: ModelSpec, soj: _Sojourn | None = None) -> ForwardResult:
    """Normalized forward recursion for one sequence with log densities ``logb (tau, J)``."""
    soj = soj or _Sojourn.of(spec)
    tau, J = logb.shape
    logb = np.maximum(np.where(np.isnan(logb), LOG_FLOOR, logb), LOG_FLOOR)
    logP = _log(spec.transition)
    P_off = spec.transition * (1 - np.eye(J))
    semi = np.nonzero(spec.semi)[0]
    markov = np.nonzero(~spec.semi)[0]
    logE = np.full((tau, J), -np.inf)
    logPhi = np.full((tau, J), -np.inf)
    filtered = np.zeros((tau, J))
    logN = np.zeros(tau)
    C = np.zeros((tau + 1, J))
    logE[0] = _log(spec.init)
    for t in range(tau):
        shift = logb[t].max()
        bt = logb[t] - shift
        occ = np.full(J, -np.inf)
        seg = {}
        for j in semi:
            u, a = _window(t, int(spec.M[j]))
            lw = logE[a, j] + C[t, j] - C[a, j]
            seg[j] = (u, lw)
            occ[j] = _lse(lw + soj.logD[j][u - 1]) + bt[j]
        for j in markov:
            prev = logPhi[t - 1, j] + logP[j, j] if t > 0 else -np.inf
            occ[j] = np.logaddexp(prev, logE[t, j]) + bt[j]
        lN = _lse(occ)
        if not np.isfinite(lN):
            raise NumericError(f"zero likelihood at t={t}")
        logN[t] = lN + shift
        filtered[t] = np.exp(occ - lN)
        C[t + 1] = C[t] + logb[t] - logN[t]
        for j in semi:
            u, lw = seg[j]
            logPhi[t, j] = _lse(lw + soj.logd[j][u - 1]) + logb[t, j] - logN[t]
        for j in markov:
            logPhi[t, j] = occ[j] - lN
        if t + 1 < tau:
            logE[t + 1] = _log(np.exp(logPhi[t]) @ P_off)
    return ForwardResult(logb, logN, logE, logPhi, filtered, C)


@dataclass
class BackwardResult:
    """Posterior quantities for one sequence.

    ``L[t, j] = P(S_t = j | x)``; ``exit_prob[t, j]`` is the posterior that a
    semi ``j`` segment ends at ``t`` (L1); ``xi[i, k]`` are expected transition
    counts; ``eta[j]`` are expected sojourn-length counts of semi state ``j``.
    """

    L: np.ndarray
    exit_prob: np.ndarray
    xi: np.ndarray
    eta: list
    logG: np.ndarray


def backward(fw: ForwardResult, spec: ModelSpec, soj: _Sojourn | None = None) -> BackwardResult:
    soj = soj or _Sojourn.of(spec)
    tau, J = fw.logb.shape
    logP = _log(spec.transition)
    C = fw.C
    semi = np.nonzero(spec.semi)[0]
    markov = np.nonzero(~spec.semi)[0]
    logB = np.full((tau, J), -np.inf)
    logG = np.full((tau, J), -np.inf)
    for t in range(tau - 1, -1, -1):
        if t == tau - 1:
            logB[t, markov] = 0.0
        else:
            logB[t] = _lse(logP + logG[t + 1][None, :], axis=1)
        for k in markov:
            logG[t, k] = fw.logb[t, k] - fw.logN[t] + logB[t, k]
        for k in semi:
            M = int(spec.M[k])
            n_left = tau - t
            u = np.arange(1, min(n_left - 1, M) + 1)
            terms = soj.logd[k][u - 1] + C[t + u, k] - C[t, k] + logB[t + u - 1, k]
            if n_left <= M:
                terms = np.append(terms, soj.logD[k][n_left - 1] + C[tau, k] - C[t, k])
            logG[t, k] = _lse(terms) if terms.size else -np.inf
    L = np.zeros((tau, J))
    exit_prob = np.zeros((tau, J))
    for k in markov:
        L[:, k] = np.exp(fw.logPhi[:, k] + logB[:, k])
    for k in semi:
        enter = np.exp(fw.logE[:, k] + logG[:, k])
        exit_prob[:, k] = np.exp(fw.logPhi[:, k] + logB[:, k])
        left = np.concatenate([[0.0], np.cumsum(exit_prob[:-1, k])])
        L[:, k] = np.cumsum(enter) - left
    L = np.clip(L, 0.0, None)
    xi = np.zeros((J, J))
    if tau > 1:
        lx = fw.logPhi[:-1, :, None] + logP[None] + logG[1:, None, :]
        xi = np.exp(lx).sum(axis=0)
    eta = [None] * J
    for k in semi:
        eta[k] = _eta(fw, logB, spec, soj, k)
    return BackwardResult(L, exit_prob, xi, eta, logG)


def _eta(fw: ForwardResult, logB: np.ndarray, spec: ModelSpec, soj: _Sojourn, k: int) -> np.ndarray:
    """Expected number of ``k`` sojourns of each length.

    Complete segments count at their length. A right-censored final
    segment of observed length ``l`` spreads its mass over ``u >= l`` in
    proportion to ``d_k(u)``.
    """
    tau = fw.logb.shape[0]
    M = int(spec.M[k])
    C = fw.C
    eta = np.zeros(M)
    for b in range(tau - 1):
        u, a = _window(b, M)
        w = fw.logE[a, k] + C[b + 1, k] - C[a, k] + soj.logd[k][u - 1] + logB[b, k]
        eta[u - 1] += np.exp(w)
    cens = np.zeros(M)
    for a in range(max(0, tau - M), tau):
        ell = tau - a
        cens[ell - 1] += np.exp(fw.logE[a, k] + C[tau, k] - C[a, k])
    d = np.exp(soj.logd[k])
    eta += d * np.cumsum(cens)
    return eta


@dataclass
class EStepCache:
    """Forward-backward output aggregated over sequences."""

    loglik: float
    seq_loglik: np.ndarray
    L: np.ndarray
    first: np.ndarray
    xi: np.ndarray
    eta: list
    per_sequence: list = field(default_factory=list, repr=False)


def log_emissions(data: SequenceSet, spec: ModelSpec) -> np.ndarray:
    return spec.emission.log_density(data.x)


def estep(data: SequenceSet, spec: ModelSpec, keep: bool = False) -> EStepCache:
    soj = _Sojourn.of(spec)
    logb_all = log_emissions(data, spec)
    J = spec.J
    L_parts, first, lls, per = [], [], [], []
    xi = np.zeros((J, J))
    eta = [np.zeros(int(spec.M[j])) if spec.semi[j] else None for j in range(J)]
    for sl in data.slices():
        fw = forward(logb_all[sl], spec, soj)
        bw = backward(fw, spec, soj)
        lls.append(fw.loglik)
        L_parts.append(bw.L)
        first.append(bw.L[0])
        xi += bw.xi
        for j in range(J):
            if eta[j] is not None:
                eta[j] += bw.eta[j]
        if keep:
            per.append((fw, bw))
    lls = np.array(lls)
    return EStepCache(float(lls.sum()), lls, np.vstack(L_parts), np.array(first), xi, eta, per)


def _refit_sojourn(spec: ModelSpec, eta: list):
    soj = spec.sojourn
    if soj is None or not spec.semi.any():
        return soj
    if soj.type == "nonparametric":
        rows = [list(r) for r in soj.params["d"]]
        for j in np.nonzero(spec.semi)[0]:
            tot = eta[j].sum()
            if tot > 0:
                rows[j] = list(eta[j] / tot)
        return type(soj)("nonparametric", {"d": rows})
    params = {k: list(v) for k, v in soj.params.items()}
    for j in np.nonzero(spec.semi)[0]:
        u = np.arange(1, eta[j].size + 1) - 0.5
        try:
            fit = fit_sojourn_moments(u, eta[j], soj.type)
        except SojournError as exc:
            log.debug("keeping sojourn of state %d: %s", j, exc)
            continue
        for key, val in fit.items():
            params[key][j] = float(val)
    return type(soj)(soj.type, params)


def mstep_core(cache: EStepCache, spec: ModelSpec, lock_init: bool = False,
               lock_transition: bool = False) -> ModelSpec:
    """Update init, transitions and sojourns; the emission is left unchanged."""
    J = spec.J
    init = spec.init.copy()
    if not lock_init:
        init = cache.first.mean(axis=0)
        init /= init.sum()
    P = spec.transition.copy()
    if not lock_transition:
        for i in range(J):
            row = cache.xi[i].copy()
            if spec.semi[i]:
                row[i] = 0.0
            tot = row.sum()
            if tot > 0:
                P[i] = row / tot
    return spec.with_updates(init=init, transition=P, sojourn=_refit_sojourn(spec, cache.eta))


@dataclass
class FitResult:
    model: ModelSpec
    loglik_trace: list
    n_params: int
    n_obs: int
    states: np.ndarray
    converged: bool

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def AIC(self) -> float:
        return -2 * self.loglik + 2 * self.n_params

    @property
    def BIC(self) -> float:
        return -2 * self.loglik + self.n_params * np.log(self.n_obs)

    def to_dict(self) -> dict:
        out = self.model.to_dict()
        out.update({"loglik_trace": [float(v) for v in self.loglik_trace],
                    "AIC": float(self.AIC), "BIC": float(self.BIC)})
        return out

    def save(self, path) -> None:
        save_json(self.to_dict(), path)


def hhsmmfit(data: SequenceSet, model: ModelSpec, maxit: int = 100, tol: float = 1e-4,
             lock_init: bool = False, lock_transition: bool = False,
             verbose: bool = False) -> FitResult:
    """EM estimation. Stops after ``maxit`` updates or when the relative
    change of the log-likelihood drops below ``tol``."""
    report = validate_model(model)
    if not report.ok:
        raise ModelError(str(report))
    cache = estep(data, model)
    trace = [cache.loglik]
    converged = False
    for it in range(1, maxit + 1):
        new = mstep_core(cache, model, lock_init, lock_transition)
        new = new.with_updates(emission=model.emission.mstep(data.x, cache.L))
        new_cache = estep(data, new)
        if not np.isfinite(new_cache.loglik):
            raise NumericError("log-likelihood diverged")
        model, cache = new, new_cache
        trace.append(cache.loglik)
        if verbose:
            log.info("iteration %d: log-likelihood = %.6f", it, cache.loglik)
        if abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
    states = np.argmax(cache.L, axis=1)
    return FitResult(model, trace, model.n_params(lock_init), int(data.x.shape[0]), states, converged)


def score(data: SequenceSet, model: ModelSpec | FitResult) -> np.ndarray:
    """Per-sequence log-likelihoods from the forward pass."""
    spec = model.model if isinstance(model, FitResult) else model
    soj = _Sojourn.of(spec)
    logb = log_emissions(data, spec)
    return np.array([forward(logb[sl], spec, soj).loglik for sl in data.slices()])
