"""State decoding, future-state prediction and remaining-useful-life estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import SequenceSet
from .inference import LOG_FLOOR, FitResult, NumericError, _log, _Sojourn, backward, forward, log_emissions
from .model import ModelError, ModelSpec
from .sojourn import sojourn_summary


def _spec(model) -> ModelSpec:
    return model.model if isinstance(model, FitResult) else model


@dataclass
class ViterbiResult:
    states: np.ndarray
    logscore: float
    alpha: np.ndarray
    """Best log joint probability of ``x_{0:t}`` with ``S_t = j`` (semi states censored at ``t``)."""


def viterbi_logb(logb: np.ndarray, spec: ModelSpec, soj: _Sojourn | None = None) -> ViterbiResult:
    """Most probable state path for one sequence given log emission densities."""
    soj = soj or _Sojourn.of(spec)
    tau, J = logb.shape
    logb = np.maximum(np.where(np.isnan(logb), LOG_FLOOR, logb), LOG_FLOOR)
    logP = _log(spec.transition)
    semi = np.nonzero(spec.semi)[0]
    markov = np.nonzero(~spec.semi)[0]
    S = np.vstack([np.zeros(J), np.cumsum(logb, axis=0)])  # S[t] = sum_{s<t} log b
    VE = np.full((tau, J), -np.inf)
    pred = np.zeros((tau, J), dtype=int)
    Vexit = np.full((tau, J), -np.inf)
    alpha = np.full((tau, J), -np.inf)
    best_u = np.zeros((tau, J), dtype=int)
    best_u_cens = np.zeros((tau, J), dtype=int)
    VE[0] = _log(spec.init)
    for t in range(tau):
        if t > 0:
            cand = Vexit[t - 1][:, None] + logP
            pred[t] = np.argmax(cand, axis=0)
            VE[t] = cand[pred[t], np.arange(J)]
        for j in semi:
            M = int(spec.M[j])
            u = np.arange(1, min(t + 1, M) + 1)
            a = t + 1 - u
            base = VE[a, j] + S[t + 1, j] - S[a, j]
            with np.errstate(invalid="ignore"):
                full = base + soj.logd[j][u - 1]
                cens = base + soj.logD[j][u - 1]
            k = int(np.argmax(full))
            best_u[t, j], Vexit[t, j] = u[k], full[k]
            k = int(np.argmax(cens))
            best_u_cens[t, j], alpha[t, j] = u[k], cens[k]
        for j in markov:
            Vexit[t, j] = alpha[t, j] = VE[t, j] + logb[t, j]
    last = alpha[tau - 1]
    j = int(np.argmax(last))
    score = float(last[j])
    if not np.isfinite(score):
        raise NumericError("every state path has zero probability")
    states = np.empty(tau, dtype=int)
    t, censored = tau - 1, True
    while t >= 0:
        if spec.semi[j]:
            u = best_u_cens[t, j] if censored else best_u[t, j]
            a = t - u + 1
            states[a:t + 1] = j
        else:
            a = t
            states[t] = j
        if a == 0:
            break
        j, t, censored = int(pred[a, j]), a - 1, False
    return ViterbiResult(states, score, alpha)


def viterbi(x, model) -> ViterbiResult:
    """Viterbi decoding of one sequence (an array of rows)."""
    spec = _spec(model)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return viterbi_logb(spec.emission.log_density(x), spec)


def smoothed_probabilities(x, model) -> np.ndarray:
    spec = _spec(model)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    soj = _Sojourn.of(spec)
    fw = forward(spec.emission.log_density(x), spec, soj)
    return backward(fw, spec, soj).L


def smoothing_decode(x, model) -> np.ndarray:
    """Per-time argmax of the smoothed state probabilities (lowest index on ties)."""
    return np.argmax(smoothed_probabilities(x, model), axis=1)


def _state_weights(logb: np.ndarray, spec: ModelSpec, soj: _Sojourn, method: str):
    """Decoded states and normalized state weights ``delta_bar`` for every ``t``."""
    if method == "viterbi":
        vr = viterbi_logb(logb, spec, soj)
        a = vr.alpha - vr.alpha.max(axis=1, keepdims=True)
        w = np.exp(a)
        return vr.states, w / w.sum(axis=1, keepdims=True)
    if method == "smoothing":
        L = backward(forward(logb, spec, soj), spec, soj).L
        return np.argmax(L, axis=1), L / L.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown decoding method {method!r}")


def future_states(delta: np.ndarray, P: np.ndarray, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Propagate ``delta`` through ``P`` ``h`` times; returns states and the deltas."""
    states = np.empty(h, dtype=int)
    path = np.empty((h, delta.size))
    for i in range(h):
        delta = P.T @ delta
        path[i] = delta
        states[i] = int(np.argmax(delta))
    return states, path


def predict_states(model, data: SequenceSet, method: str = "viterbi", future=0) -> list[np.ndarray]:
    """Decode every sequence and append ``future`` predicted states to each."""
    spec = _spec(model)
    soj = _Sojourn.of(spec)
    logb = log_emissions(data, spec)
    h = np.broadcast_to(np.asarray(future, dtype=int), (data.n_seq,))
    if np.any(h < 0):
        raise ValueError("future must be >= 0")
    out = []
    for i, sl in enumerate(data.slices()):
        states, delta = _state_weights(logb[sl], spec, soj, method)
        if h[i] > 0:
            fut, _ = future_states(delta[-1], spec.transition, int(h[i]))
            states = np.concatenate([states, fut])
        out.append(states)
    return out


@dataclass
class RULEstimate:
    rul: np.ndarray
    low: np.ndarray
    up: np.ndarray


@dataclass
class _StateDurations:
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def _durations(spec: ModelSpec, confidence: str, level: float) -> _StateDurations:
    gamma = 1.0 - level
    z = stats.norm.ppf(1 - gamma / 2)
    J = spec.J
    center, lower, upper = np.zeros(J), np.zeros(J), np.zeros(J)
    for j in range(J - 1):
        if spec.semi[j]:
            s = sojourn_summary(spec.sojourn_pmf(j), gamma)
            mean, sd, mode, qlo, qhi = s.mean, s.sd, s.mode, s.lower, s.upper
        else:
            p = float(spec.transition[j, j])
            if p >= 1:
                raise ModelError(f"state {j + 1} is absorbing but not final")
            mean, sd, mode = 1 / (1 - p), np.sqrt(p) / (1 - p), 1
            if p > 0:
                qlo = int(max(np.floor(np.log1p(-gamma / 2) / np.log(p) + 1e-12), 0))
                qhi = int(max(np.ceil(np.log(gamma / 2) / np.log(p) - 1e-12), 1))
            else:
                qlo, qhi = 0, 1
        if confidence == "mean":
            center[j], lower[j], upper[j] = mean, mean - z * sd, mean + z * sd
        elif confidence == "max":
            center[j], lower[j], upper[j] = mode, qlo, qhi
        else:
            raise ValueError(f"unknown confidence method {confidence!r}")
    return _StateDurations(center, lower, upper)


def jump_chain(P: np.ndarray) -> np.ndarray:
    """Transition matrix of the embedded jump chain; absorbing rows stay put."""
    Q = P.copy()
    for i in range(P.shape[0]):
        if P[i, i] < 1:
            Q[i, i] = 0.0
            Q[i] /= Q[i].sum()
    return Q


def duration_tracker(delta: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``d_hat_t(j) = d_hat_{t-1}(j) * delta_t(j)`` for ``t = 2..M_j`` with ``d_hat_1 = 1``."""
    tau, J = delta.shape
    d = np.ones(J)
    for t in range(1, tau):
        active = (t + 1) <= M
        d = np.where(active, d * delta[t], d)
    return d


def _rul_one(delta: np.ndarray, spec: ModelSpec, dur: _StateDurations, Q: np.ndarray):
    J = spec.J
    cur = delta[-1]
    if int(np.argmax(cur)) == J - 1:
        return 0.0, 0.0, 0.0
    dhat = duration_tracker(delta, spec.M)
    dhat[J - 1] = 0.0
    mask = np.arange(J) < J - 1
    avg = max(float(np.sum(((dur.center - dhat) * cur)[mask])), 0.0)
    low = max(float(np.sum(((dur.lower - dhat) * cur)[mask])), 0.0)
    up = max(float(np.sum(((dur.upper - dhat) * cur)[mask])), 0.0)
    state_probs = cur
    for _ in range(int(spec.M.sum())):
        state_probs = Q.T @ state_probs
        if int(np.argmax(state_probs)) == J - 1:
            break
        avg += max(float(dur.center @ state_probs), 0.0)
        low += max(float(dur.lower @ state_probs), 0.0)
        up += max(float(dur.upper @ state_probs), 0.0)
    return avg, min(low, avg), max(up, avg)


def estimate_rul(model, data: SequenceSet, method: str = "viterbi", confidence: str = "mean",
                 level: float = 0.95) -> RULEstimate:
    """Point estimate and interval of the time to the final (failure) state."""
    spec = _spec(model)
    J = spec.J
    if spec.transition[J - 1, J - 1] != 1:
        raise ModelError("RUL needs a left-to-right model whose last state is absorbing")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    dur = _durations(spec, confidence, level)
    Q = jump_chain(spec.transition)
    soj = _Sojourn.of(spec)
    logb = log_emissions(data, spec)
    res = [_rul_one(_state_weights(logb[sl], spec, soj, method)[1], spec, dur, Q)
           for sl in data.slices()]
    arr = np.array(res, dtype=float).reshape(-1, 3)
    return RULEstimate(arr[:, 0], arr[:, 1], arr[:, 2])
