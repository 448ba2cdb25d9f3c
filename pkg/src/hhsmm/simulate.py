"""Sampling sequences from a model."""

from __future__ import annotations

import numpy as np

from .data import SequenceSet
from .emissions import EmissionError
from .model import ModelError, ModelSpec, validate_model


def _draw_sojourn(d: np.ndarray, rng: np.random.Generator) -> int:
    return int(rng.choice(d.size, p=d / d.sum())) + 1


def simulate_states(spec: ModelSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """State path of length ``n``; semi sojourns are cut at the horizon."""
    J = spec.J
    s = np.empty(n, dtype=int)
    j = int(rng.choice(J, p=spec.init))
    t = 0
    while t < n:
        if spec.semi[j]:
            u = _draw_sojourn(spec.sojourn_pmf(j), rng)
            s[t:t + u] = j
            t += u
        else:
            s[t] = j
            t += 1
        j = int(rng.choice(J, p=spec.transition[j]))
    return s


def simulate(spec: ModelSpec, nsim, seed: int = 0, autoregress: bool = False,
             covar=None) -> SequenceSet:
    """Simulate ``len(nsim)`` sequences with true state labels.

    Each sequence uses its own generator spawned from ``SeedSequence(seed)``.
    With ``autoregress`` the emission draws its covariate from the previous
    response (0 at the first step) and only the response columns are kept.
    ``covar`` is forwarded to regression samplers as a generator function or
    ``{"mean", "cov"}`` record.
    """
    report = validate_model(spec)
    if not report.ok:
        raise ModelError(str(report))
    em = spec.emission
    if not em.can_sample:
        raise EmissionError(f"emission family {em.family!r} has no sampler")
    nsim = np.atleast_1d(np.asarray(nsim, dtype=int))
    if np.any(nsim < 1):
        raise ValueError("sequence lengths must be positive")
    streams = np.random.SeedSequence(seed).spawn(nsim.size)
    xs, ss = [], []
    resp = getattr(em, "resp_ind", None)
    for n, ss_seed in zip(nsim, streams):
        rng = np.random.default_rng(ss_seed)
        states = simulate_states(spec, int(n), rng)
        rows = []
        prev = None
        for j in states:
            if autoregress:
                if resp is None:
                    raise EmissionError("autoregressive simulation needs a regression emission")
                n_cov = em.params.n_cov
                covariate = np.zeros(n_cov) if prev is None else np.resize(prev, n_cov)
                row = em.sample(int(j), rng, {"covariate": covariate})
                prev = row[resp]
                rows.append(prev)
            else:
                rows.append(em.sample(int(j), rng, None if covar is None else {"covar": covar}))
        xs.append(np.vstack(rows))
        ss.append(states)
    return SequenceSet(np.vstack(xs), nsim, np.concatenate(ss))
