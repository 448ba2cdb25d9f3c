"""Initial clustering and model initialization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats
from sklearn.cluster import KMeans

from .data import SequenceSet
from .emissions import (AddReg, MixLM, MixLMParams, MixMVN, MixMVNParams, Nonpar, impute_initial)
from .emissions.base import EmissionError
from .emissions.mixmvnorm import safe_cholesky
from .emissions.regress import split_columns
from .emissions.spline import uniform_spline_params
from .model import ModelError, ModelSpec
from .sojourn import (PARAMETRIC, SojournError, SojournSpec, fit_sojourn_moments,
                      select_sojourn_auto, spec_from_fits)

log = logging.getLogger(__name__)

LTR_NEXT = 0.85


class InitError(ValueError):
    pass


# ------------------------------------------------------------ left-to-right splits


@dataclass
class LtrSplit:
    """Best split of a block: the first ``index`` rows form the left part."""

    index: int
    stat: float
    threshold: float

    @property
    def significant(self) -> bool:
        return self.stat > self.threshold


def _pooled_inverse(cov: np.ndarray) -> np.ndarray:
    p = cov.shape[0]
    ridge = 1e-8 * max(np.trace(cov) / p, 1e-300)
    for r in (0.0, ridge, 1e3 * ridge):
        try:
            c = linalg.cho_factor(cov + r * np.eye(p), lower=True)
            return linalg.cho_solve(c, np.eye(p))
        except linalg.LinAlgError:
            continue
    raise InitError("singular pooled covariance")


def hotelling_profile(block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split positions ``s = 2..k-2`` and their scaled two-sample T^2 statistics."""
    block = np.atleast_2d(np.asarray(block, dtype=float))
    k, p = block.shape
    s_all = np.arange(2, k - 1)
    out = np.empty(s_all.size)
    scale_common = (k - p - 1) / ((k - 2) * p)
    for i, s in enumerate(s_all):
        a, b = block[:s], block[s:]
        diff = a.mean(axis=0) - b.mean(axis=0)
        scatter = (a - a.mean(axis=0)).T @ (a - a.mean(axis=0)) + (b - b.mean(axis=0)).T @ (b - b.mean(axis=0))
        pooled = scatter / (k - 2)
        inv = _pooled_inverse(np.atleast_2d(pooled))
        out[i] = (s * (k - s) / k) * scale_common * float(diff @ inv @ diff)
    return s_all, out


def ltr_clus(block) -> LtrSplit | None:
    """Most significant change point of a block by the Hotelling T^2 criterion.

    Returns ``None`` when the maximal statistic does not exceed the 95%
    quantile of ``F(p, k-1-p)``.
    """
    block = np.atleast_2d(np.asarray(block, dtype=float))
    if block.shape[0] == 1 and block.ndim == 2 and block.shape[1] > 1:
        block = block.T
    k, p = block.shape
    if k < 6:
        raise InitError(f"a block needs at least 6 rows, got {k}")
    if k - 1 - p < 1:
        raise InitError("too few rows for the dimension")
    s_all, d = hotelling_profile(block)
    i = int(np.argmax(d))
    split = LtrSplit(int(s_all[i]), float(d[i]), float(stats.f.ppf(0.95, p, k - 1 - p)))
    return split if split.significant else None


def _can_test(n: int, p: int) -> bool:
    return n >= 6 and n - 1 - p >= 1


def _pair_distance(x: np.ndarray, a: tuple[int, int], b: tuple[int, int]) -> float:
    """Hotelling statistic of two adjacent segments at their shared boundary."""
    block = x[a[0]:b[1]]
    k, p = block.shape
    s = a[1] - a[0]
    if k < 4 or s < 1 or s >= k:
        return float(np.sum((x[a[0]:a[1]].mean(0) - x[b[0]:b[1]].mean(0)) ** 2))
    left, right = block[:s], block[s:]
    diff = left.mean(axis=0) - right.mean(axis=0)
    scatter = (left - left.mean(0)).T @ (left - left.mean(0)) + (right - right.mean(0)).T @ (right - right.mean(0))
    try:
        inv = _pooled_inverse(np.atleast_2d(scatter / max(k - 2, 1)))
    except InitError:
        return float(diff @ diff)
    return float((s * (k - s) / k) * diff @ inv @ diff)


def segment_sequence(x: np.ndarray, K: int, split_fn=ltr_clus) -> list[tuple[int, int]]:
    """Ordered segmentation of one sequence into exactly ``K`` parts."""
    n, p = x.shape
    if n < 3 * K:
        raise InitError(f"sequence of length {n} is shorter than 3K = {3 * K}")
    segs = [(0, n)]
    changed = True
    while len(segs) < K and changed:
        changed = False
        new = []
        for a, b in segs:
            res = split_fn(x[a:b]) if _can_test(b - a, p) else None
            if res is not None:
                new += [(a, a + res.index), (a + res.index, b)]
                changed = True
            else:
                new.append((a, b))
        segs = new
    while len(segs) > K:
        dist = [_pair_distance(x, segs[i], segs[i + 1]) for i in range(len(segs) - 1)]
        i = int(np.argmin(dist))
        segs[i:i + 2] = [(segs[i][0], segs[i + 1][1])]
    if len(segs) < K:
        log.warning("forcing even splits: only %d significant segments for K=%d", len(segs), K)
    while len(segs) < K:
        i = int(np.argmax([b - a for a, b in segs]))
        a, b = segs[i]
        mid = a + (b - a) // 2
        segs[i:i + 1] = [(a, mid), (mid, b)]
    return segs


def ltr_cluster_K(sequences, K: int, split_fn=ltr_clus) -> list[list[tuple[int, int]]]:
    """Left-to-right segmentation of each sequence into ``K`` ordered segments."""
    if K < 2:
        raise InitError("K must be >= 2")
    return [segment_sequence(np.atleast_2d(np.asarray(s, dtype=float)).reshape(len(s), -1), K, split_fn)
            for s in sequences]


def chow_split_fn(resp_ind):
    """Change-point test on regression coefficients (two-sample F statistic)."""

    def fn(block):
        y, xc = split_columns(block, resp_ind)
        k = block.shape[0]
        design = np.column_stack([np.ones(k), xc])
        q = design.shape[1]
        if k < 2 * q + 3:
            return None

        def rss(sl):
            beta, *_ = linalg.lstsq(design[sl], y[sl])
            return float(np.sum((y[sl] - design[sl] @ beta) ** 2))

        full = rss(slice(0, k))
        best, best_s = -np.inf, None
        for s in range(q + 1, k - q):
            part = rss(slice(0, s)) + rss(slice(s, k))
            stat = ((full - part) / q) / max(part / (k - 2 * q), 1e-300)
            if stat > best:
                best, best_s = stat, s
        if best_s is None:
            return None
        split = LtrSplit(best_s, best, float(stats.f.ppf(0.95, q, k - 2 * q)))
        return split if split.significant else None

    return fn


# ------------------------------------------------------------------ clustering


def _kmeans(x: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, float]:
    if x.shape[0] < k:
        raise InitError(f"{x.shape[0]} rows cannot form {k} clusters")
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(x)
    # relabel by first appearance so output order is data driven
    _, first = np.unique(km.labels_, return_index=True)
    order = np.argsort(first)
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    return remap[km.labels_], float(km.inertia_)


def _kregressions(x: np.ndarray, k: int, resp_ind, seed: int, n_start: int = 20,
                  max_iter: int = 100) -> tuple[np.ndarray, float]:
    """Rows clustered by the regression line fitting them best.

    The first start uses k-means labels; the others start from lines through
    randomly chosen minimal subsets of rows. The lowest residual sum of
    squares wins (lowest start index on ties).
    """
    y, xc = split_columns(x, resp_ind)
    design = np.column_stack([np.ones(len(y)), xc])
    n, q = design.shape
    if n < k * (q + 1):
        raise InitError(f"{n} rows cannot support {k} regressions")
    rng = np.random.default_rng(seed)

    def residuals(betas):
        return np.column_stack([np.sum((y - design @ b) ** 2, axis=1) for b in betas])

    best_lab, best_ss = None, np.inf
    for start in range(n_start):
        if start == 0:
            lab = _kmeans(x, k, seed)[0]
        else:
            betas = [linalg.lstsq(design[idx], y[idx])[0]
                     for idx in (rng.choice(n, q, replace=False) for _ in range(k))]
            lab = np.argmin(residuals(betas), axis=1)
        for _ in range(max_iter):
            if np.unique(lab).size < k:
                break
            betas = [linalg.lstsq(design[lab == c], y[lab == c])[0] for c in range(k)]
            resid = residuals(betas)
            new = np.argmin(resid, axis=1)
            if np.array_equal(new, lab):
                break
            lab = new
        if np.bincount(lab, minlength=k).min() < q + 1:
            continue
        betas = [linalg.lstsq(design[lab == c], y[lab == c])[0] for c in range(k)]
        ss = float(residuals(betas)[np.arange(n), lab].sum())
        if ss < best_ss:
            best_lab, best_ss = lab.copy(), ss
    if best_lab is None:
        raise InitError("k-regressions produced empty clusters")
    return best_lab, best_ss


def elbow(wss) -> int:
    """Component count with the largest second difference of within-SS."""
    wss = np.asarray(wss, dtype=float)
    if wss.size < 3:
        return 1
    second = wss[:-2] - 2 * wss[1:-1] + wss[2:]
    return int(np.argmax(second)) + 2


def choose_nmix(x: np.ndarray, seed: int, regress: bool = False, resp_ind=(0,), kmax: int = 10) -> int:
    wss = []
    for k in range(1, min(kmax, x.shape[0]) + 1):
        try:
            wss.append(_kregressions(x, k, resp_ind, seed)[1] if regress else _kmeans(x, k, seed)[1])
        except InitError:
            break
    return elbow(wss)


@dataclass
class ClusterResult:
    """Initial state labels and mixture sub-labels for every row."""

    states: np.ndarray
    mix: np.ndarray
    nmix: np.ndarray
    N: np.ndarray
    ltr: bool = False
    final_absorb: bool = False
    miss: bool = False
    regress: bool = False
    resp_ind: list = field(default_factory=lambda: [0])

    @property
    def nstate(self) -> int:
        return self.nmix.size

    def durations(self) -> list[np.ndarray]:
        """Pooled run lengths of every state across sequences."""
        out = [[] for _ in range(self.nstate)]
        off = np.concatenate([[0], np.cumsum(self.N)])
        for i in range(self.N.size):
            lab = self.states[off[i]:off[i + 1]]
            start = 0
            for t in range(1, lab.size + 1):
                if t == lab.size or lab[t] != lab[start]:
                    out[lab[start]].append(t - start)
                    start = t
        return [np.array(d, dtype=int) for d in out]

    def to_dict(self) -> dict:
        return {"states": [int(s) + 1 for s in self.states], "mix": [int(m) + 1 for m in self.mix],
                "nmix": [int(n) for n in self.nmix], "N": [int(n) for n in self.N],
                "ltr": self.ltr, "final_absorb": self.final_absorb, "miss": self.miss,
                "regress": self.regress, "resp_ind": [int(i) + 1 for i in self.resp_ind]}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterResult":
        return cls(np.asarray(d["states"]) - 1, np.asarray(d["mix"]) - 1, np.asarray(d["nmix"]),
                   np.asarray(d["N"]), d["ltr"], d["final_absorb"], d["miss"], d["regress"],
                   [int(i) - 1 for i in d["resp_ind"]])


def initial_cluster(train: SequenceSet, nstate: int, nmix="auto", ltr: bool = False,
                    final_absorb: bool = False, regress: bool = False, resp_ind=(0,),
                    seed: int = 0) -> ClusterResult:
    """State and mixture-component labels used to initialize a model.

    ``nmix`` is an integer, one integer per state, ``"auto"`` (elbow of the
    within-cluster sum of squares over 1..10) or ``None`` (single component).
    """
    if nstate < 1:
        raise InitError("nstate must be positive")
    miss = train.has_missing
    data = impute_initial(train) if miss else train
    x = data.x
    resp_ind = [int(i) for i in np.atleast_1d(resp_ind)]
    if nstate == 1:
        states = np.zeros(len(x), dtype=int)
    elif ltr:
        n_seg = nstate - 1 if final_absorb else nstate
        split_fn = chow_split_fn(resp_ind) if regress else ltr_clus
        states = np.empty(len(x), dtype=int)
        for sl in data.slices():
            seq = x[sl]
            body = seq[:-1] if final_absorb else seq
            lab = np.full(len(seq), nstate - 1)
            if n_seg == 1:
                lab[:len(body)] = 0
            else:
                for k, (a, b) in enumerate(segment_sequence(body, n_seg, split_fn)):
                    lab[a:b] = k
            states[sl] = lab
    elif regress:
        states = _kregressions(x, nstate, resp_ind, seed)[0]
    else:
        states = _kmeans(x, nstate, seed)[0]
    present = np.bincount(states, minlength=nstate)
    if np.any(present == 0):
        raise InitError(f"state {int(np.argmin(present)) + 1} received no rows")
    if nmix is None:
        counts = np.ones(nstate, dtype=int)
    elif isinstance(nmix, str):
        if nmix != "auto":
            raise InitError(f"unknown nmix option {nmix!r}")
        counts = np.array([choose_nmix(x[states == j], seed, regress, resp_ind) for j in range(nstate)])
    else:
        counts = np.broadcast_to(np.asarray(nmix, dtype=int), (nstate,)).copy()
    if np.any(counts < 1):
        raise InitError("component counts must be positive")
    mix = np.zeros(len(x), dtype=int)
    for j in range(nstate):
        rows = np.nonzero(states == j)[0]
        if rows.size < counts[j]:
            raise InitError(f"state {j + 1} has {rows.size} rows for {counts[j]} components")
        if counts[j] > 1:
            sub = x[rows]
            mix[rows] = (_kregressions(sub, counts[j], resp_ind, seed)[0] if regress
                         else _kmeans(sub, counts[j], seed)[0])
    return ClusterResult(states, mix, counts, data.N.copy(), ltr, final_absorb, miss, regress, resp_ind)


# ------------------------------------------------------------ model parameters


def _mixmvn_from_labels(x, clus: ClusterResult) -> MixMVN:
    w, mu, cov = [], [], []
    p = x.shape[1]
    for j in range(clus.nstate):
        xs, ms = x[clus.states == j], clus.mix[clus.states == j]
        state_cov = np.atleast_2d(np.cov(xs.T, bias=True)) if len(xs) > 1 else np.eye(p)
        wj, mj, cj = [], [], []
        for k in range(clus.nmix[j]):
            rows = xs[ms == k]
            wj.append(len(rows) / len(xs))
            mj.append(rows.mean(axis=0))
            c = np.atleast_2d(np.cov(rows.T, bias=True)) if len(rows) > 1 else state_cov
            if not np.all(np.isfinite(c)) or np.trace(c) <= 0:
                c = state_cov if np.trace(state_cov) > 0 else np.eye(p)
            _, c = safe_cholesky(c)
            cj.append(c)
        w.append(np.array(wj))
        mu.append(np.array(mj))
        cov.append(np.array(cj))
    return MixMVN(MixMVNParams(w, mu, cov))


def _mixlm_from_labels(x, clus: ClusterResult, resp_ind) -> MixLM:
    y, xc = split_columns(x, resp_ind)
    design = np.column_stack([np.ones(len(y)), xc])
    b0, B, S, mp = [], [], [], []
    for j in range(clus.nstate):
        in_state = clus.states == j
        bj, Bj, Sj, pj = [], [], [], []
        for k in range(clus.nmix[j]):
            rows = in_state & (clus.mix == k)
            if np.linalg.matrix_rank(design[rows]) < design.shape[1]:
                raise InitError(f"rank-deficient regression design in state {j + 1}")
            beta, *_ = linalg.lstsq(design[rows], y[rows])
            res = y[rows] - design[rows] @ beta
            cov = np.atleast_2d(res.T @ res / rows.sum())
            _, cov = safe_cholesky(cov if np.trace(cov) > 0 else np.eye(y.shape[1]))
            bj.append(beta[0])
            Bj.append(beta[1:])
            Sj.append(cov)
            pj.append(rows.sum() / in_state.sum())
        b0.append(np.array(bj))
        B.append(np.array(Bj))
        S.append(np.array(Sj))
        mp.append(np.array(pj))
    return MixLM(MixLMParams(b0, B, S, mp), resp_ind)


def _onehot(states: np.ndarray, J: int) -> np.ndarray:
    w = np.zeros((states.size, J))
    w[np.arange(states.size), states] = 1.0
    return w


def build_emission(family: str, x: np.ndarray, clus: ClusterResult, resp_ind=None, K: int | None = None,
                   lam: float = 1.0):
    resp_ind = clus.resp_ind if resp_ind is None else [int(i) for i in np.atleast_1d(resp_ind)]
    if family == "mixmvnorm":
        return _mixmvn_from_labels(x, clus)
    if family == "mixlm":
        return _mixlm_from_labels(x, clus, resp_ind)
    if family == "nonpar":
        params = uniform_spline_params(x, clus.nstate, K or 10, lam)
        return Nonpar(params).mstep(x, _onehot(clus.states, clus.nstate))
    if family == "addreg":
        return AddReg(None, resp_ind, K=K or 10, lam=lam, n_states=clus.nstate).mstep(
            x, _onehot(clus.states, clus.nstate))
    raise InitError(f"unknown emission family {family!r}")


def _ltr_transition(J: int, semi: np.ndarray, mean_dur: np.ndarray) -> np.ndarray:
    P = np.zeros((J, J))
    for i in range(J - 1):
        forward_states = np.arange(i + 1, J)
        row = np.zeros(J)
        if forward_states.size == 1:
            row[i + 1] = 1.0
        else:
            row[i + 1] = LTR_NEXT
            row[forward_states[1:]] = (1 - LTR_NEXT) / (forward_states.size - 1)
        if not semi[i]:
            stay = 1.0 - 1.0 / max(mean_dur[i], 1.0)
            row *= 1 - stay
            row[i] = stay
        P[i] = row
    P[J - 1, J - 1] = 1.0
    return P


def _empirical_transition(clus: ClusterResult, semi: np.ndarray) -> np.ndarray:
    J = clus.nstate
    counts = np.zeros((J, J))
    off = np.concatenate([[0], np.cumsum(clus.N)])
    for i in range(clus.N.size):
        lab = clus.states[off[i]:off[i + 1]]
        np.add.at(counts, (lab[:-1], lab[1:]), 1.0)
    counts += 0.01
    counts[semi, semi] = 0.0
    if J == 1:
        return np.ones((1, 1))
    return counts / counts.sum(axis=1, keepdims=True)


def _sojourn_spec(kind, clus: ClusterResult, semi: np.ndarray, M: np.ndarray) -> SojournSpec | None:
    if not semi.any():
        return None
    if kind is None:
        raise InitError("semi-Markovian states need a sojourn family")
    pools = clus.durations()
    for j in np.nonzero(semi)[0]:
        if pools[j].size == 0:
            raise InitError(f"empty duration pool for state {j + 1}")
    if kind == "nonparametric":
        rows = []
        for j in range(clus.nstate):
            if not semi[j]:
                rows.append([])
                continue
            h = np.bincount(np.clip(pools[j], 1, M[j]), minlength=M[j] + 1)[1:].astype(float)
            h += 0.01 * h.sum() / M[j]
            rows.append(list(h / h.sum()))
        return SojournSpec("nonparametric", {"d": rows})
    if kind == "auto":
        kind = select_sojourn_auto([pools[j] for j in np.nonzero(semi)[0]], PARAMETRIC, int(M.max()))
    if kind not in PARAMETRIC:
        raise InitError(f"unknown sojourn family {kind!r}")
    fits = []
    for j in range(clus.nstate):
        if not semi[j]:
            fits.append(None)
            continue
        durations = pools[j].astype(float) - 0.5
        try:
            fits.append(fit_sojourn_moments(durations, None, kind))
        except SojournError:
            # a single distinct duration: spread it with unit variance
            m = max(durations.mean(), 0.5)
            fits.append(fit_sojourn_moments(np.array([m - 0.5, m + 0.5]), None, kind))
    return spec_from_fits(kind, fits)


def initialize_model(clus: ClusterResult, data: SequenceSet, family: str = "mixmvnorm",
                     sojourn="gamma", M=None, semi=None, resp_ind=None, K: int | None = None,
                     lam: float = 1.0) -> ModelSpec:
    """Initial model from a clustering of ``data``."""
    J = clus.nstate
    x = impute_initial(data).x if data.has_missing else data.x
    semi = np.zeros(J, dtype=bool) if semi is None else np.asarray(semi, dtype=bool)
    if semi.size != J:
        raise InitError(f"semi needs {J} entries")
    if clus.ltr and semi[-1]:
        raise InitError("the final state of a left-to-right model must be Markovian (absorbing)")
    if M is None:
        M = math.ceil(1.2 * int(data.N.max()))
    M = np.broadcast_to(np.asarray(M, dtype=int), (J,)).copy()
    try:
        emission = build_emission(family, x, clus, resp_ind, K, lam)
    except EmissionError as exc:
        raise InitError(str(exc)) from None
    soj = _sojourn_spec(sojourn, clus, semi, M)
    if clus.ltr:
        init = np.zeros(J)
        init[0] = 1.0
        mean_dur = np.array([d.mean() if d.size else 1.0 for d in clus.durations()])
        P = _ltr_transition(J, semi, mean_dur)
    else:
        off = np.concatenate([[0], np.cumsum(clus.N)])[:-1]
        init = np.bincount(clus.states[off], minlength=J).astype(float)
        init /= init.sum()
        P = _empirical_transition(clus, semi)
    spec = ModelSpec(init, P, semi, M, soj, emission)
    from .model import validate_model

    report = validate_model(spec)
    if not report.ok:
        raise ModelError(str(report))
    return spec
