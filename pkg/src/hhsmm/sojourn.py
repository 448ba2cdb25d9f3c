"""Sojourn-time distributions for semi-Markovian states.

Continuous families (gamma, Weibull, log-normal) are discretized onto the
unit grid ``1..M`` through differences of their cumulative distribution
function; the nonparametric family stores an explicit probability mass row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, special, stats

FAMILIES = ("gamma", "weibull", "lognormal", "nonparametric")
PARAMETRIC = ("gamma", "weibull", "lognormal")


class SojournError(ValueError):
    pass


@dataclass
class SojournSpec:
    """Family tag plus per-state parameters.

    ``params`` maps parameter names to per-state lists: ``shape``/``scale``
    for gamma and Weibull, ``mu``/``sigma`` for log-normal and ``d`` (a list
    of pmf rows) for the nonparametric family. Entries belonging to
    Markovian states are placeholders (zeros, or empty rows).
    """

    type: str
    params: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        if self.type not in FAMILIES:
            raise SojournError(f"unknown sojourn family {self.type!r}")

    def n_params(self, j: int) -> int:
        if self.type == "nonparametric":
            return max(len(self.params["d"][j]) - 1, 0)
        return 2

    def to_dict(self) -> dict:
        out: dict = {"type": self.type}
        for key, val in self.params.items():
            out[key] = [np.asarray(v, dtype=float).tolist() for v in val] if key == "d" \
                else np.asarray(val, dtype=float).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SojournSpec":
        params = {k: v for k, v in d.items() if k != "type"}
        if "d" in params:
            params["d"] = [list(map(float, row)) for row in params["d"]]
        else:
            params = {k: list(map(float, v)) for k, v in params.items()}
        return cls(d["type"], params)


def _frozen(spec: SojournSpec, j: int):
    p = spec.params
    if spec.type == "gamma":
        shape, scale = p["shape"][j], p["scale"][j]
        if not (shape > 0 and scale > 0):
            raise SojournError(f"gamma parameters of state {j} must be positive")
        return stats.gamma(a=shape, scale=scale)
    if spec.type == "weibull":
        shape, scale = p["shape"][j], p["scale"][j]
        if not (shape > 0 and scale > 0):
            raise SojournError(f"weibull parameters of state {j} must be positive")
        return stats.weibull_min(c=shape, scale=scale)
    if spec.type == "lognormal":
        mu, sigma = p["mu"][j], p["sigma"][j]
        if not sigma > 0:
            raise SojournError(f"lognormal sigma of state {j} must be positive")
        return stats.lognorm(s=sigma, scale=np.exp(mu))
    raise SojournError(f"{spec.type} has no continuous density")


def discretize(dist, M: int) -> np.ndarray:
    """Mass of ``dist`` on ``(u-1, u]`` for ``u = 1..M``, renormalized on ``(0, M]``."""
    grid = np.arange(M + 1, dtype=float)
    cdf = dist.cdf(grid)
    sf = dist.sf(grid)
    # cdf differences lose precision in the upper tail, sf differences in the lower
    lower = np.diff(cdf)
    upper = sf[:-1] - sf[1:]
    d = np.where(cdf[1:] < 0.5, lower, upper)
    d = np.clip(d, 0.0, None)
    total = d.sum()
    if not total > 0:
        raise SojournError("zero sojourn mass on (0, M]")
    return d / total


def sojourn_pmf(spec: SojournSpec, j: int, M: int) -> np.ndarray:
    """Discretized sojourn pmf ``d_j(1..M)`` of state ``j``."""
    if M < 1:
        raise SojournError("M must be >= 1")
    if spec.type == "nonparametric":
        row = np.asarray(spec.params["d"][j], dtype=float)
        if np.any(row < 0):
            raise SojournError(f"negative sojourn mass in state {j}")
        out = np.zeros(M)
        n = min(M, row.size)
        out[:n] = row[:n]
        total = out.sum()
        if not total > 0:
            raise SojournError("zero sojourn mass on (0, M]")
        return out / total
    return discretize(_frozen(spec, j), M)


def geometric_pmf(p_stay: float, M: int) -> np.ndarray:
    """Untruncated geometric sojourn ``(1 - p) p^(u-1)``, ``u = 1..M``."""
    if not 0 <= p_stay < 1:
        raise SojournError("geometric sojourn needs 0 <= p < 1")
    u = np.arange(M)
    return (1.0 - p_stay) * p_stay ** u


def sojourn_survival(d) -> np.ndarray:
    """Survival ``D(u) = sum_{v >= u} d(v)``."""
    d = np.asarray(d, dtype=float)
    return np.cumsum(d[::-1])[::-1]


def _weighted_moments(x, w):
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    keep = w > 0
    x, w = x[keep], w[keep]
    if np.unique(x).size < 2:
        raise SojournError("zero variance")
    m = np.sum(w * x) / w.sum()
    v = np.sum(w * (x - m) ** 2) / w.sum()
    if not v > 0:
        raise SojournError("zero variance")
    return m, v


def _weibull_shape(cv2: float) -> float:
    def excess(a):
        g1 = special.gammaln(1 + 1 / a)
        g2 = special.gammaln(1 + 2 / a)
        return np.expm1(g2 - 2 * g1) - cv2

    lo, hi = 0.05, 100.0
    if excess(lo) < 0:
        return lo
    if excess(hi) > 0:
        return hi
    return optimize.brentq(excess, lo, hi, xtol=1e-10)


def fit_sojourn_moments(durations, weights=None, type: str = "gamma") -> dict[str, float]:
    """Weighted method-of-moments estimates for one state.

    Returns ``{"shape", "scale"}`` for gamma/Weibull and ``{"mu", "sigma"}``
    for log-normal.
    """
    durations = np.asarray(durations, dtype=float)
    if weights is None:
        weights = np.ones_like(durations)
    if type == "lognormal":
        if np.any(durations[np.asarray(weights) > 0] <= 0):
            raise SojournError("lognormal durations must be positive")
        with np.errstate(divide="ignore"):
            m, v = _weighted_moments(np.log(np.where(durations > 0, durations, 1.0)), weights)
        return {"mu": m, "sigma": np.sqrt(v)}
    m, v = _weighted_moments(durations, weights)
    if type == "gamma":
        return {"shape": m * m / v, "scale": v / m}
    if type == "weibull":
        shape = _weibull_shape(v / (m * m))
        scale = m / np.exp(special.gammaln(1 + 1 / shape))
        return {"shape": shape, "scale": scale}
    raise SojournError(f"no moment estimator for {type!r}")


def spec_from_fits(type: str, fits: Sequence[dict | None]) -> SojournSpec:
    """Assemble a :class:`SojournSpec` from per-state fits (``None`` = Markovian)."""
    keys = ("mu", "sigma") if type == "lognormal" else ("shape", "scale")
    params = {k: [0.0 if f is None else float(f[k]) for f in fits] for k in keys}
    return SojournSpec(type, params)


def _pooled_chisq(counts: np.ndarray, expected: np.ndarray) -> tuple[float, int]:
    obs_bins, exp_bins = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(counts, expected):
        o_acc += o
        e_acc += e
        if e_acc >= 5:
            obs_bins.append(o_acc)
            exp_bins.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if exp_bins:
            obs_bins[-1] += o_acc
            exp_bins[-1] += e_acc
        else:
            obs_bins.append(o_acc)
            exp_bins.append(e_acc)
    obs_bins = np.array(obs_bins)
    exp_bins = np.array(exp_bins)
    return float(np.sum((obs_bins - exp_bins) ** 2 / exp_bins)), len(exp_bins)


def select_sojourn_auto(durations: Sequence[Sequence[int]],
                        candidates: Sequence[str] = PARAMETRIC,
                        M: int | None = None) -> str:
    """Pick the parametric family with the smallest pooled chi-square statistic.

    ``durations`` holds one array of observed integer sojourn lengths per
    semi-Markovian state.
    """
    pools = [np.asarray(d, dtype=int) for d in durations]
    if any(p.size == 0 for p in pools):
        raise SojournError("empty duration pool")
    best, best_stat = None, np.inf
    for fam in candidates:
        total = 0.0
        for pool in pools:
            Mj = M or int(max(pool.max() * 2, 10))
            fit = fit_sojourn_moments(pool - 0.5, None, fam)
            d = sojourn_pmf(spec_from_fits(fam, [fit]), 0, Mj)
            counts = np.bincount(np.clip(pool, 1, Mj), minlength=Mj + 1)[1:]
            stat, nbins = _pooled_chisq(counts, pool.size * d)
            if nbins < 2:
                raise SojournError("fewer than 2 usable bins for chi-square selection")
            total += stat
        if total < best_stat:
            best, best_stat = fam, total
    return best


@dataclass
class SojournSummary:
    mean: float
    sd: float
    mode: int
    lower: int
    upper: int


def sojourn_summary(d, gamma: float = 0.05) -> SojournSummary:
    """Mean, sd, mode and tail quantiles of a pmf on ``1..M``.

    ``lower`` is the largest ``v`` with ``sum_{u<=v} d(u) <= gamma/2`` (0 if
    none); ``upper`` is the smallest ``v`` with ``sum_{u>v} d(u) <= gamma/2``.
    """
    d = np.asarray(d, dtype=float)
    if abs(d.sum() - 1) > 1e-8:
        raise SojournError("sojourn pmf is not normalized")
    u = np.arange(1, d.size + 1)
    mean = float(np.sum(u * d))
    sd = float(np.sqrt(max(np.sum(u * u * d) - mean ** 2, 0.0)))
    cum = np.cumsum(d)
    below = np.nonzero(cum <= gamma / 2)[0]
    lower = int(below[-1] + 1) if below.size else 0
    tail = 1.0 - cum
    upper = int(np.nonzero(tail <= gamma / 2 + 1e-15)[0][0] + 1)
    return SojournSummary(mean, sd, int(np.argmax(d) + 1), lower, upper)
