"""Penalized B-spline emission densities.

Each state models every data dimension independently with a density
``f(x) = sum_k a_k phi_k(x)``, where ``phi_k`` are cubic B-splines on an
equally spaced grid scaled to unit integral and ``a`` lies on the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .base import Emission, EmissionError, check_weights

DENSITY_FLOOR = 1e-300


def knot_spacing(n_basis: int, lo: float, hi: float) -> float:
    if n_basis < 4:
        raise EmissionError("at least 4 cubic basis functions are required")
    if not hi > lo:
        raise EmissionError("range must satisfy hi > lo")
    return (hi - lo) / (n_basis - 3)


def bspline_design(points, n_basis: int, lo: float, hi: float, strict: bool = True) -> np.ndarray:
    """Raw cubic B-spline values, shape ``(n, n_basis)``.

    Basis ``k`` is supported on ``[lo + (k-3)h, lo + (k+1)h]`` so that the
    whole family covers ``[lo - 3h, hi + 3h]``. Points outside that padded
    range raise when ``strict``; otherwise their rows are zero.
    """
    x = np.atleast_1d(np.asarray(points, dtype=float))
    h = knot_spacing(n_basis, lo, hi)
    # three extra knots per side make the padded range the base interval
    t = lo + h * np.arange(-6, n_basis + 4, dtype=float)
    a, b = t[3], t[-4]
    tol = 1e-9 * h
    out_of_range = (x < a - tol) | (x > b + tol)
    if strict and np.any(out_of_range):
        raise EmissionError(f"points outside the padded spline range [{a:.6g}, {b:.6g}]")
    xe = np.clip(np.where(out_of_range, a, x), a, b)
    B = BSpline.design_matrix(xe, t, 3).toarray()[:, 3:3 + n_basis]
    B[out_of_range] = 0.0
    return B


def bspline_basis(points, K: int, range, strict: bool = True) -> np.ndarray:
    """Density-normalized cubic basis with ``2K+1`` columns over ``range``.

    Every column integrates to 1, so any simplex combination is a density.
    """
    if K < 2:
        raise EmissionError("K must be >= 2")
    lo, hi = float(range[0]), float(range[1])
    n = 2 * K + 1
    return bspline_design(points, n, lo, hi, strict) / knot_spacing(n, lo, hi)


def second_difference(n: int) -> np.ndarray:
    """``(n-2, n)`` matrix with rows ``a_k - 2 a_{k+1} + a_{k+2}``."""
    return np.diff(np.eye(n), n=2, axis=0)


@dataclass
class SplineEmissionParams:
    """Coefficients ``a[j][d]`` (length ``2K+1``), per-dimension ranges and ``lambda_j``."""

    K: int
    range: np.ndarray
    a: np.ndarray
    lam: np.ndarray = field(default=None)

    def __post_init__(self):
        self.range = np.asarray(self.range, dtype=float).reshape(-1, 2)
        self.a = np.asarray(self.a, dtype=float)
        if self.a.ndim != 3 or self.a.shape[2] != 2 * self.K + 1:
            raise EmissionError("a must have shape (J, p, 2K+1)")
        if self.a.shape[1] != self.range.shape[0]:
            raise EmissionError("one range per data dimension is required")
        if self.lam is None:
            self.lam = np.ones(self.a.shape[0])
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if np.any(self.lam < 0):
            raise EmissionError("smoothing parameters must be nonnegative")

    @property
    def n_states(self) -> int:
        return self.a.shape[0]

    @property
    def dim(self) -> int:
        return self.a.shape[1]


def uniform_spline_params(x, n_states: int, K: int, lam: float = 1.0) -> SplineEmissionParams:
    """Flat coefficients over the observed range of each column of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lo, hi = np.nanmin(x, axis=0), np.nanmax(x, axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    n = 2 * K + 1
    a = np.full((n_states, x.shape[1], n), 1.0 / n)
    return SplineEmissionParams(K, np.column_stack([lo, hi]), a, np.full(n_states, lam))


def _dim_log_density(xd: np.ndarray, a: np.ndarray, K: int, rng_d) -> np.ndarray:
    obs = ~np.isnan(xd)
    out = np.zeros(xd.size)
    if obs.any():
        vals = bspline_basis(xd[obs], K, rng_d, strict=False) @ a
        out[obs] = np.log(np.maximum(vals, DENSITY_FLOOR))
    return out


def log_dnonpar(x: np.ndarray, j: int, params: SplineEmissionParams) -> np.ndarray:
    """Log density of state ``j`` for each row; NaN dimensions are marginalized."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.dim:
        raise EmissionError("observation dimension does not match the parameters")
    tot = sum(_dim_log_density(x[:, d], params.a[j, d], params.K, params.range[d])
              for d in range(params.dim))
    return np.maximum(tot, np.log(DENSITY_FLOOR))


def dnonpar(x, j: int, params: SplineEmissionParams):
    """Product over dimensions of ``sum_k a_k phi_k(x_d)``, floored at 1e-300."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    val = np.exp(log_dnonpar(x.reshape(1, -1) if single else x, j, params))
    return float(val[0]) if single else val


def penalized_objective(a, Phi, w, lam, D) -> float:
    f = Phi @ a
    if np.any(f[w > 0] <= 0):
        return -np.inf
    pos = w > 0
    da = D @ a
    return float(w[pos] @ np.log(f[pos]) - 0.5 * lam * da @ da)


def _tangent_basis(m: int) -> np.ndarray:
    """Orthonormal basis of ``{v in R^m : sum(v) = 0}``."""
    if m < 2:
        return np.zeros((m, 0))
    q, _ = np.linalg.qr(np.vstack([np.ones(m), np.eye(m)[:-1]]).T)
    return q[:, 1:]


def _newton_direction(H, grad, free, a):
    """Newton direction on the free face; zero-valued coordinates that would
    turn negative are fixed at the bound and the step is recomputed."""
    free = free.copy()
    while True:
        idx = np.nonzero(free)[0]
        if idx.size < 2:
            return None
        Z = _tangent_basis(idx.size)
        Hr = Z.T @ H[np.ix_(idx, idx)] @ Z
        gr = Z.T @ grad[idx]
        try:
            step = Z @ linalg.solve(Hr + 1e-12 * np.trace(Hr) / len(Hr) * np.eye(len(Hr)), gr,
                                    assume_a="pos")
        except linalg.LinAlgError:
            step = Z @ gr
        blocked = (a[idx] <= 1e-14) & (step < 0)
        if not blocked.any():
            delta = np.zeros(a.size)
            delta[idx] = step
            return delta
        free[idx[blocked]] = False


def simplex_newton(Phi, w, lam, a0, max_iter: int = 50, tol: float = 1e-8):
    """Maximize the penalized weighted log-likelihood over the simplex.

    Active-set Newton steps restricted to ``sum(delta) = 0`` with a feasible
    step bound and Armijo backtracking, so the objective never decreases.

    Returns the coefficients and the objective trace (one entry per accepted
    iterate, starting with ``a0``).
    """
    n = Phi.shape[1]
    D = second_difference(n)
    P = D.T @ D
    pos = w > 0
    Phi, w = Phi[pos], w[pos]
    a = np.asarray(a0, dtype=float).copy()
    obj = penalized_objective(a, Phi, w, lam, D)
    if not np.isfinite(obj):
        raise EmissionError("starting coefficients give zero density at a data point")
    trace = [obj]
    for _ in range(max_iter):
        f = Phi @ a
        grad = Phi.T @ (w / f) - lam * (P @ a)
        A = (Phi * (w / f ** 2)[:, None]).T @ Phi
        H = A + lam * P
        free = a > 1e-14
        nu = grad[free].mean()
        free |= grad > nu + 1e-12 * max(1.0, abs(nu))
        delta = _newton_direction(H, grad, free, a)
        if delta is None:
            break
        slope = grad @ delta
        if slope <= 0:
            break
        neg = delta < 0
        alpha = min(1.0, float(np.min(-a[neg] / delta[neg]))) if neg.any() else 1.0
        bounded = alpha < 1.0
        accepted = False
        for _ in range(40):
            trial = a + alpha * delta
            trial[trial < 1e-15] = 0.0
            trial /= trial.sum()
            new = penalized_objective(trial, Phi, w, lam, D)
            if new >= obj + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        gain = new - obj
        a, obj = trial, new
        trace.append(obj)
        if not bounded and gain <= tol * max(1.0, abs(obj)):
            break
    if not np.isfinite(obj):
        raise EmissionError("non-finite spline objective")
    return a, trace


def effective_df(a, Phi, w, lam) -> tuple[float, float]:
    """``trace(H(lam)^-1 H(0))`` on the free face of the simplex and ``|D2 a|^2``."""
    n = Phi.shape[1]
    D = second_difference(n)
    pos = w > 0
    Phi, w = Phi[pos], w[pos]
    f = Phi @ a
    A = (Phi * (w / f ** 2)[:, None]).T @ Phi
    idx = np.nonzero(a > 1e-14)[0]
    Z = _tangent_basis(idx.size)
    A_r = Z.T @ A[np.ix_(idx, idx)] @ Z
    H_r = A_r + lam * (Z.T @ (D.T @ D)[np.ix_(idx, idx)] @ Z)
    df = float(np.trace(linalg.solve(H_r, A_r))) if len(H_r) else 0.0
    da = D @ a
    return df, float(da @ da)


LAMBDA_MAX = 1e12


def update_lambda(df_total: float, rough_total: float, p: int) -> float:
    """``(df - p) / sum (D2 a)^2``, clipped to ``[0, 1e12]``."""
    if rough_total <= 0:
        return LAMBDA_MAX
    return float(np.clip((df_total - p) / rough_total, 0.0, LAMBDA_MAX))


def nonpar_mstep(x, weights, params_prev: SplineEmissionParams, max_iter: int = 50,
                 lambda_updates: int = 1) -> SplineEmissionParams:
    """Penalized weighted fit of the coefficients of every state and dimension.

    Each state first fits ``a`` at its current ``lambda`` and then applies the
    smoothing-parameter update ``lambda_updates`` times, refitting after each.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    pr = params_prev
    w = check_weights(weights, pr.n_states)
    a_new = pr.a.copy()
    lam_new = pr.lam.copy()
    designs = []
    for d in range(pr.dim):
        obs = ~np.isnan(x[:, d])
        designs.append((obs, bspline_basis(x[obs, d], pr.K, pr.range[d])))
    for j in range(pr.n_states):
        lam = lam_new[j]
        for rep in range(lambda_updates + 1):
            df_tot = rough_tot = 0.0
            for d, (obs, Phi) in enumerate(designs):
                wj = w[obs, j]
                start = 0.5 * a_new[j, d] + 0.5 / Phi.shape[1]
                a_new[j, d], _ = simplex_newton(Phi, wj, lam, start, max_iter)
                df, rough = effective_df(a_new[j, d], Phi, wj, lam)
                df_tot += df
                rough_tot += rough
            if rep < lambda_updates:
                lam = update_lambda(df_tot, rough_tot, pr.dim)
        lam_new[j] = lam
    return SplineEmissionParams(pr.K, pr.range.copy(), a_new, lam_new)


def rnonpar(j: int, params: SplineEmissionParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one row: per dimension pick basis ``k ~ a`` then sample that B-spline."""
    out = np.empty(params.dim)
    n = 2 * params.K + 1
    for d in range(params.dim):
        lo, hi = params.range[d]
        h = knot_spacing(n, lo, hi)
        a = params.a[j, d]
        k = rng.choice(n, p=a / a.sum())
        # a cardinal cubic B-spline is the density of a sum of 4 uniforms
        out[d] = lo + (k - 3) * h + h * rng.random(4).sum()
    return out


class Nonpar(Emission):
    """Per-dimension penalized spline density emission."""

    family = "nonpar"

    def __init__(self, params: SplineEmissionParams, max_iter: int = 50, lambda_updates: int = 1):
        self.params = params
        self.max_iter = max_iter
        self.lambda_updates = lambda_updates

    @property
    def n_states(self) -> int:
        return self.params.n_states

    def log_density(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.column_stack([log_dnonpar(x, j, self.params) for j in range(self.n_states)])

    def mstep(self, x, weights):
        new = nonpar_mstep(x, weights, self.params, self.max_iter, self.lambda_updates)
        return Nonpar(new, self.max_iter, self.lambda_updates)

    def sample(self, j, rng, context=None):
        return rnonpar(j, self.params, rng)

    def n_params(self) -> int:
        return self.n_states * self.params.dim * (2 * self.params.K)

    def to_dict(self) -> dict:
        pr = self.params
        return {"family": self.family, "K": int(pr.K), "range": pr.range.tolist(),
                "a": pr.a.tolist(), "lambda": pr.lam.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(SplineEmissionParams(int(d["K"]), d["range"], d["a"], d["lambda"]))
