"""Model specification, validation and JSON persistence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .emissions import Emission, emission_from_dict
from .sojourn import SojournError, SojournSpec, sojourn_pmf

PROB_TOL = 1e-12


class ModelError(ValueError):
    pass


@dataclass
class ModelSpec:
    """Hybrid Markov/semi-Markov model.

    Attributes
    ----------
    init : ndarray (J,)
        Initial state probabilities.
    transition : ndarray (J, J)
        Row-stochastic transitions; semi-Markovian rows have a zero diagonal.
    semi : ndarray of bool (J,)
        Which states carry an explicit sojourn distribution.
    M : ndarray of int (J,)
        Sojourn truncation bound per state.
    sojourn : SojournSpec or None
        Required when any state is semi-Markovian.
    emission : Emission
    """

    init: np.ndarray
    transition: np.ndarray
    semi: np.ndarray
    M: np.ndarray
    sojourn: SojournSpec | None
    emission: Emission
    _pmf_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.init = np.asarray(self.init, dtype=float)
        self.transition = np.atleast_2d(np.asarray(self.transition, dtype=float))
        self.semi = np.asarray(self.semi, dtype=bool).reshape(-1)
        J = self.init.size
        self.M = np.broadcast_to(np.asarray(self.M, dtype=int), (J,)).copy()

    @property
    def J(self) -> int:
        return self.init.size

    def sojourn_pmf(self, j: int) -> np.ndarray:
        """Discretized sojourn pmf of semi state ``j`` on ``1..M_j``."""
        if not self.semi[j]:
            raise ModelError(f"state {j} is Markovian")
        if j not in self._pmf_cache:
            if self.sojourn is None:
                raise ModelError("semi-Markovian states need a sojourn specification")
            self._pmf_cache[j] = sojourn_pmf(self.sojourn, j, int(self.M[j]))
        return self._pmf_cache[j]

    def with_updates(self, **kw) -> "ModelSpec":
        kw.setdefault("_pmf_cache", {})
        return replace(self, **kw)

    def n_params(self, lock_init: bool = False) -> int:
        """Free-parameter count used for AIC/BIC."""
        J = self.J
        k = 0 if lock_init else J - 1
        for j in range(J):
            k += J - 2 if self.semi[j] else J - 1
            if self.semi[j]:
                if self.sojourn.type == "nonparametric":
                    k += int(self.M[j]) - 1
                else:
                    k += 2
        return k + self.emission.n_params()

    def to_dict(self) -> dict:
        return {
            "J": self.J,
            "init": self.init.tolist(),
            "transition": self.transition.tolist(),
            "semi": [bool(v) for v in self.semi],
            "M": [int(m) for m in self.M],
            "sojourn": None if self.sojourn is None else self.sojourn.to_dict(),
            "emission": self.emission.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            soj = d.get("sojourn")
            spec = cls(d["init"], d["transition"], d["semi"], d["M"],
                       None if soj is None else SojournSpec.from_dict(soj),
                       emission_from_dict(d["emission"]))
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed model record: {exc}") from None
        if "J" in d and int(d["J"]) != spec.J:
            raise ModelError(f"J={d['J']} disagrees with init length {spec.J}")
        return spec


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        return "ok" if self.ok else "\n".join(self.violations)


def validate_model(spec: ModelSpec) -> ValidationReport:
    """List every violated structural invariant; never raises."""
    v: list[str] = []
    J = spec.init.size
    if spec.transition.shape != (J, J):
        v.append(f"transition has shape {spec.transition.shape}, expected ({J}, {J})")
    if spec.semi.size != J:
        v.append(f"semi has length {spec.semi.size}, expected {J}")
    if np.any(~np.isfinite(spec.init)) or np.any((spec.init < 0) | (spec.init > 1)):
        v.append("init entries must lie in [0, 1]")
    if abs(spec.init.sum() - 1) > PROB_TOL:
        v.append(f"init sums to {spec.init.sum():.12g}")
    if spec.transition.shape == (J, J):
        P = spec.transition
        for i in range(J):
            if np.any(~np.isfinite(P[i])) or np.any((P[i] < 0) | (P[i] > 1)):
                v.append(f"transition row {i + 1} has entries outside [0, 1]")
            if abs(P[i].sum() - 1) > PROB_TOL:
                v.append(f"transition row {i + 1} sums to {P[i].sum():.12g}")
            if spec.semi.size == J and spec.semi[i] and P[i, i] != 0:
                v.append(f"semi-state self-transition nonzero at state {i + 1} ({P[i, i]:.12g})")
    if np.any(spec.M < 1):
        v.append("M entries must be positive")
    if spec.semi.size == J and spec.semi.any():
        if spec.sojourn is None:
            v.append("semi-Markovian states present but no sojourn specification")
        else:
            for j in np.nonzero(spec.semi)[0]:
                try:
                    sojourn_pmf(spec.sojourn, int(j), int(max(spec.M[j], 1)))
                except (SojournError, IndexError, KeyError) as exc:
                    v.append(f"sojourn of state {j + 1}: {exc}")
    try:
        if spec.emission.n_states != J:
            v.append(f"emission has {spec.emission.n_states} states, expected {J}")
    except Exception as exc:  # emission in an unfitted state
        v.append(f"emission: {exc}")
    return ValidationReport(v)


def _json_number(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ModelError("non-finite value cannot be written to JSON")
    if float(x).is_integer() and abs(x) < 1e16:
        return format(x, ".1f")
    return format(x, ".17g")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every real printed to 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(e, (list, tuple, dict)) for e in obj):
            return "[" + ", ".join(dumps(e, indent, _level + 1) for e in obj) + "]"
        items = [pad + dumps(e, indent, _level + 1) for e in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _json_number(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def save_json(obj: dict, path) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: invalid JSON ({exc})") from None


def save_model(spec: ModelSpec, path) -> None:
    save_json(spec.to_dict(), path)


def load_model(path) -> ModelSpec:
    d = load_json(path)
    if "model" in d and "init" not in d:
        d = d["model"]
    return ModelSpec.from_dict(d)
