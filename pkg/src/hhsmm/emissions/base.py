from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np


class EmissionError(ValueError):
    pass


class Emission(ABC):
    """State-conditional observation model.

    Subclasses hold their parameters for every state and implement a
    vectorized log density, a weighted M-step and (optionally) a sampler.
    """

    family: str = ""

    @property
    @abstractmethod
    def n_states(self) -> int: ...

    @abstractmethod
    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log densities, shape ``(T, J)``."""

    def density(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(x))

    @abstractmethod
    def mstep(self, x: np.ndarray, weights: np.ndarray) -> "Emission":
        """New emission fitted to ``x`` with state weights ``(T, J)``."""

    def sample(self, j: int, rng: np.random.Generator, context: dict | None = None) -> np.ndarray:
        raise EmissionError(f"emission family {self.family!r} has no sampler")

    @property
    def can_sample(self) -> bool:
        return type(self).sample is not Emission.sample

    @abstractmethod
    def n_params(self) -> int: ...

    @abstractmethod
    def to_dict(self) -> dict: ...

    @classmethod
    @abstractmethod
    def from_dict(cls, d: dict) -> "Emission": ...


def check_weights(weights: np.ndarray, n_states: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2 or w.shape[1] != n_states:
        raise EmissionError(f"weights must have shape (T, {n_states})")
    if np.any(w < 0):
        raise EmissionError("weights must be nonnegative")
    empty = np.nonzero(w.sum(axis=0) <= 0)[0]
    if empty.size:
        raise EmissionError(f"state {int(empty[0])} has zero total weight")
    return w
