"""Distribution specifications for arrivals, TTLs and fetch delays.

Every kind except :class:`Deterministic` has a phase-type representation
``(alpha, S)``: ``alpha`` is the initial probability row vector and ``S`` the
subgenerator, so the exit-rate column is ``-S @ 1``.  Deterministic values are
accepted by the simulator only.
"""

import math
from dataclasses import dataclass

import numpy as np

from ttldelay.errors import UnsupportedDistributionError


@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")

    def mean(self):
        return 1.0 / self.rate

    def ph(self):
        return np.array([1.0]), np.array([[-self.rate]])

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size=size)

    def scaled_to_mean(self, mean):
        return Exponential(1.0 / mean)


@dataclass(frozen=True)
class Erlang:
    phases: int
    rate: float  # per-phase rate

    def __post_init__(self):
        if self.phases < 1:
            raise ValueError(f"phase count must be >= 1, got {self.phases}")
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")

    def mean(self):
        return self.phases / self.rate

    def ph(self):
        k, lam = self.phases, self.rate
        s = np.diag(np.full(k, -lam)) + np.diag(np.full(k - 1, lam), k=1)
        alpha = np.zeros(k)
        alpha[0] = 1.0
        return alpha, s

    def sample(self, rng, size=None):
        return rng.gamma(self.phases, 1.0 / self.rate, size=size)

    def scaled_to_mean(self, mean):
        return Erlang(self.phases, self.phases / mean)


@dataclass(frozen=True)
class Coxian:
    """Sequential phases; after phase i the process continues with the given
    probability or exits to absorption."""

    rates: tuple
    continue_probs: tuple

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        object.__setattr__(
            self, "continue_probs", tuple(float(p) for p in self.continue_probs)
        )
        if len(self.continue_probs) != len(self.rates) - 1:
            raise ValueError("need one continue probability per non-final phase")
        if any(r <= 0 for r in self.rates):
            raise ValueError("phase rates must be positive")
        if any(not 0.0 <= p <= 1.0 for p in self.continue_probs):
            raise ValueError("continue probabilities must lie in [0, 1]")

    def mean(self):
        return ph_mean(*self.ph())

    def ph(self):
        k = len(self.rates)
        s = np.diag([-r for r in self.rates])
        for i, p in enumerate(self.continue_probs):
            s[i, i + 1] = self.rates[i] * p
        alpha = np.zeros(k)
        alpha[0] = 1.0
        return alpha, s

    def sample(self, rng, size=None):
        return sample_ph(rng, *self.ph(), size=size)

    def scaled_to_mean(self, mean):
        factor = self.mean() / mean
        return Coxian(tuple(r * factor for r in self.rates), self.continue_probs)


@dataclass(frozen=True)
class GeneralPH:
    initial: tuple
    subgenerator: tuple  # rows as tuples

    def __post_init__(self):
        alpha = np.asarray(self.initial, dtype=float)
        s = np.asarray(self.subgenerator, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] != alpha.size:
            raise ValueError("subgenerator must be square and match the initial vector")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-12:
            raise ValueError("initial vector must be a probability distribution")
        off = s - np.diag(np.diag(s))
        if np.any(off < 0) or np.any(np.diag(s) > 0):
            raise ValueError("subgenerator has invalid signs")
        rows = s.sum(axis=1)
        if np.any(rows > 1e-12) or not np.any(rows < -1e-12):
            raise ValueError("subgenerator rows must sum <= 0 with an absorbing exit")
        object.__setattr__(self, "initial", tuple(alpha))
        object.__setattr__(self, "subgenerator", tuple(map(tuple, s)))

    def mean(self):
        return ph_mean(*self.ph())

    def ph(self):
        return np.asarray(self.initial), np.asarray(self.subgenerator, dtype=float)

    def sample(self, rng, size=None):
        return sample_ph(rng, *self.ph(), size=size)

    def scaled_to_mean(self, mean):
        factor = self.mean() / mean
        s = np.asarray(self.subgenerator, dtype=float) * factor
        return GeneralPH(self.initial, tuple(map(tuple, s)))


@dataclass(frozen=True)
class Deterministic:
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"value must be nonnegative, got {self.value}")

    def mean(self):
        return self.value

    def ph(self):
        raise UnsupportedDistributionError(
            "deterministic distributions have no phase-type representation; "
            "they are accepted by the simulator only"
        )

    def sample(self, rng, size=None):
        if size is None:
            return self.value
        return np.full(size, self.value)

    def scaled_to_mean(self, mean):
        return Deterministic(mean)


PH_KINDS = (Exponential, Erlang, Coxian, GeneralPH)


def is_ph(dist):
    return isinstance(dist, PH_KINDS)


def require_ph(dist, what):
    if not is_ph(dist):
        raise UnsupportedDistributionError(
            f"{what} must be phase-type representable, got {type(dist).__name__}"
        )
    return dist


def ph_mean(alpha, s):
    """Mean of a PH distribution, -alpha S^-1 1."""
    return float(-alpha @ np.linalg.solve(s, np.ones(len(alpha))))


def ph_moment(alpha, s, k):
    """k-th raw moment, k! alpha (-S)^-k 1."""
    v = np.ones(len(alpha))
    for _ in range(k):
        v = np.linalg.solve(-s, v)
    return math.factorial(k) * float(alpha @ v)


def sample_ph(rng, alpha, s, size=None):
    """Draw absorption times of the PH Markov chain."""
    scalar = size is None
    n = 1 if scalar else int(np.prod(size))
    k = len(alpha)
    exit_rates = -s.sum(axis=1)
    totals = -np.diag(s)
    # Jump chain probabilities: row i lists phases 0..k-1 then absorption.
    jump = np.zeros((k, k + 1))
    for i in range(k):
        jump[i, :k] = np.where(np.arange(k) == i, 0.0, s[i] / totals[i])
        jump[i, k] = exit_rates[i] / totals[i]
    out = np.empty(n)
    for idx in range(n):
        t = 0.0
        phase = rng.choice(k, p=alpha)
        while True:
            t += rng.exponential(1.0 / totals[phase])
            nxt = rng.choice(k + 1, p=jump[phase])
            if nxt == k:
                break
            phase = nxt
        out[idx] = t
    if scalar:
        return float(out[0])
    return out.reshape(size)
