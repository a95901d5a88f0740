"""Local back-off policies: truncated-linear (trainable) and the fixed baselines.

Every policy maps an agent's local state (location index, queue length) to a
back-off timer parameter theta in [theta_min, theta_max]; larger theta means a
higher chance of winning the slot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

THETA_MIN_DEFAULT = 1.0 / 63.0
THETA_MAX_DEFAULT = 1.0


@dataclass(frozen=True)
class LocalState:
    location: int
    queue: int


@dataclass
class PolicyParams:
    """Trainable (b, lambda) pairs, one per agent per location."""

    b: np.ndarray             # (K, L), >= 0
    lam: np.ndarray           # (K, L), >= 0
    theta_min: float = THETA_MIN_DEFAULT
    theta_max: float = THETA_MAX_DEFAULT

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        if self.b.shape != self.lam.shape or self.b.ndim != 2:
            raise ValueError("b and lambda must share a (n_agents, n_locations) shape")
        if not (np.isfinite(self.b).all() and np.isfinite(self.lam).all()):
            raise ValueError("policy parameters must be finite")
        if (self.b < 0).any() or (self.lam < 0).any():
            raise ValueError("policy parameters must be non-negative")
        if not (0.0 < self.theta_min < self.theta_max):
            raise ValueError("need 0 < theta_min < theta_max")

    @property
    def n_agents(self) -> int:
        return self.b.shape[0]

    @property
    def n_locations(self) -> int:
        return self.b.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.b.copy(), self.lam.copy(), self.theta_min, self.theta_max)

    @classmethod
    def baseline3_init(cls, n_agents: int, n_locations: int, q_max: int,
                       theta_min: float = THETA_MIN_DEFAULT,
                       theta_max: float = THETA_MAX_DEFAULT) -> "PolicyParams":
        """b = theta_min, lambda = (theta_max - theta_min) / Q_max everywhere."""
        b = np.full((n_agents, n_locations), theta_min)
        lam = np.full((n_agents, n_locations), (theta_max - theta_min) / q_max)
        return cls(b, lam, theta_min, theta_max)

    def to_json(self, path: str):
        doc = {
            "theta_min": self.theta_min,
            "theta_max": self.theta_max,
            "agents": [{"b": bk.tolist(), "lambda": lk.tolist()}
                       for bk, lk in zip(self.b, self.lam)],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str) -> "PolicyParams":
        with open(path) as fh:
            doc = json.load(fh)
        b = np.array([a["b"] for a in doc["agents"]], dtype=float)
        lam = np.array([a["lambda"] for a in doc["agents"]], dtype=float)
        return cls(b, lam, doc["theta_min"], doc["theta_max"])


class TruncatedLinearPolicy:
    """theta = clip(b[k, loc] + lambda[k, loc] * Q, theta_min, theta_max)."""

    def __init__(self, params: PolicyParams):
        self.params = params

    @property
    def theta_min(self):
        return self.params.theta_min

    @property
    def theta_max(self):
        return self.params.theta_max

    def theta(self, agent: int, location: int, queue: int) -> float:
        raw = self.params.b[agent, location] + self.params.lam[agent, location] * queue
        return float(np.clip(raw, self.params.theta_min, self.params.theta_max))

    def thetas(self, locations: np.ndarray, queues: np.ndarray) -> np.ndarray:
        k_idx = np.arange(self.params.n_agents)
        raw = self.params.b[k_idx, locations] + self.params.lam[k_idx, locations] * queues
        return np.clip(raw, self.params.theta_min, self.params.theta_max)

    def sensitivities(self, locations: np.ndarray, queues: np.ndarray):
        """(dtheta/db, dtheta/dlambda) with the one-sided clip subgradient.

        Strictly interior points give (1, Q); at or beyond either clip
        boundary both are zero.
        """
        k_idx = np.arange(self.params.n_agents)
        raw = self.params.b[k_idx, locations] + self.params.lam[k_idx, locations] * queues
        interior = (raw > self.params.theta_min) & (raw < self.params.theta_max)
        d_b = interior.astype(float)
        d_lam = d_b * queues
        return d_b, d_lam


class ConstantPolicy:
    """Baseline 1: the midpoint back-off parameter in every state."""

    def __init__(self, theta_min: float = THETA_MIN_DEFAULT,
                 theta_max: float = THETA_MAX_DEFAULT):
        self.theta_min = theta_min
        self.theta_max = theta_max
        self._value = 0.5 * (theta_min + theta_max)

    def theta(self, agent: int, location: int, queue: int) -> float:
        return self._value

    def thetas(self, locations, queues):
        return np.full(np.shape(locations), self._value)


class FullBufferPolicy:
    """Baseline 2: theta_max when the buffer is full, theta_min otherwise."""

    def __init__(self, q_max: int, theta_min: float = THETA_MIN_DEFAULT,
                 theta_max: float = THETA_MAX_DEFAULT):
        self.q_max = q_max
        self.theta_min = theta_min
        self.theta_max = theta_max

    def theta(self, agent: int, location: int, queue: int) -> float:
        return self.theta_max if queue == self.q_max else self.theta_min

    def thetas(self, locations, queues):
        return np.where(np.asarray(queues) == self.q_max, self.theta_max, self.theta_min)


class QCsmaLikePolicy:
    """Queue-only rule clip(log(Q) / (1 + log(Q))); empty queues use theta_min."""

    def __init__(self, theta_min: float = THETA_MIN_DEFAULT,
                 theta_max: float = THETA_MAX_DEFAULT):
        self.theta_min = theta_min
        self.theta_max = theta_max

    def theta(self, agent: int, location: int, queue: int) -> float:
        if queue <= 0:
            return self.theta_min
        lq = math.log(queue)
        return float(np.clip(lq / (1.0 + lq), self.theta_min, self.theta_max))

    def thetas(self, locations, queues):
        q = np.asarray(queues, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lq = np.log(np.maximum(q, 1.0))
        vals = np.clip(lq / (1.0 + lq), self.theta_min, self.theta_max)
        return np.where(q > 0, vals, self.theta_min)


def evaluate(policy, agent: int, state: LocalState) -> float:
    """Back-off parameter of `agent` in local state (location, queue)."""
    return policy.theta(agent, state.location, state.queue)


def theta_sensitivity(params: PolicyParams, agent: int, state: LocalState):
    """(dtheta/db, dtheta/dlambda) of the truncated-linear policy at one state."""
    raw = params.b[agent, state.location] + params.lam[agent, state.location] * state.queue
    if params.theta_min < raw < params.theta_max:
        return 1.0, float(state.queue)
    return 0.0, 0.0
