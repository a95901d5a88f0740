"""Slotted contention episodes: back-off draws, departures, arrivals, queues, cost.

Each slot: agents evaluate their policies, channel access is resolved from the
access probabilities theta_k / sum(theta), the transmitting agent drains
packets according to its location's departure distribution, Poisson arrivals
land at the end of the slot (clipped by the buffer), and agents move on the
location grid. The cost of a slot is charged at its starting state.

Two access models are supported:

* ``"single_winner"``: exactly one agent wins each slot, sampled from the
  access probabilities (the physical contention mechanism).
* ``"independent"``: each agent independently transmits with its access
  probability. Per-agent queue transitions then factor exactly, which is the
  transition model the single-trajectory gradient estimator assumes; see
  ``optim.estimate_gradient``.

Per-agent queue-transition marginals coincide under both models.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .environment import LinkStatsTable
from .mobility import MobilityModel

ACCESS_MODELS = ("single_winner", "independent")


@dataclass
class CostConfig:
    gamma: float
    w_b: float = 20.0
    q_max: int = 10

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.w_b < 0 or self.q_max < 1:
            raise ValueError("need w_b >= 0 and q_max >= 1")


@dataclass
class GlobalState:
    locations: np.ndarray     # (K,) location indices
    queues: np.ndarray        # (K,) queue lengths

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=int)
        self.queues = np.asarray(self.queues, dtype=int)

    @property
    def n_agents(self) -> int:
        return len(self.locations)

    def copy(self) -> "GlobalState":
        return GlobalState(self.locations.copy(), self.queues.copy())


@dataclass
class SlotRecord:
    state: GlobalState
    thetas: np.ndarray
    winner: int | None        # None in the independent access model
    departures: np.ndarray    # effective departures, never above the starting queue
    arrivals: np.ndarray
    cost: float


@dataclass
class Trajectory:
    initial_state: GlobalState
    records: list[SlotRecord]
    final_state: GlobalState
    gamma: float


@dataclass
class DepartureModel:
    """Per-location packet-departure distributions the simulator draws from."""

    pmf: np.ndarray           # (n_locations, d_max+1)

    def __post_init__(self):
        self.pmf = np.asarray(self.pmf, dtype=float)
        self.cdf = np.cumsum(self.pmf, axis=1)

    @property
    def d_max(self) -> int:
        return self.pmf.shape[1] - 1

    @classmethod
    def from_link_stats(cls, table: LinkStatsTable) -> "DepartureModel":
        return cls(table.pmf_matrix())


@dataclass
class System:
    """Everything a slot step needs besides randomness."""

    policy: object
    departures: DepartureModel
    mobility: MobilityModel
    arrival_means: np.ndarray
    cost: CostConfig
    access_model: str = "single_winner"

    def __post_init__(self):
        self.arrival_means = np.asarray(self.arrival_means, dtype=float)
        if (self.arrival_means < 0).any():
            raise ValueError("arrival means must be >= 0")
        if self.access_model not in ACCESS_MODELS:
            raise ValueError(f"access_model must be one of {ACCESS_MODELS}")

    @property
    def n_agents(self) -> int:
        return len(self.arrival_means)

    def with_policy(self, policy) -> "System":
        return System(policy, self.departures, self.mobility, self.arrival_means,
                      self.cost, self.access_model)


def access_probabilities(thetas) -> np.ndarray:
    """Slot access probabilities theta_k / sum(theta)."""
    t = np.asarray(thetas, dtype=float)
    if (t <= 0).any():
        raise ValueError("back-off parameters must be positive")
    return t / t.sum()


def poisson_pmf(mean: float, n: int) -> float:
    """P[N = n] for N ~ Poisson(mean)."""
    if mean < 0 or n < 0:
        raise ValueError("need mean >= 0 and n >= 0")
    if mean == 0.0:
        return 1.0 if n == 0 else 0.0
    return math.exp(n * math.log(mean) - mean - math.lgamma(n + 1))


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Smallest index whose cdf exceeds u, batched over leading axes."""
    return np.minimum((cdf_rows <= u[..., None]).sum(axis=-1), cdf_rows.shape[-1] - 1)


def _step_batch(locs: np.ndarray, queues: np.ndarray, system: System,
                rng: np.random.Generator):
    """Advance a (B, K) batch of states by one slot.

    Returns (thetas, winners, transmits, departures, arrivals, costs,
    next_locs, next_queues); winners is -1 per episode in the independent
    model. The per-slot draw order is fixed: access, departures, mobility,
    arrivals.
    """
    n_b, n_k = locs.shape
    cfg = system.cost

    thetas = system.policy.thetas(locs, queues)
    eta = thetas / thetas.sum(axis=1, keepdims=True)

    if system.access_model == "single_winner":
        u = rng.random(n_b)
        winners = _inverse_cdf(np.cumsum(eta, axis=1), u)
        transmits = np.zeros((n_b, n_k), dtype=bool)
        transmits[np.arange(n_b), winners] = True
    else:
        transmits = rng.random((n_b, n_k)) < eta
        winners = np.full(n_b, -1, dtype=int)

    u_dep = rng.random((n_b, n_k))
    drawn = _inverse_cdf(system.departures.cdf[locs], u_dep)
    departures = np.minimum(drawn, queues) * transmits

    u_mob = rng.random((n_b, n_k))
    mob_cdf = system.mobility.cdf_for_agents(n_k)        # (K, L, L)
    next_locs = _inverse_cdf(mob_cdf[np.arange(n_k)[None, :], locs], u_mob)

    arrivals = rng.poisson(lam=system.arrival_means, size=(n_b, n_k))

    costs = queues.sum(axis=1) + cfg.w_b * (queues == cfg.q_max).sum(axis=1)
    next_queues = np.minimum(queues - departures + arrivals, cfg.q_max)
    return thetas, winners, transmits, departures, arrivals, costs, next_locs, next_queues


def step_slot(state: GlobalState, system: System,
              rng: np.random.Generator) -> tuple[SlotRecord, GlobalState]:
    """One slot from `state`; returns the slot record and the successor state."""
    locs = state.locations[None, :]
    queues = state.queues[None, :]
    thetas, winners, _, deps, arrs, costs, nl, nq = _step_batch(locs, queues, system, rng)
    winner = int(winners[0]) if winners[0] >= 0 else None
    record = SlotRecord(state.copy(), thetas[0], winner, deps[0], arrs[0], float(costs[0]))
    return record, GlobalState(nl[0], nq[0])


def run_episode(initial: GlobalState, system: System, t_ep: int,
                rng: np.random.Generator) -> Trajectory:
    """Apply ``step_slot`` t_ep + 1 times from the initial state."""
    if t_ep < 1:
        raise ValueError("t_ep must be >= 1")
    state = initial.copy()
    records = []
    for _ in range(t_ep + 1):
        record, state = step_slot(state, system, rng)
        records.append(record)
    return Trajectory(initial.copy(), records, state, system.cost.gamma)


def discounted_cost(traj: Trajectory) -> float:
    """Sum of gamma^t * cost_t over the recorded horizon."""
    return float(sum(r.cost * traj.gamma ** t for t, r in enumerate(traj.records)))


@dataclass
class BatchTrajectories:
    """Column-oriented record of a batch of episodes (slot-major arrays)."""

    locs: np.ndarray          # (T+2, B, K) states 0..T+1
    queues: np.ndarray        # (T+2, B, K)
    winners: np.ndarray       # (T+1, B), -1 for none
    departures: np.ndarray    # (T+1, B, K)
    arrivals: np.ndarray      # (T+1, B, K)
    costs: np.ndarray         # (T+1, B)
    gamma: float

    @property
    def n_slots(self) -> int:
        return self.costs.shape[0]

    @property
    def n_episodes(self) -> int:
        return self.costs.shape[1]

    def discounted_costs(self) -> np.ndarray:
        """(B,) total discounted cost per episode."""
        weights = self.gamma ** np.arange(self.n_slots)
        return weights @ self.costs

    def trajectory(self, episode: int, policy=None) -> Trajectory:
        """Materialize one episode as a scalar Trajectory."""
        records = []
        for t in range(self.n_slots):
            state = GlobalState(self.locs[t, episode], self.queues[t, episode])
            w = int(self.winners[t, episode])
            thetas = (policy.thetas(state.locations[None, :], state.queues[None, :])[0]
                      if policy is not None else np.full(state.n_agents, np.nan))
            records.append(SlotRecord(state, thetas, w if w >= 0 else None,
                                      self.departures[t, episode],
                                      self.arrivals[t, episode],
                                      float(self.costs[t, episode])))
        initial = GlobalState(self.locs[0, episode], self.queues[0, episode])
        final = GlobalState(self.locs[-1, episode], self.queues[-1, episode])
        return Trajectory(initial, records, final, self.gamma)


@dataclass
class EpisodeStats:
    """Aggregates when full per-slot records are not needed."""

    discounted_costs: np.ndarray      # (B,)
    full_buffer_fraction: float       # fraction of (slot, agent) pairs at Q_max
    mean_queue: float


def sample_initial_states(n_episodes: int, n_agents: int, n_locations: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Empty queues, locations uniform over the grid."""
    locs = rng.integers(0, n_locations, size=(n_episodes, n_agents))
    queues = np.zeros((n_episodes, n_agents), dtype=int)
    return locs, queues


def run_episodes_batch(system: System, t_ep: int, n_episodes: int,
                       rng: np.random.Generator, initial: GlobalState | None = None,
                       record: bool = True) -> BatchTrajectories | EpisodeStats:
    """Simulate many episodes at once with vectorized slot updates.

    ``initial=None`` draws fresh uniform-location, empty-queue starting states
    from ``rng``; passing a GlobalState replicates it across the batch. With
    ``record=False`` only aggregate statistics are returned.
    """
    if t_ep < 1:
        raise ValueError("t_ep must be >= 1")
    n_k = system.n_agents
    n_l = system.mobility.n_locations
    if initial is None:
        locs, queues = sample_initial_states(n_episodes, n_k, n_l, rng)
    else:
        locs = np.broadcast_to(initial.locations, (n_episodes, n_k)).copy()
        queues = np.broadcast_to(initial.queues, (n_episodes, n_k)).copy()

    n_slots = t_ep + 1
    if record:
        locs_rec = np.empty((n_slots + 1, n_episodes, n_k), dtype=np.int32)
        queues_rec = np.empty((n_slots + 1, n_episodes, n_k), dtype=np.int32)
        winners_rec = np.empty((n_slots, n_episodes), dtype=np.int32)
        deps_rec = np.empty((n_slots, n_episodes, n_k), dtype=np.int32)
        arrs_rec = np.empty((n_slots, n_episodes, n_k), dtype=np.int32)
        costs_rec = np.empty((n_slots, n_episodes))
    else:
        disc = np.zeros(n_episodes)
        full_buffer = 0
        queue_total = 0.0

    for t in range(n_slots):
        if record:
            locs_rec[t] = locs
            queues_rec[t] = queues
        else:
            full_buffer += int((queues == system.cost.q_max).sum())
            queue_total += float(queues.sum())
        _, winners, _, deps, arrs, costs, locs_next, queues_next = _step_batch(
            locs, queues, system, rng)
        if record:
            winners_rec[t] = winners
            deps_rec[t] = deps
            arrs_rec[t] = arrs
            costs_rec[t] = costs
        else:
            disc += system.cost.gamma ** t * costs
        locs, queues = locs_next, queues_next

    if record:
        locs_rec[n_slots] = locs
        queues_rec[n_slots] = queues
        return BatchTrajectories(locs_rec, queues_rec, winners_rec, deps_rec,
                                 arrs_rec, costs_rec, system.cost.gamma)
    denom = n_slots * n_episodes * n_k
    return EpisodeStats(disc, full_buffer / denom, queue_total / denom)


def export_trajectory_csv(traj: Trajectory, path: str):
    """One row per slot: t, per-agent location/queue/theta, winner, D, A, cost."""
    n_k = traj.initial_state.n_agents
    header = ["t"]
    for k in range(n_k):
        header += [f"loc_{k}", f"queue_{k}", f"theta_{k}", f"departures_{k}", f"arrivals_{k}"]
    header += ["winner", "cost"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, r in enumerate(traj.records):
            row = [t]
            for k in range(n_k):
                row += [int(r.state.locations[k]), int(r.state.queues[k]),
                        f"{r.thetas[k]:.10g}", int(r.departures[k]), int(r.arrivals[k])]
            row += ["" if r.winner is None else int(r.winner), f"{r.cost:.10g}"]
            writer.writerow(row)
