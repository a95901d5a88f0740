"""Single-trajectory policy-gradient estimation, SGD training, and SPSA.

The estimator multiplies an episode's total discounted cost by the summed
gradients of per-agent transition log-probabilities. Each agent's one-slot
queue-transition probability is the access-probability mixture

    P_k(q' | S) = eta_k * w1 + (1 - eta_k) * w2,

where w1 / w2 condition on the agent transmitting / staying silent, so the
score factor is (w1 - w2) / P_k chained through d(eta)/d(theta) and the
policy's clip subgradient. The estimate is unbiased when per-agent transitions
are independent given the global state, i.e. under the ``"independent"``
access model of :mod:`uplinksim.contention`; under ``"single_winner"``
dynamics the common winner correlates agents and the estimator acquires a
bias (see ``tests/test_acceptance.py`` for both measurements).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contention import (BatchTrajectories, DepartureModel, GlobalState, System,
                         Trajectory, poisson_pmf, run_episodes_batch)
from .policy import PolicyParams, TruncatedLinearPolicy
from .rng import substream


# ──────────────────────────────────────────────────────────────────────
#  Per-agent transition probabilities and eta gradients
# ──────────────────────────────────────────────────────────────────────

def arrival_distribution(mean: float, base: int, q_max: int) -> np.ndarray:
    """Distribution of min(base + A, q_max) for A ~ Poisson(mean), over 0..q_max."""
    row = np.zeros(q_max + 1)
    for q in range(base, q_max):
        row[q] = poisson_pmf(mean, q - base)
    row[q_max] = max(0.0, 1.0 - row[base:q_max].sum())
    return row


def local_transition_prob(q: int, q_next: int, transmitted: bool, pmf,
                          arrival_mean: float, q_max: int) -> float:
    """P[Q' = q_next | Q = q, transmit indicator] for one agent.

    A transmitting agent first drains d ~ pmf packets (clipped at the queue),
    then Poisson arrivals land and the buffer caps at q_max.
    """
    if not (0 <= q <= q_max and 0 <= q_next <= q_max):
        raise ValueError("queue lengths must lie in [0, q_max]")
    pmf = np.asarray(pmf, dtype=float)
    if transmitted:
        total = 0.0
        for d, w in enumerate(pmf):
            if w > 0.0:
                total += w * arrival_distribution(arrival_mean, max(q - d, 0), q_max)[q_next]
        return float(total)
    return float(arrival_distribution(arrival_mean, q, q_max)[q_next])


def transition_tables(departures: DepartureModel, arrival_means,
                      q_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Lookup tables (t1, t0) of per-agent queue-transition probabilities.

    ``t1[k, loc, q, q']`` conditions on agent k transmitting at ``loc``;
    ``t0[k, q, q']`` on staying silent (location-independent).
    """
    arrival_means = np.asarray(arrival_means, dtype=float)
    n_k = len(arrival_means)
    n_l, n_d = departures.pmf.shape
    t0 = np.zeros((n_k, q_max + 1, q_max + 1))
    t1 = np.zeros((n_k, n_l, q_max + 1, q_max + 1))
    base_idx = np.maximum(np.arange(q_max + 1)[:, None] - np.arange(n_d)[None, :], 0)
    for k, mean in enumerate(arrival_means):
        rows = np.stack([arrival_distribution(mean, b, q_max) for b in range(q_max + 1)])
        t0[k] = rows
        t1[k] = np.einsum("ld,qdj->lqj", departures.pmf, rows[base_idx])
    return t1, t0


def eta_theta_jacobian(thetas) -> np.ndarray:
    """d(eta_k)/d(theta_kappa) as a (K, K) matrix for positive thetas."""
    t = np.asarray(thetas, dtype=float)
    if (t <= 0).any():
        raise ValueError("back-off parameters must be positive")
    s = t.sum()
    return (np.eye(len(t)) * s - t[None, :].T @ np.ones((1, len(t)))) / s ** 2


def eta_gradient(thetas, d_theta_db, d_theta_dlam) -> tuple[np.ndarray, np.ndarray]:
    """Chain d(eta)/d(theta) through the policy sensitivities.

    Returns (d_eta_db, d_eta_dlam), each (K, K): entry [k, kappa] is the
    partial of eta_k with respect to agent kappa's parameter at kappa's
    current location.
    """
    jac = eta_theta_jacobian(thetas)
    return jac * np.asarray(d_theta_db)[None, :], jac * np.asarray(d_theta_dlam)[None, :]


# ──────────────────────────────────────────────────────────────────────
#  Gradient estimation from trajectories
# ──────────────────────────────────────────────────────────────────────

@dataclass
class GradientEstimate:
    g_b: np.ndarray           # (K, L)
    g_lam: np.ndarray         # (K, L)
    degenerate_slots: int = 0


def _batch_from_trajectory(traj: Trajectory) -> BatchTrajectories:
    n_t = len(traj.records)
    n_k = traj.initial_state.n_agents
    locs = np.empty((n_t + 1, 1, n_k), dtype=int)
    queues = np.empty((n_t + 1, 1, n_k), dtype=int)
    winners = np.empty((n_t, 1), dtype=int)
    deps = np.empty((n_t, 1, n_k), dtype=int)
    arrs = np.empty((n_t, 1, n_k), dtype=int)
    costs = np.empty((n_t, 1))
    for t, r in enumerate(traj.records):
        locs[t, 0] = r.state.locations
        queues[t, 0] = r.state.queues
        winners[t, 0] = -1 if r.winner is None else r.winner
        deps[t, 0] = r.departures
        arrs[t, 0] = r.arrivals
        costs[t, 0] = r.cost
    locs[n_t, 0] = traj.final_state.locations
    queues[n_t, 0] = traj.final_state.queues
    return BatchTrajectories(locs, queues, winners, deps, arrs, costs, traj.gamma)


def estimate_gradient_batch(batch: BatchTrajectories, params: PolicyParams,
                            tables: tuple[np.ndarray, np.ndarray]):
    """Per-episode gradient estimates from recorded batch trajectories.

    The batch must have been generated under ``params``. Returns
    (g_b, g_lam, degenerate) with shapes (B, K, L); degenerate counts slots
    whose observed transition carried zero model probability (skipped).
    """
    t1, t0 = tables
    policy = TruncatedLinearPolicy(params)
    n_slots, n_b, n_k = batch.costs.shape[0], batch.costs.shape[1], batch.locs.shape[2]
    n_l = params.n_locations
    k_idx = np.arange(n_k)[None, :]
    b_idx = np.arange(n_b)[:, None]

    score_b = np.zeros((n_b, n_k, n_l))
    score_lam = np.zeros((n_b, n_k, n_l))
    degenerate = 0
    for t in range(n_slots):
        locs = batch.locs[t]
        queues = batch.queues[t]
        q_next = batch.queues[t + 1]
        thetas = policy.thetas(locs, queues)
        s = thetas.sum(axis=1)
        eta = thetas / s[:, None]

        w1 = t1[k_idx, locs, queues, q_next]
        w0 = t0[k_idx, queues, q_next]
        num = w1 - w0
        denom = eta * num + w0
        bad = denom <= 0.0
        degenerate += int((bad & (num != 0.0)).sum())
        factor = np.where(bad, 0.0, num / np.where(bad, 1.0, denom))

        inner = (factor * thetas).sum(axis=1)
        score = factor / s[:, None] - inner[:, None] / (s ** 2)[:, None]
        d_b, d_lam = policy.sensitivities(locs, queues)
        np.add.at(score_b, (b_idx, k_idx, locs), score * d_b)
        np.add.at(score_lam, (b_idx, k_idx, locs), score * d_lam)

    returns = batch.discounted_costs()
    return (returns[:, None, None] * score_b,
            returns[:, None, None] * score_lam, degenerate)


def estimate_gradient(traj: Trajectory, params: PolicyParams,
                      departures: DepartureModel, arrival_means,
                      q_max: int) -> GradientEstimate:
    """Single-trajectory estimate of the objective's (b, lambda) gradients."""
    tables = transition_tables(departures, arrival_means, q_max)
    g_b, g_lam, degenerate = estimate_gradient_batch(
        _batch_from_trajectory(traj), params, tables)
    return GradientEstimate(g_b[0], g_lam[0], degenerate)


# ──────────────────────────────────────────────────────────────────────
#  SGD training loop
# ──────────────────────────────────────────────────────────────────────

@dataclass
class SgdConfig:
    eta0: float               # initial step size, decays as eta0 / (m + 1)
    t_ep: int
    n_iterations: int
    seed: int
    batch_size: int = 1
    b_max: float | None = None    # parameter cap, default 10 * theta_max

    def __post_init__(self):
        if self.eta0 < 0:
            raise ValueError("eta0 must be >= 0")
        if self.t_ep < 1 or self.n_iterations < 0 or self.batch_size < 1:
            raise ValueError("invalid SGD configuration")


def sgd_train(system: System, params0: PolicyParams, cfg: SgdConfig,
              initial: GlobalState | None = None):
    """Run the policy-gradient SGD loop and return (params, history).

    Each iteration simulates ``batch_size`` episodes under the current
    parameters, averages their gradient estimates, steps with
    eta0 / (m + 1), and projects b and lambda onto [0, b_max]. History rows
    are (m, mean discounted cost, gradient 2-norm, step size, degenerate-slot
    count).
    """
    params = params0.copy()
    b_max = cfg.b_max if cfg.b_max is not None else 10.0 * params.theta_max
    tables = transition_tables(system.departures, system.arrival_means,
                               system.cost.q_max)
    history = []
    for m in range(cfg.n_iterations):
        rng = substream(cfg.seed, "train", m)
        batch = run_episodes_batch(system.with_policy(TruncatedLinearPolicy(params)),
                                   cfg.t_ep, cfg.batch_size, rng, initial=initial)
        g_b, g_lam, degenerate = estimate_gradient_batch(batch, params, tables)
        g_b = g_b.mean(axis=0)
        g_lam = g_lam.mean(axis=0)
        step = cfg.eta0 / (m + 1)
        new_b = np.clip(params.b - step * g_b, 0.0, b_max)
        new_lam = np.clip(params.lam - step * g_lam, 0.0, b_max)
        if not (np.isfinite(new_b).all() and np.isfinite(new_lam).all()):
            raise RuntimeError(f"divergent parameters at iteration {m}")
        params = PolicyParams(new_b, new_lam, params.theta_min, params.theta_max)
        cost = float(batch.discounted_costs().mean())
        grad_norm = float(np.sqrt((g_b ** 2).sum() + (g_lam ** 2).sum()))
        history.append((m, cost, grad_norm, step, degenerate))
    return params, history


# ──────────────────────────────────────────────────────────────────────
#  SPSA baseline optimizer
# ──────────────────────────────────────────────────────────────────────

@dataclass
class SpsaConfig:
    a: float                  # gain numerator, a_m = a / (m + 1 + A)^alpha
    c: float                  # perturbation size, c_m = c / (m + 1)^gamma_pow
    t_ep: int
    n_iterations: int
    seed: int
    big_a: float | None = None    # stability offset A, default 0.1 * n_iterations
    alpha: float = 0.602
    gamma_pow: float = 0.101
    b_max: float | None = None
    batch_size: int = 1       # episodes averaged per objective evaluation

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("perturbation magnitude c must be positive")
        if self.a < 0 or self.t_ep < 1 or self.n_iterations < 0 or self.batch_size < 1:
            raise ValueError("invalid SPSA configuration")
        if self.big_a is None:
            self.big_a = 0.1 * self.n_iterations


def _mean_cost(system: System, params: PolicyParams, t_ep: int, n_episodes: int,
               rng: np.random.Generator, initial) -> float:
    stats = run_episodes_batch(system.with_policy(TruncatedLinearPolicy(params)),
                               t_ep, n_episodes, rng, initial=initial, record=False)
    return float(stats.discounted_costs.mean())


def spsa_train(system: System, params0: PolicyParams, cfg: SpsaConfig,
               initial: GlobalState | None = None):
    """Simultaneous-perturbation training over the same feasible set as SGD.

    Each iteration evaluates ``batch_size`` episodes at params +/- c_m * Delta
    with a shared Rademacher Delta and common random numbers for the pair,
    forms the two-sided gradient approximation, and projects the update onto
    [0, b_max]. History rows are (m, cost_plus, cost_minus, a_m, c_m).
    """
    params = params0.copy()
    b_max = cfg.b_max if cfg.b_max is not None else 10.0 * params.theta_max
    shape = params.b.shape
    history = []
    for m in range(cfg.n_iterations):
        pert_rng = substream(cfg.seed, "spsa-perturb", m)
        delta_b = pert_rng.integers(0, 2, size=shape) * 2.0 - 1.0
        delta_l = pert_rng.integers(0, 2, size=shape) * 2.0 - 1.0
        a_m = cfg.a / (m + 1 + cfg.big_a) ** cfg.alpha
        c_m = cfg.c / (m + 1) ** cfg.gamma_pow

        plus = PolicyParams(np.clip(params.b + c_m * delta_b, 0.0, b_max),
                            np.clip(params.lam + c_m * delta_l, 0.0, b_max),
                            params.theta_min, params.theta_max)
        minus = PolicyParams(np.clip(params.b - c_m * delta_b, 0.0, b_max),
                             np.clip(params.lam - c_m * delta_l, 0.0, b_max),
                             params.theta_min, params.theta_max)
        cost_plus = _mean_cost(system, plus, cfg.t_ep, cfg.batch_size,
                               substream(cfg.seed, "spsa-episode", m), initial)
        cost_minus = _mean_cost(system, minus, cfg.t_ep, cfg.batch_size,
                                substream(cfg.seed, "spsa-episode", m), initial)

        diff = (cost_plus - cost_minus) / (2.0 * c_m)
        new_b = np.clip(params.b - a_m * diff * delta_b, 0.0, b_max)
        new_lam = np.clip(params.lam - a_m * diff * delta_l, 0.0, b_max)
        if not (np.isfinite(new_b).all() and np.isfinite(new_lam).all()):
            raise RuntimeError(f"divergent parameters at iteration {m}")
        params = PolicyParams(new_b, new_lam, params.theta_min, params.theta_max)
        history.append((m, cost_plus, cost_minus, a_m, c_m))
    return params, history
