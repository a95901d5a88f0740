"""Ready-made systems: the oracle-scale tiny instance and the indoor demo scene."""

from __future__ import annotations

import numpy as np

from .contention import CostConfig, DepartureModel, GlobalState, System
from .environment import LinkStatsTable, SceneConfig
from .mobility import MobilityModel
from .policy import PolicyParams, TruncatedLinearPolicy


def tiny_instance(access_model: str = "single_winner"):
    """Two agents, two locations, Q_max = 2, deterministic rates.

    Small enough for exact chain enumeration (36 states) yet rich enough that
    every (b, lambda) coordinate has a distinct nonzero gradient: the two
    locations serve 1 and 2 packets per win, arrivals and parameters are
    asymmetric across agents, and the initial policy is strictly interior to
    the clip region everywhere.

    Returns (system, params, initial_state).
    """
    params = PolicyParams(
        b=np.array([[0.30, 0.40], [0.35, 0.25]]),
        lam=np.array([[0.10, 0.05], [0.08, 0.12]]),
    )
    table = LinkStatsTable.from_fixed_departures([1, 2])
    mobility = MobilityModel(np.array([[[0.8, 0.2], [0.3, 0.7]]]), shared=True)
    system = System(
        policy=TruncatedLinearPolicy(params),
        departures=DepartureModel.from_link_stats(table),
        mobility=mobility,
        arrival_means=np.array([0.6, 0.5]),
        cost=CostConfig(gamma=0.9, w_b=5.0, q_max=2),
        access_model=access_model,
    )
    initial = GlobalState(locations=np.array([0, 1]), queues=np.array([1, 1]))
    return system, params, initial


def indoor_demo_scene() -> SceneConfig:
    """Indoor room tuned so per-slot rates land in the few-packet regime.

    The 8x8 arrays and the raised noise floor put line-of-sight locations at
    roughly 2-10 packets per slot and reflection-only locations near zero,
    which is the regime where contention and blockage actually shape the
    queues (free-space + thermal-noise defaults would give every location
    tens of packets per slot and wash the location dependence out).
    """
    return SceneConfig(n_tx_antennas=8, n_rx_antennas=8, noise_power_w=1e-7)
