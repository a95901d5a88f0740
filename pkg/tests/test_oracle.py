"""Exact chain enumeration, discounted values, and finite-difference gradients."""

import numpy as np
import pytest

from uplinksim import (CostConfig, DepartureModel, GlobalState, LinkStatsTable,
                       PolicyParams, System, TruncatedLinearPolicy, build_chain,
                       exact_discounted_cost, exact_gradient_fd, exact_gradient_chain,
                       run_episodes_batch, substream, local_transition_prob)
from uplinksim.oracle import EnumeratedChain, default_horizon, reachable_states
from uplinksim.mobility import static_model
from uplinksim.instances import tiny_instance


def single_agent_countdown():
    params = PolicyParams(np.array([[0.5]]), np.array([[0.0]]))
    table = LinkStatsTable.from_fixed_departures([1])
    return System(TruncatedLinearPolicy(params),
                  DepartureModel.from_link_stats(table), static_model(1),
                  np.array([0.0]), CostConfig(gamma=0.9, w_b=0.0, q_max=2))


class TestBuildChain:
    def test_single_agent_countdown_matrix(self):
        chain = build_chain(single_agent_countdown())
        expected = np.array([[1.0, 0.0, 0.0],
                             [1.0, 0.0, 0.0],
                             [0.0, 1.0, 0.0]])
        assert chain.n_states == 3
        assert np.allclose(chain.transition, expected, atol=1e-14)
        assert np.allclose(chain.costs, [0.0, 1.0, 2.0])

    def test_rows_stochastic_both_modes(self):
        for mode in ("single_winner", "independent"):
            system, _, _ = tiny_instance(mode)
            chain = build_chain(system)
            assert np.abs(chain.transition.sum(axis=1) - 1.0).max() <= 1e-10
            assert chain.transition.min() >= 0.0

    def test_state_count_guard(self):
        params = PolicyParams(np.full((3, 10), 0.5), np.zeros((3, 10)))
        table = LinkStatsTable.from_fixed_departures([1] * 10)
        system = System(TruncatedLinearPolicy(params),
                        DepartureModel.from_link_stats(table), static_model(10),
                        np.full(3, 0.5), CostConfig(gamma=0.9, q_max=10))
        with pytest.raises(ValueError, match="guard"):
            build_chain(system)

    def test_marginals_reproduce_local_mixtures(self):
        for mode in ("single_winner", "independent"):
            system, params, _ = tiny_instance(mode)
            chain = build_chain(system)
            policy = system.policy
            rng = np.random.default_rng(12)
            for _ in range(20):
                s = int(rng.integers(0, chain.n_states))
                locs, queues = chain.locs[s], chain.queues[s]
                thetas = policy.thetas(locs[None, :], queues[None, :])[0]
                eta = thetas / thetas.sum()
                for k in range(chain.n_agents):
                    for qn in range(chain.q_max + 1):
                        mask = chain.queues[:, k] == qn
                        marginal = chain.transition[s, mask].sum()
                        w1 = local_transition_prob(queues[k], qn, True,
                                                   system.departures.pmf[locs[k]],
                                                   system.arrival_means[k],
                                                   chain.q_max)
                        w2 = local_transition_prob(queues[k], qn, False,
                                                   system.departures.pmf[locs[k]],
                                                   system.arrival_means[k],
                                                   chain.q_max)
                        mixture = eta[k] * w1 + (1 - eta[k]) * w2
                        assert marginal == pytest.approx(mixture, abs=1e-12)

    def test_simulated_state_distribution_matches_chain(self):
        system, _, s0 = tiny_instance()
        chain = build_chain(system)
        t_probe = 60
        dist = np.zeros(chain.n_states)
        dist[chain.state_index(s0)] = 1.0
        for _ in range(t_probe):
            dist = dist @ chain.transition
        n = 40_000
        batch = run_episodes_batch(system, t_probe, n, substream(61, "visit"),
                                   initial=s0)
        locs = batch.locs[t_probe]
        queues = batch.queues[t_probe]
        codes = ((locs[:, 0] * 3 + queues[:, 0]) * 6
                 + (locs[:, 1] * 3 + queues[:, 1]))
        counts = np.bincount(codes, minlength=chain.n_states)
        checked = 0
        for s in range(chain.n_states):
            expected = n * dist[s]
            if expected < 10:
                continue
            checked += 1
            sigma = np.sqrt(n * dist[s] * (1 - dist[s]))
            assert abs(counts[s] - expected) <= 3 * sigma
        assert checked >= 10


class TestExactDiscountedCost:
    def test_zero_costs(self):
        chain = build_chain(single_agent_countdown())
        chain.costs[:] = 0.0
        assert exact_discounted_cost(chain, GlobalState([0], [2]), 0.9) == 0.0

    def test_hand_built_absorbing_chain(self):
        # cost-1 states reach an absorbing zero-cost state in two steps
        transition = np.array([[0.0, 1.0, 0.0],
                               [0.0, 0.0, 1.0],
                               [0.0, 0.0, 1.0]])
        chain = EnumeratedChain(1, 3, 0, np.array([[0], [1], [2]]),
                                np.zeros((3, 1), dtype=int), transition,
                                np.array([1.0, 1.0, 0.0]))
        value = exact_discounted_cost(chain, 0, gamma=0.5, horizon=50)
        assert value == pytest.approx(1.5)

    def test_default_horizon_rule(self):
        assert 0.9 ** default_horizon(0.9, 44.0) * 44.0 <= 1e-6

    def test_monte_carlo_agreement(self):
        system, _, s0 = tiny_instance()
        chain = build_chain(system)
        t_ep = 60
        exact = exact_discounted_cost(chain, s0, system.cost.gamma, horizon=t_ep)
        n = 20_000
        stats = run_episodes_batch(system, t_ep, n, substream(62, "mc"),
                                   initial=s0, record=False)
        mean = stats.discounted_costs.mean()
        se = stats.discounted_costs.std(ddof=1) / np.sqrt(n)
        assert abs(mean - exact) <= 3 * se

    def test_monotone_in_arrival_rate(self):
        values = []
        for scale in (0.5, 1.0, 1.5):
            system, _, s0 = tiny_instance()
            system = System(system.policy, system.departures, system.mobility,
                            system.arrival_means * scale, system.cost,
                            system.access_model)
            chain = build_chain(system)
            values.append(exact_discounted_cost(chain, s0, system.cost.gamma))
        assert values[0] < values[1] < values[2]


class TestExactGradientFd:
    def test_unreachable_location_has_zero_gradient(self):
        system, params, _ = tiny_instance()
        frozen = System(system.policy, system.departures, static_model(2),
                        system.arrival_means, system.cost, system.access_model)
        s0 = GlobalState([0, 0], [1, 1])      # location 1 never visited
        g = exact_gradient_fd(frozen, params, "b", 0, 1, s0, frozen.cost.gamma,
                              horizon=40)
        assert g == 0.0

    def test_single_agent_gradients_vanish(self):
        system = single_agent_countdown()
        sys2 = System(system.policy, system.departures, system.mobility,
                      np.array([0.4]), system.cost)
        params = PolicyParams(np.array([[0.5]]), np.array([[0.05]]))
        sys2 = sys2.with_policy(TruncatedLinearPolicy(params))
        g = exact_gradient_fd(sys2, params, "b", 0, 0, GlobalState([0], [1]),
                              0.9, horizon=40)
        assert g == pytest.approx(0.0, abs=1e-9)

    def test_richardson_step_halving(self):
        system, params, s0 = tiny_instance()
        fds = [exact_gradient_fd(system, params, "lam", 1, 1, s0, 0.9,
                                 horizon=40, h=h) for h in (0.02, 0.01, 0.005)]
        d1 = abs(fds[0] - fds[1])
        d2 = abs(fds[1] - fds[2])
        assert d2 <= d1 * 0.6                 # roughly O(h^2) contraction
        assert d1 <= 0.05 * abs(fds[2])

    def test_interiority_refusal_names_state(self):
        system, _, s0 = tiny_instance()
        boundary = PolicyParams.baseline3_init(2, 2, q_max=2)
        sysb = system.with_policy(TruncatedLinearPolicy(boundary))
        with pytest.raises(ValueError, match="not strictly interior"):
            exact_gradient_fd(sysb, boundary, "b", 0, 0, s0, 0.9, horizon=40)

    def test_reachability_mask(self):
        system, _, _ = tiny_instance()
        frozen = System(system.policy, system.departures, static_model(2),
                        system.arrival_means, system.cost)
        chain = build_chain(frozen)
        reach = reachable_states(chain, GlobalState([0, 0], [0, 0]))
        assert reach.sum() < chain.n_states
        assert np.all(chain.locs[reach][:, 0] == 0)

    def test_chain_gradient_matches_fd_oracle(self):
        for mode in ("single_winner", "independent"):
            system, params, s0 = tiny_instance(mode)
            g_b, g_lam = exact_gradient_chain(system, params, s0, horizon=60)
            for kind, arr in (("b", g_b), ("lam", g_lam)):
                for k in range(2):
                    for l in range(2):
                        fd = exact_gradient_fd(system, params, kind, k, l, s0,
                                               system.cost.gamma, horizon=60)
                        assert arr[k, l] == pytest.approx(fd, abs=1e-6)
