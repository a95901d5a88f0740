"""Command-line driver: precompute | train | evaluate | oracle | heatmap."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import experiments
from .contention import run_episodes_batch
from .instances import tiny_instance
from .optim import transition_tables, estimate_gradient_batch
from .oracle import build_chain, exact_discounted_cost, exact_gradient_all
from .policy import PolicyParams, TruncatedLinearPolicy
from .rng import substream


def _add_common(parser):
    parser.add_argument("--config", required=True, help="experiment YAML file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", default=None, help="output directory override")


def cmd_precompute(args):
    cfg = experiments.load_experiment(args.config, args.seed, args.out)
    os.makedirs(cfg.out_dir, exist_ok=True)
    bench = experiments.precompute_environment(cfg)
    path = os.path.join(cfg.out_dir, "link_stats.json")
    bench.link_stats.to_json(path)
    rates = bench.link_stats.expected_rates()
    print(f"precomputed {len(bench.grid)} locations -> {path}")
    print(f"expected rate [bits/slot]: min {rates.min():.3g}, "
          f"median {np.median(rates):.3g}, max {rates.max():.3g}")


def cmd_train(args):
    cfg = experiments.load_experiment(args.config, args.seed, args.out)
    if args.method not in cfg.training:
        sys.exit(f"no training budget configured for method {args.method!r}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    bench = experiments.precompute_environment(cfg)
    train = experiments.train_proposed if args.method == "proposed" \
        else experiments.train_spsa
    params, record, history = train(bench)
    params.to_json(os.path.join(cfg.out_dir, f"{args.method}_params.json"))
    experiments._write_training_csv(
        os.path.join(cfg.out_dir, f"{args.method}_training.csv"), args.method, history)
    print(f"trained {args.method}: {record}")


def cmd_evaluate(args):
    cfg = experiments.load_experiment(args.config, args.seed, args.out)
    summaries = experiments.run_experiment(cfg)
    for name in sorted(summaries):
        s = summaries[name]
        print(f"{name:10s} mean {s['mean']:10.3f}  median {s['median']:10.3f}  "
              f"p95 {s['p95']:10.3f}  full-buffer {s['full_buffer_fraction']:.4f}")
    print(f"bundle written to {cfg.out_dir}")


def cmd_oracle(args):
    if args.name != "tiny":
        sys.exit(f"unknown oracle scenario {args.name!r} (available: tiny)")
    seed = args.seed if args.seed is not None else 0
    system, params, s0 = tiny_instance(args.access_model)
    chain = build_chain(system)
    gamma = system.cost.gamma
    exact = exact_discounted_cost(chain, s0, gamma)
    print(f"tiny instance ({args.access_model}): {chain.n_states} states")
    print(f"exact discounted cost from S0: {exact:.6f}")

    n = args.episodes
    stats = run_episodes_batch(system, args.t_ep, n, substream(seed, "oracle-mc"),
                               initial=s0, record=False)
    mc = stats.discounted_costs
    se = mc.std(ddof=1) / np.sqrt(n)
    truncated = exact_discounted_cost(chain, s0, gamma, horizon=args.t_ep)
    print(f"Monte-Carlo mean over {n} episodes (T_ep={args.t_ep}): "
          f"{mc.mean():.6f} +/- {se:.6f} (exact truncated {truncated:.6f})")

    g_b, g_lam = exact_gradient_all(system, params, s0, gamma, horizon=args.t_ep,
                                    check_interior=True)
    batch = run_episodes_batch(system, args.t_ep, n, substream(seed, "oracle-grad"),
                               initial=s0)
    tables = transition_tables(system.departures, system.arrival_means,
                               system.cost.q_max)
    eb, el, _ = estimate_gradient_batch(batch, params, tables)
    print("coordinate   exact-FD    estimator-mean   SE")
    for kind, exact_g, est in (("b", g_b, eb), ("lam", g_lam, el)):
        for k in range(params.n_agents):
            for l in range(params.n_locations):
                m = est[:, k, l].mean()
                s = est[:, k, l].std(ddof=1) / np.sqrt(n)
                print(f"{kind}[{k},{l}]  {exact_g[k, l]:10.4f}  {m:12.4f}  {s:8.4f}")


def cmd_heatmap(args):
    params = PolicyParams.from_json(args.params)
    policy = TruncatedLinearPolicy(params)
    if not (0 <= args.agent < params.n_agents):
        sys.exit(f"agent index {args.agent} out of range (0..{params.n_agents - 1})")
    experiments.emit_policy_heatmap(policy, args.agent, params.n_locations,
                                    args.q_max, args.out)
    print(f"heatmap for agent {args.agent} -> {args.out}")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="uplinksim",
        description="Slot-level simulator and trainer for distributed uplink "
                    "channel contention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="enumerate paths and align beams per location")
    _add_common(p)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", help="train one method (proposed | spsa)")
    _add_common(p)
    p.add_argument("--method", choices=("proposed", "spsa"), required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="train as needed and evaluate the policy set")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle", help="print exact-chain checks for a tiny scenario")
    p.add_argument("--name", default="tiny")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--episodes", type=int, default=4000)
    p.add_argument("--t-ep", type=int, default=90)
    p.add_argument("--access-model", choices=("single_winner", "independent"),
                   default="independent")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("heatmap", help="export one agent's theta table as CSV")
    p.add_argument("--params", required=True, help="trained parameters JSON")
    p.add_argument("--agent", type=int, required=True)
    p.add_argument("--q-max", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
