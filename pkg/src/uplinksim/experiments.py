"""Reproducible experiment driver: precompute, train, evaluate, export.

All randomness flows through labeled substreams of one master seed, so a rerun
with the same config is byte-identical and adding evaluation episodes never
perturbs earlier ones. Evaluation uses the same episode substreams for every
policy (paired seeds).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .contention import (CostConfig, DepartureModel, System, run_episodes_batch)
from .environment import LinkStatsTable, SceneConfig, scene_from_dict
from .mobility import LocationGrid, MobilityModel, build_random_walk
from .optim import SgdConfig, SpsaConfig, sgd_train, spsa_train
from .policy import (ConstantPolicy, FullBufferPolicy, PolicyParams, QCsmaLikePolicy,
                     TruncatedLinearPolicy)
from .rng import derive_seed, substream

KNOWN_POLICIES = ("proposed", "spsa", "baseline1", "baseline2", "baseline3", "qcsma")
EVAL_CHUNK = 250


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class TrainBudget:
    episodes: int
    eta0_grid: tuple[float, ...] = (1e-3, 3e-3, 1e-2)
    a_grid: tuple[float, ...] = (1e-4, 3e-4, 1e-3)
    c_grid: tuple[float, ...] = (0.02, 0.05, 0.1)
    batch_size: int = 1


@dataclass
class ExperimentConfig:
    scene_path: str
    n_agents: int = 8
    arrival_means: np.ndarray = field(default_factory=lambda: np.full(8, 0.6))
    t_ep: int = 135
    gamma: float = 0.95
    w_b: float = 20.0
    q_max: int = 10
    theta_min: float = 1.0 / 63.0
    theta_max: float = 1.0
    access_model: str = "single_winner"
    policies: tuple[str, ...] = KNOWN_POLICIES
    training: dict = field(default_factory=dict)
    evaluation_episodes: int = 1000
    selection_episodes: int = 200
    precompute_samples: int = 1000
    seed: int = 0
    out_dir: str = "results"

    def validate(self):
        if not os.path.exists(self.scene_path):
            raise ConfigError("scene", f"file {self.scene_path!r} does not exist")
        if self.n_agents < 1:
            raise ConfigError("n_agents", "must be >= 1")
        if len(self.arrival_means) != self.n_agents:
            raise ConfigError("arrival_means", "length must equal n_agents")
        if (np.asarray(self.arrival_means) < 0).any():
            raise ConfigError("arrival_means", "must be >= 0")
        if self.t_ep < 1:
            raise ConfigError("t_ep", "must be >= 1")
        if not (0 < self.gamma < 1):
            raise ConfigError("gamma", "must lie in (0, 1)")
        if self.q_max < 1:
            raise ConfigError("q_max", "must be >= 1")
        if not (0 < self.theta_min < self.theta_max):
            raise ConfigError("theta_min", "need 0 < theta_min < theta_max")
        if self.evaluation_episodes < 1:
            raise ConfigError("evaluation_episodes", "must be >= 1")
        if self.selection_episodes < 1:
            raise ConfigError("selection_episodes", "must be >= 1")
        if self.precompute_samples < 1:
            raise ConfigError("precompute_samples", "must be >= 1")
        for pol in self.policies:
            if pol not in KNOWN_POLICIES:
                raise ConfigError("policies", f"unknown policy {pol!r}")
        for method in ("proposed", "spsa"):
            if method in self.policies:
                budget = self.training.get(method)
                if budget is None:
                    raise ConfigError(f"training.{method}", "budget required")
                if budget.episodes < 1:
                    raise ConfigError(f"training.{method}.episodes", "must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed", "must be >= 0")
        return self


def load_experiment(path: str, seed: int | None = None,
                    out_dir: str | None = None) -> ExperimentConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    n_agents = int(doc.get("n_agents", 8))
    if "arrival_means" in doc:
        arrivals = np.asarray(doc["arrival_means"], dtype=float)
    else:
        arrivals = np.full(n_agents, float(doc.get("arrival_mean", 0.6)))

    training = {}
    for method, spec in (doc.get("training") or {}).items():
        budget = TrainBudget(episodes=int(spec.get("episodes", 0)))
        if "eta0_grid" in spec:
            budget.eta0_grid = tuple(float(v) for v in spec["eta0_grid"])
        if "a_grid" in spec:
            budget.a_grid = tuple(float(v) for v in spec["a_grid"])
        if "c_grid" in spec:
            budget.c_grid = tuple(float(v) for v in spec["c_grid"])
        if "batch_size" in spec:
            budget.batch_size = int(spec["batch_size"])
        training[method] = budget

    cfg = ExperimentConfig(
        scene_path=resolve(doc["scene"]),
        n_agents=n_agents,
        arrival_means=arrivals,
        t_ep=int(doc.get("t_ep", 135)),
        gamma=float(doc.get("gamma", 0.95)),
        w_b=float(doc.get("w_b", 20.0)),
        q_max=int(doc.get("q_max", 10)),
        theta_min=float(doc.get("theta_min", 1.0 / 63.0)),
        theta_max=float(doc.get("theta_max", 1.0)),
        access_model=doc.get("access_model", "single_winner"),
        policies=tuple(doc.get("policies", KNOWN_POLICIES)),
        training=training,
        evaluation_episodes=int(doc.get("evaluation_episodes", 1000)),
        selection_episodes=int(doc.get("selection_episodes", 200)),
        precompute_samples=int(doc.get("precompute_samples", 1000)),
        seed=int(seed if seed is not None else doc.get("seed", 0)),
        out_dir=out_dir or doc.get("out_dir", "results"),
    )
    return cfg.validate()


def load_scene_and_grid(scene_path: str) -> tuple[SceneConfig, LocationGrid]:
    with open(scene_path) as fh:
        doc = yaml.safe_load(fh)
    scene = scene_from_dict(doc.get("scene", doc))
    grid_doc = doc.get("grid", {})
    grid = LocationGrid.regular(scene.room_width, scene.room_height,
                                int(grid_doc.get("n_cols", 6)),
                                int(grid_doc.get("n_rows", 5)),
                                scene.blockers)
    return scene, grid


@dataclass
class Workbench:
    """Everything assembled from a config: scene, grid, stats, base system."""

    cfg: ExperimentConfig
    scene: SceneConfig
    grid: LocationGrid
    link_stats: LinkStatsTable
    system: System               # policy slot left as None until chosen


def precompute_environment(cfg: ExperimentConfig) -> Workbench:
    """Enumerate paths, align beams, and build the contention system skeleton."""
    scene, grid = load_scene_and_grid(cfg.scene_path)
    table = LinkStatsTable.precompute(scene, grid.points, seed=cfg.seed,
                                      n_samples=cfg.precompute_samples)
    mobility = build_random_walk(grid)
    system = System(policy=None, departures=DepartureModel.from_link_stats(table),
                    mobility=mobility, arrival_means=cfg.arrival_means,
                    cost=CostConfig(gamma=cfg.gamma, w_b=cfg.w_b, q_max=cfg.q_max),
                    access_model=cfg.access_model)
    return Workbench(cfg, scene, grid, table, system)


def _initial_params(cfg: ExperimentConfig, n_locations: int) -> PolicyParams:
    return PolicyParams.baseline3_init(cfg.n_agents, n_locations, cfg.q_max,
                                       cfg.theta_min, cfg.theta_max)


def _selection_cost(bench: Workbench, policy) -> float:
    """Mean discounted cost on the selection stream (shared across candidates)."""
    cfg = bench.cfg
    total, count = 0.0, 0
    system = bench.system.with_policy(policy)
    for start in range(0, cfg.selection_episodes, EVAL_CHUNK):
        n = min(EVAL_CHUNK, cfg.selection_episodes - start)
        rng = substream(cfg.seed, "selection", start // EVAL_CHUNK)
        stats = run_episodes_batch(system, cfg.t_ep, n, rng, record=False)
        total += stats.discounted_costs.sum()
        count += n
    return total / count


def train_proposed(bench: Workbench):
    """Grid-search eta0, train with the policy-gradient SGD loop on each, and
    keep the candidate with the lowest selection cost.

    Returns (params, chosen record, history of the chosen run).
    """
    cfg = bench.cfg
    budget = cfg.training["proposed"]
    n_loc = len(bench.grid)
    best = None
    for eta0 in budget.eta0_grid:
        sgd_cfg = SgdConfig(eta0=eta0, t_ep=cfg.t_ep,
                            n_iterations=max(1, budget.episodes // budget.batch_size),
                            seed=derive_seed(cfg.seed, "train-proposed", eta0),
                            batch_size=budget.batch_size,
                            b_max=10.0 * cfg.theta_max)
        params, history = sgd_train(bench.system, _initial_params(cfg, n_loc), sgd_cfg)
        score = float(_selection_cost(bench, TruncatedLinearPolicy(params)))
        record = {"eta0": eta0, "selection_cost": score,
                  "iterations": sgd_cfg.n_iterations}
        if best is None or score < best[1]["selection_cost"]:
            best = (params, record, history)
    return best


def train_spsa(bench: Workbench):
    """Grid-search (a, c); each combo gets the full episode budget."""
    cfg = bench.cfg
    budget = cfg.training["spsa"]
    n_loc = len(bench.grid)
    best = None
    n_iterations = max(1, budget.episodes // (2 * budget.batch_size))
    for a in budget.a_grid:
        for c in budget.c_grid:
            spsa_cfg = SpsaConfig(a=a, c=c, t_ep=cfg.t_ep,
                                  n_iterations=n_iterations,
                                  seed=derive_seed(cfg.seed, "train-spsa", a, c),
                                  b_max=10.0 * cfg.theta_max,
                                  batch_size=budget.batch_size)
            params, history = spsa_train(bench.system, _initial_params(cfg, n_loc),
                                         spsa_cfg)
            score = float(_selection_cost(bench, TruncatedLinearPolicy(params)))
            record = {"a": a, "c": c, "selection_cost": score,
                      "iterations": spsa_cfg.n_iterations}
            if best is None or score < best[1]["selection_cost"]:
                best = (params, record, history)
    return best


def build_policy_set(bench: Workbench):
    """Instantiate every configured policy; trains the trained ones.

    Returns (policies, trained_info) where policies maps name -> policy object
    and trained_info maps name -> (params, chosen-hyperparameters, history).
    """
    cfg = bench.cfg
    n_loc = len(bench.grid)
    policies = {}
    trained = {}
    for name in cfg.policies:
        if name == "baseline1":
            policies[name] = ConstantPolicy(cfg.theta_min, cfg.theta_max)
        elif name == "baseline2":
            policies[name] = FullBufferPolicy(cfg.q_max, cfg.theta_min, cfg.theta_max)
        elif name == "baseline3":
            policies[name] = TruncatedLinearPolicy(_initial_params(cfg, n_loc))
        elif name == "qcsma":
            policies[name] = QCsmaLikePolicy(cfg.theta_min, cfg.theta_max)
        elif name == "proposed":
            params, record, history = train_proposed(bench)
            policies[name] = TruncatedLinearPolicy(params)
            trained[name] = (params, record, history)
        elif name == "spsa":
            params, record, history = train_spsa(bench)
            policies[name] = TruncatedLinearPolicy(params)
            trained[name] = (params, record, history)
    return policies, trained


def evaluate_policy(bench: Workbench, policy) -> tuple[np.ndarray, float]:
    """Per-episode discounted costs and full-buffer fraction on paired streams."""
    cfg = bench.cfg
    system = bench.system.with_policy(policy)
    costs = []
    fb_weighted = 0.0
    for start in range(0, cfg.evaluation_episodes, EVAL_CHUNK):
        n = min(EVAL_CHUNK, cfg.evaluation_episodes - start)
        rng = substream(cfg.seed, "evaluation", start // EVAL_CHUNK)
        stats = run_episodes_batch(system, cfg.t_ep, n, rng, record=False)
        costs.append(stats.discounted_costs)
        fb_weighted += stats.full_buffer_fraction * n
    return np.concatenate(costs), fb_weighted / cfg.evaluation_episodes


def empirical_cdf(values: np.ndarray) -> np.ndarray:
    """(n, 2) array of (value, cdf) points; nondecreasing, ends at 1."""
    ordered = np.sort(np.asarray(values))
    return np.column_stack([ordered, np.arange(1, len(ordered) + 1) / len(ordered)])


def heatmap_rows(policy, agent: int, n_locations: int, q_max: int):
    """(location, queue, theta) rows for every local state of one agent."""
    rows = []
    for loc in range(n_locations):
        for q in range(q_max + 1):
            rows.append((loc, q, float(policy.theta(agent, loc, q))))
    return rows


def emit_policy_heatmap(policy, agent: int, n_locations: int, q_max: int, path: str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location", "queue", "theta"])
        for loc, q, theta in heatmap_rows(policy, agent, n_locations, q_max):
            writer.writerow([loc, q, f"{theta:.12g}"])


def _write_costs_csv(path: str, costs: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "discounted_cost"])
        for i, c in enumerate(costs):
            writer.writerow([i, f"{c:.12g}"])


def _write_cdf_csv(path: str, costs: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cost", "cdf"])
        for value, p in empirical_cdf(costs):
            writer.writerow([f"{value:.12g}", f"{p:.12g}"])


def _write_training_csv(path: str, method: str, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if method == "proposed":
            writer.writerow(["iteration", "discounted_cost", "grad_norm",
                            "step_size", "degenerate_slots"])
        else:
            writer.writerow(["iteration", "cost_plus", "cost_minus", "a_m", "c_m"])
        for row in history:
            writer.writerow([row[0]] + [f"{v:.12g}" for v in row[1:]])


def summarize(costs: np.ndarray, full_buffer_fraction: float) -> dict:
    return {
        "mean": float(np.mean(costs)),
        "median": float(np.median(costs)),
        "p95": float(np.quantile(costs, 0.95)),
        "full_buffer_fraction": float(full_buffer_fraction),
        "n_episodes": int(len(costs)),
    }


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full pipeline: precompute, train, evaluate, write the result bundle.

    Returns the summary dict (policy name -> summary stats) that is also
    written to ``summary.json``.
    """
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    bench = precompute_environment(cfg)
    bench.link_stats.to_json(os.path.join(cfg.out_dir, "link_stats.json"))

    policies, trained = build_policy_set(bench)
    summaries = {}
    for name, policy in sorted(policies.items()):
        costs, fb = evaluate_policy(bench, policy)
        _write_costs_csv(os.path.join(cfg.out_dir, f"{name}_costs.csv"), costs)
        _write_cdf_csv(os.path.join(cfg.out_dir, f"{name}_cdf.csv"), costs)
        summaries[name] = summarize(costs, fb)
        if name in trained:
            params, record, history = trained[name]
            params.to_json(os.path.join(cfg.out_dir, f"{name}_params.json"))
            _write_training_csv(os.path.join(cfg.out_dir, f"{name}_training.csv"),
                                name, history)
            summaries[name]["hyperparameters"] = record

    manifest = {
        "seed": cfg.seed,
        "n_agents": cfg.n_agents,
        "arrival_means": [float(a) for a in cfg.arrival_means],
        "t_ep": cfg.t_ep,
        "gamma": cfg.gamma,
        "w_b": cfg.w_b,
        "q_max": cfg.q_max,
        "access_model": cfg.access_model,
        "evaluation_episodes": cfg.evaluation_episodes,
        "n_locations": len(bench.grid),
        "policies": list(cfg.policies),
    }
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump({"manifest": manifest, "policies": summaries}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")
    return summaries
