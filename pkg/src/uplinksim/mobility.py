"""Discrete location grid and Markov mobility of the agents."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class LocationGrid:
    """Ordered grid points (row-major, bottom row first) inside the room."""

    points: np.ndarray        # (n_locations, 2) coordinates, meters
    rows: np.ndarray          # (n_locations,) grid row per point
    cols: np.ndarray          # (n_locations,) grid column per point
    n_cols: int
    n_rows: int
    cell_size: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.rows = np.asarray(self.rows, dtype=int)
        self.cols = np.asarray(self.cols, dtype=int)

    def __len__(self):
        return len(self.points)

    @classmethod
    def regular(cls, room_width: float, room_height: float, n_cols: int, n_rows: int,
                blockers=()) -> "LocationGrid":
        """Cell-center grid covering the room; centers inside a blocker are dropped."""
        cell_w = room_width / n_cols
        cell_h = room_height / n_rows
        cell = min(cell_w, cell_h)
        pts, rr, cc = [], [], []
        for r in range(n_rows):
            for c in range(n_cols):
                x = (c + 0.5) * cell_w
                y = (r + 0.5) * cell_h
                if any((x - bx) ** 2 + (y - by) ** 2 < br ** 2 for bx, by, br in blockers):
                    continue
                pts.append((x, y))
                rr.append(r)
                cc.append(c)
        return cls(np.array(pts), np.array(rr), np.array(cc), n_cols, n_rows, cell)


@dataclass
class MobilityModel:
    """Per-agent location transition matrices; a single matrix may be shared."""

    matrices: np.ndarray      # (n_models, L, L), n_models == 1 means shared
    shared: bool = True

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=float)
        if self.matrices.ndim != 3 or self.matrices.shape[1] != self.matrices.shape[2]:
            raise ValueError("matrices must be (n_models, L, L)")
        if (self.matrices < 0).any() or (self.matrices > 1).any():
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.abs(self.matrices.sum(axis=2) - 1.0).max() > 1e-12:
            raise ValueError("transition matrix rows must sum to 1")
        self._cdf = np.cumsum(self.matrices, axis=2)

    @property
    def n_locations(self) -> int:
        return self.matrices.shape[1]

    def matrix(self, agent: int) -> np.ndarray:
        return self.matrices[0 if self.shared else agent]

    def cdf_for_agents(self, n_agents: int) -> np.ndarray:
        """(n_agents, L, L) row cdfs, broadcasting a shared matrix."""
        if self.shared:
            return np.broadcast_to(self._cdf[0], (n_agents,) + self._cdf[0].shape)
        if self.matrices.shape[0] != n_agents:
            raise ValueError("per-agent model does not match the agent count")
        return self._cdf

    def row_cdf(self, agent: int, location: int) -> np.ndarray:
        return self._cdf[0 if self.shared else agent, location]

    def to_json(self, path: str):
        doc = {
            "shared": self.shared,
            "n_locations": self.n_locations,
            "matrices": [m.reshape(-1).tolist() for m in self.matrices],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str) -> "MobilityModel":
        with open(path) as fh:
            doc = json.load(fh)
        n = doc["n_locations"]
        mats = np.array([np.asarray(m, float).reshape(n, n) for m in doc["matrices"]])
        return cls(mats, shared=doc.get("shared", len(mats) == 1))


def build_random_walk(grid: LocationGrid) -> MobilityModel:
    """Stay or move to one of the four grid neighbors, each with probability 1/5.

    Moves lacking a neighbor (room boundary or a removed blocker cell) fold
    their probability into staying, keeping every row stochastic.
    """
    n = len(grid)
    index = {(int(r), int(c)): i for i, (r, c) in enumerate(zip(grid.rows, grid.cols))}
    p = np.zeros((n, n))
    for i in range(n):
        r, c = int(grid.rows[i]), int(grid.cols[i])
        p[i, i] += 0.2
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            j = index.get((r + dr, c + dc))
            if j is None:
                p[i, i] += 0.2
            else:
                p[i, j] += 0.2
    return MobilityModel(p[None, :, :], shared=True)


def static_model(n_locations: int) -> MobilityModel:
    """Agents never move; handy for oracle-scale tests."""
    return MobilityModel(np.eye(n_locations)[None, :, :], shared=True)


def step(model: MobilityModel, agent: int, current: int, rng: np.random.Generator) -> int:
    """Sample the next location index from the agent's transition row."""
    cdf = model.row_cdf(agent, current)
    u = rng.random()
    return min(int((cdf <= u).sum()), model.n_locations - 1)
