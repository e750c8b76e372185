"""Areal units, adjacency, border-crossing distances and spatial mixing weights."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


class GraphError(ValueError):
    """Invalid region graph input."""


@dataclass(frozen=True)
class RegionGraph:
    """Immutable region graph.

    Regions are ordered by sorted id; every array attribute is indexed in
    that order. ``entrants`` is in persons per year; the engine scales it by
    the step length.
    """

    region_ids: tuple[str, ...]
    adjacency: np.ndarray  # (R, R) bool, symmetric, zero diagonal
    base_population: np.ndarray  # (R,)
    entrants: np.ndarray  # (R,) persons per year
    _distance: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (self.n, self.n):
            raise GraphError("adjacency shape does not match region count")
        if not np.array_equal(adj, adj.T):
            raise GraphError("adjacency must be symmetric")
        if adj.diagonal().any():
            raise GraphError("self-edges are not allowed")
        pop = np.asarray(self.base_population, dtype=float)
        if np.any(~np.isfinite(pop)) or np.any(pop <= 0):
            raise GraphError("base populations must be positive")
        ent = np.asarray(self.entrants, dtype=float)
        if ent.shape != (self.n,) or np.any(ent < 0):
            raise GraphError("entrants must be nonnegative, one per region")
        dist = _all_pairs_bfs(adj)
        if np.any(dist < 0):
            raise GraphError("region graph is disconnected")
        for name, arr in (("adjacency", adj), ("base_population", pop),
                          ("entrants", ent), ("_distance", dist)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.region_ids)

    def index(self, region: str) -> int:
        try:
            return self._index[region]
        except KeyError:
            raise GraphError(f"unknown region id {region!r}") from None

    @property
    def _index(self) -> dict[str, int]:
        cache = self.__dict__.get("_index_cache")
        if cache is None:
            cache = {r: i for i, r in enumerate(self.region_ids)}
            object.__setattr__(self, "_index_cache", cache)
        return cache

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])

    @property
    def distance(self) -> np.ndarray:
        """All-pairs crossing distances (R, R) as integers."""
        return self._distance

    @property
    def diameter(self) -> int:
        return int(self._distance.max())


def _all_pairs_bfs(adj: np.ndarray) -> np.ndarray:
    n = adj.shape[0]
    nbrs = [np.flatnonzero(adj[i]) for i in range(n)]
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if dist[src, v] < 0:
                    dist[src, v] = dist[src, u] + 1
                    queue.append(v)
    return dist


def build_graph(
    edges: Iterable[tuple[str, str]],
    populations: Mapping[str, float],
    entrants: Mapping[str, float] | None = None,
) -> RegionGraph:
    """Build a validated graph from undirected edges and base populations.

    Raises:
        GraphError: on self-edges, unknown endpoints, nonpositive populations
            or a disconnected graph.
    """
    ids = tuple(sorted(str(k) for k in populations))
    if len(set(ids)) != len(populations):
        raise GraphError("duplicate region id")
    index = {r: i for i, r in enumerate(ids)}
    adj = np.zeros((len(ids), len(ids)), dtype=bool)
    for a, b in edges:
        a, b = str(a), str(b)
        if a == b:
            raise GraphError(f"self-edge on region {a!r}")
        for end in (a, b):
            if end not in index:
                raise GraphError(f"edge endpoint {end!r} has no population")
        adj[index[a], index[b]] = adj[index[b], index[a]] = True
    pop = np.array([float(populations[r]) for r in ids])
    ent = np.zeros(len(ids))
    if entrants is not None:
        ent = np.array([float(entrants.get(r, 0.0)) for r in ids])
    return RegionGraph(ids, adj, pop, ent)


def crossing_distance(g: RegionGraph, r: str, j: str) -> int:
    """Number of borders crossed on a shortest path from ``r`` to ``j``."""
    return int(g.distance[g.index(r), g.index(j)])


def close_set(g: RegionGraph, r: str, D: int) -> set[str]:
    """Regions within ``D`` border crossings of ``r`` (always includes ``r``)."""
    row = g.distance[g.index(r)]
    return {g.region_ids[j] for j in np.flatnonzero(row <= D)}


def close_mask(g: RegionGraph, D: int) -> np.ndarray:
    """Boolean (R, R) matrix, ``[r, j]`` true when j is within D crossings of r."""
    return g.distance <= D


def mixing_weights(g: RegionGraph, w0: float) -> np.ndarray:
    """Dense row-stochastic mixing matrix ``W[r, j] = w(r, j)``.

    The self weight is ``w0``; the remaining ``1 - w0`` is split among direct
    neighbours in proportion to their base population. Isolated regions put
    all weight on themselves.
    """
    if not 0.0 <= w0 <= 1.0:
        raise ValueError("w0 must lie in [0, 1]")
    W = np.zeros((g.n, g.n))
    for r in range(g.n):
        nb = g.neighbors(r)
        if nb.size == 0:
            W[r, r] = 1.0
            continue
        share = g.base_population[nb] / g.base_population[nb].sum()
        W[r, nb] = (1.0 - w0) * share
        W[r, r] = w0
    W.setflags(write=False)
    return W


def neighborhood_weights(g: RegionGraph, w0: float) -> dict[str, list[tuple[str, float]]]:
    """Sparse view of :func:`mixing_weights` keyed by region id."""
    W = mixing_weights(g, w0)
    return {
        g.region_ids[r]: [(g.region_ids[j], float(W[r, j])) for j in np.flatnonzero(W[r])]
        for r in range(g.n)
    }


def read_graph_csv(adjacency_path: str | Path, population_path: str | Path) -> RegionGraph:
    """Load ``adjacency.csv`` and ``population.csv``.

    Comment lines starting with ``#`` are skipped.
    """
    pops: dict[str, float] = {}
    ents: dict[str, float] = {}
    for row in _csv_rows(population_path, ("region_id", "population_t0", "entrants_per_year")):
        rid = row["region_id"]
        if rid in pops:
            raise GraphError(f"duplicate region id {rid!r}")
        pops[rid] = float(row["population_t0"])
        ents[rid] = float(row["entrants_per_year"])
    edges = [(row["region_a"], row["region_b"])
             for row in _csv_rows(adjacency_path, ("region_a", "region_b"))]
    return build_graph(edges, pops, ents)


def _csv_rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    missing = set(required) - set(reader.fieldnames or ())
    if missing:
        raise GraphError(f"{path}: missing columns {sorted(missing)}")
    return list(reader)


def write_graph_csv(g: RegionGraph, adjacency_path: str | Path, population_path: str | Path) -> None:
    """Write ``adjacency.csv`` and ``population.csv`` with a schema line first."""
    ids = g.region_ids
    with open(adjacency_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# schema_version: 1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_a", "region_b"])
        for a, b in zip(*np.nonzero(np.triu(g.adjacency))):
            w.writerow([ids[a], ids[b]])
    with open(population_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# schema_version: 1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "population_t0", "entrants_per_year"])
        for i, r in enumerate(ids):
            w.writerow([r, repr(float(g.base_population[i])), repr(float(g.entrants[i]))])
