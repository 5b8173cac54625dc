"""Weighted DAGs, posets and the discrete metric toolbox used around training.

Everything here is plain numpy on immutable inputs. Node ids are 0-based
integers; a graph with ``k`` nodes uses ids ``0..k-1``.
"""
from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CyclicInput,
    MalformedInput,
    NegativeWeight,
    TooLarge,
    UnknownMetric,
)

Edge = tuple[int, int, float]


@dataclass(frozen=True, eq=False)
class WeightedDigraph:
    """Simple weighted digraph with a feature row per node.

    ``distances`` is NaN wherever no edge carries a target distance; the
    diagonal is zero.
    """

    node_count: int
    features: np.ndarray
    edges: tuple[Edge, ...]

    def __post_init__(self):
        k = int(self.node_count)
        if k < 1:
            raise MalformedInput("node_count must be positive")
        feats = np.array(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats.reshape(k, -1)
        if feats.shape[0] != k:
            raise MalformedInput(f"features has {feats.shape[0]} rows for {k} nodes")
        seen = set()
        clean = []
        for u, v, w in self.edges:
            u, v, w = int(u), int(v), float(w)
            if not (0 <= u < k and 0 <= v < k):
                raise MalformedInput(f"edge ({u}, {v}) out of range for {k} nodes")
            if u == v:
                raise MalformedInput(f"self-loop on node {u}")
            if (u, v) in seen:
                raise MalformedInput(f"duplicate edge ({u}, {v})")
            if not w > 0:
                raise MalformedInput(f"edge ({u}, {v}) has non-positive weight {w}")
            seen.add((u, v))
            clean.append((u, v, w))
        feats.setflags(write=False)
        object.__setattr__(self, "node_count", k)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "edges", tuple(clean))

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightedDigraph):
            return NotImplemented
        return (self.node_count == other.node_count and self.edges == other.edges
                and np.array_equal(self.features, other.features))

    __hash__ = None

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count), dtype=np.int8)
        for u, v, _ in self.edges:
            a[u, v] = 1
        return a

    @property
    def distances(self) -> np.ndarray:
        d = np.full((self.node_count, self.node_count), np.nan)
        np.fill_diagonal(d, 0.0)
        for u, v, w in self.edges:
            d[u, v] = w
        return d

    @property
    def sources(self) -> np.ndarray:
        return np.array([u for u, _, _ in self.edges], dtype=np.intp)

    @property
    def targets(self) -> np.ndarray:
        return np.array([v for _, v, _ in self.edges], dtype=np.intp)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, _, w in self.edges], dtype=float)

    def successors(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v, _ in self.edges:
            out[u].append(v)
        return out

    def relabel(self, perm: Sequence[int]) -> "WeightedDigraph":
        """Node ``i`` becomes node ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.intp)
        feats = np.empty_like(self.features)
        feats[perm] = self.features
        edges = tuple((int(perm[u]), int(perm[v]), w) for u, v, w in self.edges)
        return WeightedDigraph(self.node_count, feats, edges)

    def to_json(self) -> dict:
        dist = self.distances
        return {
            "node_count": self.node_count,
            "features": self.features.tolist(),
            "edges": [[u, v, w] for u, v, w in self.edges],
            "adjacency": self.adjacency.tolist(),
            "distances": [[None if math.isnan(x) else x for x in row] for row in dist.tolist()],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "WeightedDigraph":
        try:
            return cls(
                int(payload["node_count"]),
                np.asarray(payload["features"], dtype=float),
                tuple((int(u), int(v), float(w)) for u, v, w in payload["edges"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInput(f"bad graph JSON: {exc}") from exc


@dataclass(frozen=True)
class Poset:
    """Finite poset stored as a reflexive boolean relation matrix."""

    relation: np.ndarray

    def __post_init__(self):
        rel = np.array(self.relation, dtype=bool)
        if rel.ndim != 2 or rel.shape[0] != rel.shape[1]:
            raise MalformedInput("relation must be a square matrix")
        rel.setflags(write=False)
        object.__setattr__(self, "relation", rel)

    @property
    def element_count(self) -> int:
        return self.relation.shape[0]

    @property
    def strict(self) -> np.ndarray:
        s = self.relation.copy()
        np.fill_diagonal(s, False)
        return s

    def leq(self, u: int, v: int) -> bool:
        return bool(self.relation[u, v])

    def comparable(self) -> np.ndarray:
        return self.relation | self.relation.T

    def antichain_mask(self) -> np.ndarray:
        """B[u, v] = True iff u and v are incomparable (symmetric, False on the diagonal)."""
        return ~self.comparable()

    def is_reflexive(self) -> bool:
        return bool(np.all(np.diag(self.relation)))

    def is_antisymmetric(self) -> bool:
        s = self.strict
        return not bool(np.any(s & s.T))

    def is_transitive(self) -> bool:
        r = self.relation.astype(np.int64)
        composed = (r @ r) > 0
        return not bool(np.any(composed & ~self.relation))

    def is_valid(self) -> bool:
        return self.is_reflexive() and self.is_antisymmetric() and self.is_transitive()


@dataclass(frozen=True)
class UndirectedView:
    """Symmetrized weights: W(u, v) = max(W_D(u, v), W_D(v, u)), 0 meaning no edge."""

    weights: np.ndarray = field(repr=False)

    @classmethod
    def of(cls, g: WeightedDigraph) -> "UndirectedView":
        w = np.zeros((g.node_count, g.node_count))
        for u, v, x in g.edges:
            w[u, v] = max(w[u, v], x)
            w[v, u] = max(w[v, u], x)
        return cls(w)

    @classmethod
    def from_edges(cls, k: int, edges: Iterable[Edge]) -> "UndirectedView":
        w = np.zeros((k, k))
        for u, v, x in edges:
            if x < 0:
                raise NegativeWeight(f"edge ({u}, {v}) has weight {x}")
            w[u, v] = max(w[u, v], x)
            w[v, u] = max(w[v, u], x)
        return cls(w)


# ---------------------------------------------------------------------------
# DAGs and posets


def topological_order(g: WeightedDigraph) -> list[int] | None:
    """Kahn's algorithm, smallest available id first; None if a cycle exists."""
    import heapq

    indeg = [0] * g.node_count
    succ = g.successors()
    for _, v, _ in g.edges:
        indeg[v] += 1
    heap = [u for u in range(g.node_count) if indeg[u] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        u = heapq.heappop(heap)
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    return order if len(order) == g.node_count else None


def is_dag(g: WeightedDigraph) -> bool:
    return topological_order(g) is not None


def reachability(g: WeightedDigraph) -> np.ndarray:
    """Reflexive-transitive closure of the edge relation as a boolean matrix."""
    order = topological_order(g)
    if order is None:
        raise CyclicInput("graph contains a directed cycle")
    k = g.node_count
    reach = np.eye(k, dtype=bool)
    succ = g.successors()
    for u in reversed(order):
        for v in succ[u]:
            reach[u] |= reach[v]
    return reach


def dag_to_poset(g: WeightedDigraph) -> Poset:
    return Poset(reachability(g))


def hasse_reduction(p: Poset) -> list[tuple[int, int]]:
    """Cover relations of ``p``, sorted."""
    s = p.strict
    si = s.astype(np.int64)
    composite = (si @ si) > 0
    covers = s & ~composite
    return [(int(u), int(v)) for u, v in zip(*np.nonzero(covers))]


def _max_bipartite_matching(adj: list[list[int]], n_right: int) -> int:
    # Kuhn's augmenting paths; left vertices and neighbours scanned in index order.
    match_right = [-1] * n_right

    def augment(u: int, seen: list[bool]) -> bool:
        for v in adj[u]:
            if seen[v]:
                continue
            seen[v] = True
            if match_right[v] == -1 or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    size = 0
    for u in range(len(adj)):
        if augment(u, [False] * n_right):
            size += 1
    return size


def poset_width(p: Poset) -> int:
    """Largest antichain size via a minimum chain cover (k minus a maximum matching)."""
    k = p.element_count
    s = p.strict
    adj = [list(np.nonzero(s[u])[0]) for u in range(k)]
    import sys

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * k + 100))
    try:
        matched = _max_bipartite_matching(adj, k)
    finally:
        sys.setrecursionlimit(limit)
    return k - matched


# ---------------------------------------------------------------------------
# Metrics on finite point sets


def shortest_paths(view: UndirectedView) -> np.ndarray:
    """All-pairs geodesic distances (Floyd-Warshall); NaN marks unreachable pairs."""
    w = np.asarray(view.weights, dtype=float)
    if np.any(w < 0):
        raise NegativeWeight("negative edge weight")
    k = w.shape[0]
    d = np.where(w > 0, w, np.inf)
    np.fill_diagonal(d, 0.0)
    for m in range(k):
        # Row/column m are fixed points of iteration m since d[m, m] == 0.
        np.minimum(d, d[:, m, None] + d[None, m, :], out=d)
    d[np.isinf(d)] = np.nan
    return d


def _off_diagonal(dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=float)
    mask = ~np.eye(dist.shape[0], dtype=bool)
    vals = dist[mask]
    return vals[~np.isnan(vals)]


def diameter(dist: np.ndarray) -> float:
    vals = _off_diagonal(dist)
    return float(vals.max()) if vals.size else 0.0


def separation(dist: np.ndarray) -> float:
    vals = _off_diagonal(dist)
    vals = vals[vals > 0]
    return float(vals.min()) if vals.size else 1.0


def doubling_constant_estimate(dist: np.ndarray, max_points: int = 16) -> int:
    """Exact doubling constant of a small finite metric space by exhaustive search.

    Balls are open. Only radii at which some ball changes need checking: each
    realized distance ``d`` and ``2 d`` (where the half-radius balls change),
    plus one radius beyond all of them.
    """
    dist = np.asarray(dist, dtype=float)
    n = dist.shape[0]
    if n > max_points:
        raise TooLarge(f"{n} points exceeds the brute-force limit of {max_points}")
    if n == 1:
        return 1
    realized = np.unique(_off_diagonal(dist))
    realized = realized[realized > 0]
    if realized.size == 0:
        # no finite distances: every ball is a singleton
        return 1
    critical = np.unique(np.concatenate([realized, 2 * realized, [4 * realized.max() + 1.0]]))

    def ball(center: int, radius: float) -> int:
        mask = 0
        for u in np.nonzero(dist[center] < radius)[0]:
            mask |= 1 << int(u)
        return mask

    worst = 1
    for r in critical:
        half = [ball(c, r / 2) for c in range(n)]
        cache: dict[int, int] = {}
        for x in range(n):
            target = ball(x, r)
            if target in cache:
                continue
            best = n
            for size in range(1, n + 1):
                if size >= best:
                    break
                found = False
                for combo in itertools.combinations(range(n), size):
                    cover = 0
                    for c in combo:
                        cover |= half[c]
                    if cover & target == target:
                        found = True
                        break
                if found:
                    best = size
                    break
            cache[target] = best
            worst = max(worst, best)
    return worst


# ---------------------------------------------------------------------------
# Synthetic metrics and generators


def _metric_4(r: np.ndarray) -> np.ndarray:
    out = np.empty_like(r)
    zero = r == 0
    one = np.abs(r - 1.0) < 1e-12
    rest = ~(zero | one)
    out[zero] = 0.0
    # (r - 1) / log r -> 1 as r -> 1
    out[one] = 1.0 - math.exp(-1.0)
    rr = r[rest]
    out[rest] = 1.0 - np.exp(-(rr - 1.0) / np.log(rr))
    return out


SYNTHETIC_METRICS = {
    "m1": lambda r: r**0.5 * np.log1p(r) ** 0.5,
    "m2": lambda r: r**0.1 * np.log1p(r) ** 0.9,
    "m3": lambda r: 1.0 - 1.0 / (1.0 + r**0.5),
    "m4": _metric_4,
    "m5": lambda r: 1.0 - 1.0 / (1.0 + r**0.2 + r**0.5),
}

METRIC_LABELS = {
    "m1": "||x-y||^0.5 log(1+||x-y||)^0.5",
    "m2": "||x-y||^0.1 log(1+||x-y||)^0.9",
    "m3": "1 - 1/(1+||x-y||^0.5)",
    "m4": "1 - exp(-(||x-y||-1)/log(||x-y||))",
    "m5": "1 - 1/(1+||x-y||^0.2+||x-y||^0.5)",
}


def synthetic_metric(name: str, x, y) -> float | np.ndarray:
    """Evaluate a named synthetic distance on the Euclidean distance of ``x`` and ``y``.

    Accepts single points or row-stacked batches.
    """
    try:
        fn = SYNTHETIC_METRICS[name]
    except KeyError:
        raise UnknownMetric(f"unknown metric {name!r}; expected one of {sorted(SYNTHETIC_METRICS)}") from None
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.linalg.norm(x - y, axis=-1)
    scalar = np.ndim(r) == 0
    out = fn(np.atleast_1d(r).astype(float))
    return float(out[0]) if scalar else out


def longest_path_ranks(k: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    """Rank of each node = length of the longest path ending at it. Edges must go low id -> high id."""
    rank = np.zeros(k, dtype=int)
    by_target: list[list[int]] = [[] for _ in range(k)]
    for u, v in edges:
        by_target[v].append(u)
    for v in range(k):
        if by_target[v]:
            rank[v] = 1 + max(rank[u] for u in by_target[v])
    return rank


def layered_layout(k: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    """Top-to-bottom layered coordinates in [0, 1]^2, one layer per longest-path rank.

    Nodes in a layer are spaced evenly left to right in id order; each axis is
    then min-max normalized (a constant axis sits at 0.5).
    """
    rank = longest_path_ranks(k, edges)
    pos = np.zeros((k, 2))
    for r in np.unique(rank):
        members = np.nonzero(rank == r)[0]
        for i, v in enumerate(members):
            pos[v, 0] = (i + 1) / (len(members) + 1)
        pos[members, 1] = -float(r)
    for axis in range(2):
        lo, hi = pos[:, axis].min(), pos[:, axis].max()
        pos[:, axis] = 0.5 if hi == lo else (pos[:, axis] - lo) / (hi - lo)
    return pos


def generate_random_dag(k: int, p: float, seed: int, metric: str = "m1") -> WeightedDigraph:
    """Random DAG on topological order 0..k-1; each forward pair is an edge with probability ``p``.

    Node features are the layered-layout coordinates; weights are the named
    synthetic metric of those coordinates.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability {p} outside [0, 1]")
    if metric not in SYNTHETIC_METRICS:
        raise UnknownMetric(metric)
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(k, 1)
    keep = rng.random(iu.size) < p
    pairs = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    pos = layered_layout(k, pairs)
    if pairs:
        src = np.array([u for u, _ in pairs])
        dst = np.array([v for _, v in pairs])
        w = synthetic_metric(metric, pos[src], pos[dst])
    else:
        w = np.zeros(0)
    edges = tuple((u, v, float(x)) for (u, v), x in zip(pairs, w))
    return WeightedDigraph(k, pos, edges)


def spring_layout(k: int, edges: Sequence[tuple[int, int]], seed: int, iterations: int = 50) -> np.ndarray:
    """Seeded force-directed layout: 1/r^2 repulsion, unit-constant springs, linear cooling."""
    rng = np.random.default_rng(seed)
    pos = rng.random((k, 2))
    if k == 1:
        return np.full((1, 2), 0.5)
    ideal = 1.0 / math.sqrt(k)
    src = np.array([u for u, _ in edges], dtype=np.intp)
    dst = np.array([v for _, v in edges], dtype=np.intp)
    temp = 0.1
    for it in range(iterations):
        delta = pos[:, None, :] - pos[None, :, :]
        r = np.linalg.norm(delta, axis=-1)
        np.fill_diagonal(r, 1.0)
        r = np.maximum(r, 1e-9)
        rep = (ideal**3 / r**2)[:, :, None] * delta / r[:, :, None]
        disp = rep.sum(axis=1)
        if src.size:
            e = pos[src] - pos[dst]
            # unit spring constant; rest length = ideal spacing
            el = np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-9)
            f = (el - ideal) * e / el
            np.add.at(disp, src, -f)
            np.add.at(disp, dst, f)
        length = np.maximum(np.linalg.norm(disp, axis=1, keepdims=True), 1e-12)
        step = temp * (1.0 - it / iterations)
        pos = pos + disp / length * np.minimum(length, step)
    for axis in range(2):
        lo, hi = pos[:, axis].min(), pos[:, axis].max()
        pos[:, axis] = 0.5 if hi == lo else (pos[:, axis] - lo) / (hi - lo)
    return pos


def generate_tree(branching: int, n: int, seed: int) -> WeightedDigraph:
    """Complete ``branching``-ary tree on ``n`` nodes in heap order, unit weights, parent -> child."""
    if branching not in (2, 3):
        raise ValueError("branching must be 2 or 3")
    if n < 1:
        raise ValueError("n must be >= 1")
    pairs = [((v - 1) // branching, v) for v in range(1, n)]
    pos = spring_layout(n, pairs, seed)
    return WeightedDigraph(n, pos, tuple((u, v, 1.0) for u, v in pairs))


def cosine_edge_weights(features: np.ndarray, pairs: Sequence[tuple[int, int]], clamp: float | None = None) -> np.ndarray:
    """Cosine similarity of endpoint features; with ``clamp`` the result is forced into [clamp, 1].

    Without ``clamp`` a non-positive similarity raises, since edge weights must be positive.
    """
    x = np.asarray(features, dtype=float)
    norms = np.linalg.norm(x, axis=1)
    out = np.empty(len(pairs))
    for i, (u, v) in enumerate(pairs):
        den = norms[u] * norms[v]
        out[i] = float(x[u] @ x[v] / den) if den > 0 else 0.0
    if clamp is not None:
        return np.clip(out, clamp, 1.0)
    if np.any(out <= 0):
        raise MalformedInput("cosine similarity <= 0 on some edge; pass a clamp value")
    return out


# ---------------------------------------------------------------------------
# File formats


def format_float(x: float) -> str:
    return repr(float(x))


def write_edge_list(path: Path | str, g: WeightedDigraph) -> None:
    lines = [f"{u}\t{v}\t{format_float(w)}\n" for u, v, w in g.edges]
    Path(path).write_text("".join(lines), encoding="utf-8")


def write_features(path: Path | str, features: np.ndarray) -> None:
    rows = [",".join(format_float(x) for x in row) + "\n" for row in np.asarray(features)]
    Path(path).write_text("".join(rows), encoding="utf-8")


def read_edge_list(path: Path | str) -> list[Edge]:
    edges = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise MalformedInput(f"{path}:{lineno}: expected 'u<TAB>v<TAB>w'")
        try:
            edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise MalformedInput(f"{path}:{lineno}: {exc}") from exc
    return edges


def read_features(path: Path | str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError as exc:
            raise MalformedInput(f"{path}:{lineno}: {exc}") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise MalformedInput(f"{path}: ragged or empty feature file")
    return np.array(rows)


def load_graph(edge_path: Path | str, feature_path: Path | str | None = None, node_count: int | None = None) -> WeightedDigraph:
    """Read an edge list plus optional feature CSV.

    Without features every node gets a one-hot row, so ``node_count`` (or the
    largest id seen) determines the feature width.
    """
    edges = read_edge_list(edge_path)
    if feature_path is not None:
        feats = read_features(feature_path)
        k = feats.shape[0]
    else:
        k = node_count if node_count is not None else 1 + max((max(u, v) for u, v, _ in edges), default=0)
        feats = np.eye(k)
    return WeightedDigraph(k, feats, tuple(edges))


def write_graph_json(path: Path | str, g: WeightedDigraph) -> None:
    Path(path).write_text(json.dumps(g.to_json(), indent=1) + "\n", encoding="utf-8")
