"""Graphs, datasets, normalized adjacency, synthetic motif tasks and splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import rng

log = logging.getLogger(__name__)


class GraphError(ValueError):
    """A graph violates one of its structural invariants."""


class DatasetError(ValueError):
    """A dataset file or collection is malformed or inconsistent."""


class SplitError(ValueError):
    """A split or few-shot sample cannot be formed."""


# ------------------------------------------------------------------ graphs


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with node features and masked multi-task labels.

    ``edges`` is an ``E x 2`` int array listing each undirected pair once
    with ``u < v``.  Self-loops never appear here; they are added only when
    building the normalized adjacency.
    """

    num_nodes: int
    edges: np.ndarray
    x: np.ndarray
    y: np.ndarray
    y_mask: np.ndarray

    @classmethod
    def build(cls, num_nodes, edges, x, y=(), y_mask=None, validate=True) -> "Graph":
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            e = np.sort(e, axis=1)
        x = np.array(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(int(num_nodes), -1)
        y = np.array(y, dtype=np.float64).reshape(-1)
        if y_mask is None:
            y_mask = np.ones(y.size, dtype=bool)
        g = cls(int(num_nodes), e, x, y, np.array(y_mask, dtype=bool).reshape(-1))
        if validate:
            validate_graph(g)
        return g

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    @property
    def num_tasks(self) -> int:
        return self.y.size

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.float64)
        if self.edges.size:
            np.add.at(deg, self.edges[:, 0], 1.0)
            np.add.at(deg, self.edges[:, 1], 1.0)
        return deg

    def adjacency(self) -> np.ndarray:
        """Dense raw adjacency, symmetric 0/1, zero diagonal."""
        a = np.zeros((self.num_nodes, self.num_nodes))
        if self.edges.size:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``; row ``perm[i]`` of the new x is row ``i`` of the old."""
        perm = np.asarray(perm, dtype=np.int64)
        x = np.empty_like(self.x)
        x[perm] = self.x
        edges = perm[self.edges] if self.edges.size else self.edges
        return Graph.build(self.num_nodes, edges, x, self.y, self.y_mask, validate=False)

    def with_features(self, x: np.ndarray) -> "Graph":
        return Graph(self.num_nodes, self.edges, np.asarray(x, dtype=np.float64), self.y, self.y_mask)


def validate_graph(g: Graph) -> None:
    """Raise :class:`GraphError` naming the first violated invariant."""
    if g.num_nodes < 1:
        raise GraphError(f"num_nodes must be >= 1, got {g.num_nodes}")
    if g.x.ndim != 2 or g.x.shape[0] != g.num_nodes:
        raise GraphError(f"x must have {g.num_nodes} rows, got shape {g.x.shape}")
    bad = np.argwhere(~np.isfinite(g.x))
    if bad.size:
        i, j = bad[0]
        raise GraphError(f"non-finite feature at node {i}, column {j}")
    seen = set()
    for k, (u, v) in enumerate(g.edges.tolist()):
        if u < 0 or v < 0 or u >= g.num_nodes or v >= g.num_nodes:
            raise GraphError(f"edge {k} ({u},{v}) has an endpoint outside [0, {g.num_nodes})")
        if u == v:
            raise GraphError(f"edge {k} ({u},{v}) is a self-loop")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise GraphError(f"edge {k} ({u},{v}) duplicates an earlier edge")
        seen.add(key)
    if g.y.shape != g.y_mask.shape:
        raise GraphError(f"y has shape {g.y.shape} but y_mask has {g.y_mask.shape}")
    present = g.y[g.y_mask]
    if not np.all((present == 0.0) | (present == 1.0)):
        raise GraphError("present labels must be 0 or 1")


# ------------------------------------------------------------------ normalized adjacency


@dataclass(frozen=True, eq=False)
class NormAdj:
    s: np.ndarray
    hops: int


def normalized_adjacency(g: Graph, m: int = 1) -> NormAdj:
    """Dense ``(D~^-1/2 (A+I) D~^-1/2)^m``."""
    if m < 1:
        raise ValueError(f"hops must be >= 1, got {m}")
    a = g.adjacency() + np.eye(g.num_nodes)
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    s1 = inv_sqrt[:, None] * a * inv_sqrt[None, :]
    s = s1
    for _ in range(m - 1):
        s = s @ s1
    return NormAdj(s, m)


# ------------------------------------------------------------------ batching


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of graphs with global node indices.

    ``ptr[g]:ptr[g+1]`` are the rows of graph ``g``.  Edge weights for the
    GCN-normalized propagation are precomputed.
    """

    graphs: tuple
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    ptr: np.ndarray
    degrees: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: Iterable[Graph]) -> "GraphBatch":
        graphs = tuple(graphs)
        if not graphs:
            raise ValueError("cannot batch zero graphs")
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        ptr = np.zeros(len(graphs) + 1, dtype=np.int64)
        np.cumsum(sizes, out=ptr[1:])
        edges = [g.edges + off for g, off in zip(graphs, ptr[:-1]) if g.edges.size]
        e = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
        x = np.concatenate([g.x for g in graphs], axis=0)
        deg = np.concatenate([g.degrees for g in graphs])
        return cls(
            graphs,
            x,
            np.ascontiguousarray(e[:, 0]),
            np.ascontiguousarray(e[:, 1]),
            ptr,
            deg,
        )

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return int(self.ptr[-1])

    @cached_property
    def node_graph(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_graphs), np.diff(self.ptr))

    @cached_property
    def gcn_weights(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.degrees + 1.0
        inv_sqrt = 1.0 / np.sqrt(d)
        return inv_sqrt[self.src] * inv_sqrt[self.dst], 1.0 / d

    def gin_weights(self, eps: float) -> tuple[np.ndarray, np.ndarray]:
        return np.ones(self.src.size), np.full(self.num_nodes, 1.0 + eps)

    @cached_property
    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        y = np.stack([g.y for g in self.graphs])
        mask = np.stack([g.y_mask for g in self.graphs])
        return y, mask


def as_batch(g) -> GraphBatch:
    if isinstance(g, GraphBatch):
        return g
    return GraphBatch.from_graphs([g])


# ------------------------------------------------------------------ datasets


@dataclass(eq=False)
class Dataset:
    graphs: list
    num_tasks: int
    feature_dim: int
    name: str = "dataset"

    def __post_init__(self):
        for i, g in enumerate(self.graphs):
            if g.feature_dim != self.feature_dim or g.num_tasks != self.num_tasks:
                raise DatasetError(
                    f"graph {i} has d={g.feature_dim}, T={g.num_tasks}; "
                    f"dataset expects d={self.feature_dim}, T={self.num_tasks}"
                )

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, indices: Sequence[int]) -> list:
        return [self.graphs[i] for i in indices]

    def batch(self, indices: Sequence[int]) -> GraphBatch:
        return GraphBatch.from_graphs(self.subset(indices))


def graph_to_record(g: Graph) -> dict:
    return {
        "num_nodes": g.num_nodes,
        "edges": g.edges.tolist(),
        "x": g.x.tolist(),
        "y": g.y.tolist(),
        "y_mask": g.y_mask.astype(int).tolist(),
    }


def save_dataset_jsonl(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in ds.graphs:
            fh.write(json.dumps(graph_to_record(g)) + "\n")


_REQUIRED = ("num_nodes", "edges", "x", "y", "y_mask")


def load_dataset_jsonl(path, name: str | None = None) -> Dataset:
    """Read one graph per line; d and T come from the first record."""
    path = Path(path)
    graphs: list[Graph] = []
    d = t = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}, line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}, line {lineno}: expected a JSON object")
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise DatasetError(f"{path}, line {lineno}: missing field(s) {', '.join(missing)}")
            extra = sorted(set(rec) - set(_REQUIRED))
            if extra:
                raise DatasetError(f"{path}, line {lineno}: unknown field(s) {', '.join(extra)}")
            try:
                n = rec["num_nodes"]
                if not isinstance(n, int) or isinstance(n, bool):
                    raise TypeError("num_nodes must be an integer")
                x = np.array(rec["x"], dtype=np.float64)
                if x.ndim != 2 or x.shape[0] != n:
                    raise TypeError(f"x must be a {n} x d matrix")
                edges = rec["edges"]
                if any(len(e) != 2 for e in edges):
                    raise TypeError("edges must be [u, v] pairs")
                if any(e[0] >= e[1] for e in edges):
                    raise TypeError("edges must be listed with u < v")
                g = Graph.build(n, edges, x, rec["y"], rec["y_mask"])
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}, line {lineno}: {exc}") from exc
            if d is None:
                d, t = g.feature_dim, g.num_tasks
            elif g.feature_dim != d or g.num_tasks != t:
                raise DatasetError(
                    f"{path}, line {lineno}: inconsistent shapes d={g.feature_dim}, T={g.num_tasks} "
                    f"(first record has d={d}, T={t})"
                )
            graphs.append(g)
    if not graphs:
        raise DatasetError(f"{path}: no records")
    return Dataset(graphs, t, d, name or path.stem)


# ------------------------------------------------------------------ synthetic motifs

MOTIFS = ("triangle", "four_cycle", "star")
STAR_DEGREE = 4


def has_motif(adj: np.ndarray, motif: str) -> bool:
    """Motif presence as a (not necessarily induced) subgraph, via matrix algebra.

    ``star`` is K_{1,4}: some node of degree >= 4.
    """
    a = adj
    if motif == "triangle":
        return bool(np.trace(a @ a @ a) > 0)
    if motif == "four_cycle":
        common = a @ a
        np.fill_diagonal(common, 0)
        return bool((common >= 2).any())
    if motif == "star":
        return bool((a.sum(axis=1) >= STAR_DEGREE).any())
    raise ValueError(f"unknown motif {motif!r}")


def _random_tree(gen: np.random.Generator, n: int) -> np.ndarray:
    # random recursive tree with maximum degree 3: motif-free by construction
    adj = np.zeros((n, n))
    deg = np.zeros(n, dtype=np.int64)
    for v in range(1, n):
        open_nodes = np.flatnonzero(deg[:v] < 3)
        u = int(gen.choice(open_nodes))
        adj[u, v] = adj[v, u] = 1.0
        deg[u] += 1
        deg[v] += 1
    perm = gen.permutation(n)
    return adj[np.ix_(perm, perm)]


def _hop_distances(adj: np.ndarray) -> np.ndarray:
    n = adj.shape[0]
    dist = np.full((n, n), n + 1, dtype=np.int64)
    reach = np.eye(n, dtype=bool)
    np.fill_diagonal(dist, 0)
    frontier = reach.copy()
    for hop in range(1, n):
        frontier = (frontier.astype(np.float64) @ adj > 0) & ~reach
        if not frontier.any():
            break
        dist[frontier] = hop
        reach |= frontier
    return dist


def _plant(adj: np.ndarray, motif: str, gen: np.random.Generator) -> bool:
    """Add one chord to the tree-like ``adj`` so that ``motif`` appears.

    A chord across a path of length 2 closes a triangle, of length 3 a
    4-cycle.  The star chord joins a degree-3 node to a far node (distance
    >= 4) so it reaches degree 4 without closing a short cycle.
    """
    deg = adj.sum(axis=1)
    dist = _hop_distances(adj)
    if motif == "star":
        cand = (deg[:, None] == 3) & (dist >= 4) & (dist <= adj.shape[0]) & (deg[None, :] <= 2)
    else:
        span = 2 if motif == "triangle" else 3
        low = deg <= 2
        cand = (dist == span) & low[:, None] & low[None, :]
    pairs = np.argwhere(cand)
    if not len(pairs):
        return False
    u, v = pairs[int(gen.integers(len(pairs)))]
    adj[u, v] = adj[v, u] = 1.0
    return True


def _motif_graph(gen, n, d, want, noise):
    adj = _random_tree(gen, n)
    for t in gen.permutation(len(want)):
        if want[t]:
            _plant(adj, MOTIFS[t], gen)
    labels = np.array([has_motif(adj, MOTIFS[t]) for t in range(len(want))], dtype=np.float64)
    deg = adj.sum(axis=1).astype(np.int64)
    x = np.zeros((n, d))
    x[np.arange(n), np.minimum(deg, d - 1)] = 1.0
    x += noise * gen.standard_normal((n, d))
    iu, iv = np.nonzero(np.triu(adj, 1))
    return Graph.build(n, np.stack([iu, iv], axis=1), x, labels)


def synth_motif_dataset(
    seed: int,
    num_graphs: int = 500,
    n_range: tuple[int, int] = (8, 24),
    d: int = 8,
    num_tasks: int = 3,
    noise: float = 0.1,
    max_retries: int = 200,
) -> Dataset:
    """Random graphs with planted motifs; task ``t`` is 1 iff motif ``t`` occurs.

    Each graph starts as a random tree of maximum degree 3, which contains
    none of the motifs (triangle, 4-cycle, K_{1,4} star).  Requested motifs
    are planted with single chords; the label is the true presence, and a
    graph is kept only if it matches the requested label vector, so tasks
    are near 50/50.  The whole draw is rejected unless every task lies
    within 40-60 % positive.  Features are one-hot degree buckets plus
    Gaussian noise.
    """
    lo, hi = n_range
    if not (4 <= lo <= hi <= 64):
        raise ValueError(f"n_range must lie within [4, 64], got {n_range}")
    if not 1 <= num_tasks <= len(MOTIFS):
        raise ValueError(f"num_tasks must be in 1..{len(MOTIFS)}")
    if d < STAR_DEGREE + 1:
        raise ValueError(f"feature dimension must be >= {STAR_DEGREE + 1} to encode degrees")
    for attempt in range(max_retries):
        gen = rng(seed, "synth", attempt)
        graphs = []
        for _ in range(num_graphs):
            for _retry in range(max_retries):
                n = int(gen.integers(lo, hi + 1))
                want = gen.random(num_tasks) < 0.5
                g = _motif_graph(gen, n, d, want, noise)
                if np.array_equal(g.y.astype(bool), want):
                    break
            else:
                raise DatasetError("could not realize requested motif labels within the retry budget")
            graphs.append(g)
        frac = np.mean([g.y for g in graphs], axis=0)
        if np.all((frac >= 0.4) & (frac <= 0.6)):
            return Dataset(graphs, num_tasks, d, f"motif-s{seed}")
        log.debug("rejecting unbalanced draw %s (positive rates %s)", attempt, frac)
    raise DatasetError("label balance within 60/40 not reached within the retry budget")


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class SplitSpec:
    train: tuple
    valid: tuple
    test: tuple
    seed: int
    method: str = "random"
    warnings: tuple = field(default=())


def split_dataset(ds, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitSpec:
    n = len(ds)
    if n < 3:
        raise SplitError(f"need at least 3 graphs to split, got {n}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    perm = rng(seed, "split").permutation(n)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_valid = min(n_valid, n - n_train)
    train = perm[:n_train]
    valid = perm[n_train : n_train + n_valid]
    test = perm[n_train + n_valid :]
    warnings = []
    if not len(valid):
        warnings.append("empty valid split")
    if not len(test):
        warnings.append("empty test split")
    return SplitSpec(
        tuple(int(i) for i in train),
        tuple(int(i) for i in valid),
        tuple(int(i) for i in test),
        seed,
        warnings=tuple(warnings),
    )


def few_shot_sample(split: SplitSpec, n: int, seed: int) -> SplitSpec:
    """Uniform n-subset of the training indices; valid and test are kept."""
    if n > len(split.train) or n < 1:
        raise SplitError(f"cannot draw {n} shots from a training set of {len(split.train)}")
    pick = rng(seed, "few-shot").permutation(len(split.train))[:n]
    train = tuple(split.train[i] for i in pick)
    return SplitSpec(train, split.valid, split.test, split.seed, split.method, split.warnings)
