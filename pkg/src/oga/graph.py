"""Text-attributed graph loading, validation, and adjacency operators.

Graphs are undirected and deduplicated at load time. Node ids from the
input files are preserved for IO; all matrix-valued operators index nodes
by their row position in the nodes file.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class GraphDataError(ValueError):
    """Raised for malformed or referentially inconsistent graph input."""


@dataclass
class TextAttributedGraph:
    """Undirected graph with per-node text and partial labels.

    ``labels[i]`` is a dense class id into ``class_names`` or None for
    unlabeled nodes. ``known_classes`` is the set of class ids that occur
    in ``labels``. Edges are stored once as (min, max) position pairs.
    """

    node_ids: list[int]
    texts: list[str]
    labels: list[int | None]
    class_names: list[str]
    edges: list[tuple[int, int]]
    _index: dict[int, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self._index:
            self._index = {nid: pos for pos, nid in enumerate(self.node_ids)}

    @property
    def node_count(self) -> int:
        return len(self.node_ids)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def known_classes(self) -> set[int]:
        return {y for y in self.labels if y is not None}

    def position(self, node_id: int) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise GraphDataError(f"unknown node id {node_id}") from None

    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency without self-loops (positional)."""
        n = self.node_count
        if not self.edges:
            return sp.csr_matrix((n, n))
        rows = np.fromiter((e[0] for e in self.edges), dtype=np.int64)
        cols = np.fromiter((e[1] for e in self.edges), dtype=np.int64)
        data = np.ones(len(self.edges))
        a = sp.coo_matrix((data, (rows, cols)), shape=(n, n))
        return (a + a.T).tocsr()

    def neighbors(self) -> list[np.ndarray]:
        """Sorted neighbor positions per node."""
        a = self.adjacency()
        return [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(self.node_count)]


def load_graph(nodes_path, edges_path) -> TextAttributedGraph:
    """Load a graph from ``node_id,label,text`` and ``src,dst`` CSV files.

    Duplicate edges and reversed orientations collapse to one stored edge.
    Self-loops in the input are dropped with a warning. An empty label
    field marks the node unlabeled; the label vocabulary becomes the
    known-class set.
    """
    node_ids: list[int] = []
    texts: list[str] = []
    raw_labels: list[str] = []
    seen_ids: set[int] = set()
    try:
        with open(nodes_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["node_id", "label", "text"]:
                raise GraphDataError(
                    f"nodes file header must be node_id,label,text, got {reader.fieldnames}")
            for row in reader:
                nid = int(row["node_id"])
                if nid < 0:
                    raise GraphDataError(f"negative node id {nid}")
                if nid in seen_ids:
                    raise GraphDataError(f"duplicate node id {nid}")
                seen_ids.add(nid)
                node_ids.append(nid)
                raw_labels.append(row["label"])
                texts.append(row["text"])
    except UnicodeDecodeError as exc:
        raise GraphDataError(f"nodes file is not valid UTF-8: {exc}") from exc

    class_names = sorted({lab for lab in raw_labels if lab != ""})
    class_index = {name: i for i, name in enumerate(class_names)}
    labels = [class_index[lab] if lab != "" else None for lab in raw_labels]

    index = {nid: pos for pos, nid in enumerate(node_ids)}
    edges: list[tuple[int, int]] = []
    edge_seen: set[tuple[int, int]] = set()
    try:
        with open(edges_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["src", "dst"]:
                raise GraphDataError(
                    f"edges file header must be src,dst, got {reader.fieldnames}")
            for row in reader:
                src, dst = int(row["src"]), int(row["dst"])
                for endpoint in (src, dst):
                    if endpoint not in index:
                        raise GraphDataError(
                            f"edge references node id {endpoint} absent from the node table")
                if src == dst:
                    warnings.warn(f"dropping self-loop on node {src}")
                    continue
                u, v = index[src], index[dst]
                key = (min(u, v), max(u, v))
                if key not in edge_seen:
                    edge_seen.add(key)
                    edges.append(key)
    except UnicodeDecodeError as exc:
        raise GraphDataError(f"edges file is not valid UTF-8: {exc}") from exc

    return TextAttributedGraph(node_ids, texts, labels, class_names, edges)


def save_graph(graph: TextAttributedGraph, nodes_path, edges_path) -> None:
    """Write the graph back to the CSV formats accepted by load_graph."""
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "label", "text"])
        for nid, lab, text in zip(graph.node_ids, graph.labels, graph.texts):
            writer.writerow([nid, "" if lab is None else graph.class_names[lab], text])
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst"])
        for u, v in graph.edges:
            writer.writerow([graph.node_ids[u], graph.node_ids[v]])


def degrees(graph: TextAttributedGraph) -> np.ndarray:
    """Per-node integer degree on the raw adjacency (no self-loops)."""
    return np.asarray(graph.adjacency().sum(axis=1)).ravel().astype(np.int64)


def build_operator(graph: TextAttributedGraph, r: float) -> sp.csr_matrix:
    """Normalized adjacency operator D̂^{r-1} Â D̂^{-r} with Â = A + I.

    r=0 gives a row-stochastic (mean aggregation) operator, r=0.5 the
    symmetric normalization. Self-loops make isolated nodes well-posed.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"kernel exponent r must be in [0, 1], got {r}")
    n = graph.node_count
    a_hat = graph.adjacency() + sp.eye(n, format="csr")
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    left = sp.diags(deg ** (r - 1.0))
    right = sp.diags(deg ** (-r))
    return (left @ a_hat @ right).tocsr()


def hop_ball(graph: TextAttributedGraph, node_pos: int, hop: int,
             adj: list[np.ndarray] | None = None) -> np.ndarray:
    """Sorted positions of all nodes within `hop` hops, including the node."""
    if adj is None:
        adj = graph.neighbors()
    seen = {node_pos}
    frontier = [node_pos]
    for _ in range(hop):
        nxt = []
        for v in frontier:
            for w in adj[v]:
                if w not in seen:
                    seen.add(int(w))
                    nxt.append(int(w))
        frontier = nxt
    return np.array(sorted(seen), dtype=np.int64)


def uniform_subset(pool: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset of `size` entries from `pool` (all of it if smaller).

    Uses rejection sampling when the pool is much larger than the request
    so the cost stays O(size) instead of O(len(pool)).
    """
    k = min(size, len(pool))
    if k == len(pool):
        return pool.copy()
    if len(pool) > 4 * k:
        while True:
            idx = rng.integers(0, len(pool), size=k)
            uniq = np.unique(idx)
            if len(uniq) == k:
                return pool[np.sort(uniq)]
    idx = rng.choice(len(pool), size=k, replace=False)
    return pool[np.sort(idx)]


def sample_neighborhood(graph: TextAttributedGraph, node_id: int, hop: int,
                        max_size: int, seed: int) -> set[int]:
    """Deterministic uniform sample from the hop ball around a node.

    Returns node ids (not positions). The ball always contains the query
    node before subsampling; hop >= 1 and max_size >= 1 are required.
    """
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if max_size < 1:
        raise ValueError(f"max_size must be >= 1, got {max_size}")
    pos = graph.position(node_id)
    ball = hop_ball(graph, pos, hop)
    rng = np.random.default_rng(seed)
    picked = uniform_subset(ball, max_size, rng)
    return {graph.node_ids[p] for p in picked}


def hop_balls_for(graph: TextAttributedGraph, node_positions: np.ndarray,
                  hop_max: int) -> list[list[np.ndarray]]:
    """Hop balls 1..hop_max for a batch of nodes via sparse reachability.

    Returns balls[j][h-1] = sorted positions within h hops of
    node_positions[j]. Equivalent to hop_ball() per node, but vectorized
    so preprocessing stays near-linear in graph size.
    """
    n = graph.node_count
    a = graph.adjacency().astype(bool)
    reach = np.zeros((n, len(node_positions)), dtype=bool)
    reach[node_positions, np.arange(len(node_positions))] = True
    per_hop: list[sp.csc_matrix] = []
    for _ in range(hop_max):
        reach = reach | (a @ reach)
        per_hop.append(sp.csc_matrix(reach))
    balls: list[list[np.ndarray]] = []
    for j in range(len(node_positions)):
        per_node = []
        for h in range(hop_max):
            col = per_hop[h]
            members = col.indices[col.indptr[j]:col.indptr[j + 1]]
            per_node.append(np.sort(members.astype(np.int64)))
        balls.append(per_node)
    return balls
