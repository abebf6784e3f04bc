"""Community detection, degree-guided annotation, distillation, and fusion.

The annotator runs on the subgraph induced by rejected nodes: it detects
communities by maximizing a semantic-enhanced modularity objective,
annotates low-degree nodes through the LLM gateway, allocates labels to
high-degree nodes from annotated neighbors, distills one label per
community from its representatives, and fuses the most similar community
labels until a target count is reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .embeddings import cosine_matrix
from .llm import LlmGateway


@dataclass
class GlaConfig:
    gamma: float = 0.6
    phi: int = 3
    neighbor_context_cap: int = 5
    fusion_target: int | None = None   # defaults to the known-class count
    degree_split: str = "median"       # or "mean"
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.phi < 1:
            raise ValueError(f"phi must be >= 1, got {self.phi}")
        if self.fusion_target is not None and self.fusion_target < 1:
            raise ValueError(f"fusion_target must be >= 1, got {self.fusion_target}")
        if self.degree_split not in ("median", "mean"):
            raise ValueError(f"degree_split must be median or mean, got {self.degree_split}")


@dataclass
class CommunityPartition:
    """Node -> community assignment with the achieved objective value."""

    assignment: dict[int, int]
    gamma: float
    q: float | None

    def communities(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for node in sorted(self.assignment):
            out.setdefault(self.assignment[node], []).append(node)
        return out


@dataclass
class NodeAnnotation:
    label: str
    provenance: str  # llm | allocated


@dataclass
class AnnotationLedger:
    """Per-node annotations, community labels, and the fusion history."""

    nodes: dict[int, NodeAnnotation] = field(default_factory=dict)
    community_labels: dict[int, str] = field(default_factory=dict)
    fusion_trace: list[dict] = field(default_factory=list)
    final_labels: dict[int, str] = field(default_factory=dict)
    final_provenance: dict[int, str] = field(default_factory=dict)
    fallback_calls: int = 0
    low_seed_count: int = 0

    def to_json_dict(self) -> dict:
        return {
            "nodes": [{"id": nid,
                       "label": self.final_labels.get(nid, self.nodes[nid].label),
                       "provenance": self.final_provenance.get(
                           nid, self.nodes[nid].provenance)}
                      for nid in sorted(self.nodes)],
            "communities": [{"id": cid, "label": self.community_labels[cid]}
                            for cid in sorted(self.community_labels)],
            "fusion_trace": self.fusion_trace,
        }


# ---------------------------------------------------------------------------
# Semantic-enhanced modularity


def _semantic_matrix(embeddings: np.ndarray) -> np.ndarray:
    sims = cosine_matrix(embeddings)
    np.fill_diagonal(sims, 1.0)  # self-similarity fixed to 1 by definition
    return sims


def semantic_modularity(assignment: np.ndarray, adjacency: sp.spmatrix,
                        embeddings: np.ndarray, gamma: float) -> float:
    """Q = (1/2m) sum_ij [A_ij + gamma*cos_ij - (1-gamma)*d_i d_j/2m] delta(c_i,c_j).

    The sum runs over ordered pairs including i=j with A_ii = 0 and
    cos_ii = 1. Raises when the graph has no edges.
    """
    a = sp.csr_matrix(adjacency)
    degrees = np.asarray(a.sum(axis=1)).ravel()
    two_m = degrees.sum()
    if two_m == 0:
        raise ValueError("modularity is undefined on a graph with no edges")
    sims = _semantic_matrix(embeddings)
    assignment = np.asarray(assignment)
    same = assignment[:, None] == assignment[None, :]
    adj_term = float(a.toarray()[same].sum())
    sem_term = float(sims[same].sum())
    null_term = float(np.outer(degrees, degrees)[same].sum()) / two_m
    return (adj_term + gamma * sem_term - (1.0 - gamma) * null_term) / two_m


class _LouvainState:
    """Greedy local moving over units (node groups) with exact Eq.-5 gains.

    Per-community degree totals and unit-embedding vector sums are
    maintained incrementally, so evaluating a unit against every community
    costs O(C·f). The terms internal to the moved unit are identical for
    every destination and cancel out of the comparison.
    """

    def __init__(self, adjacency: sp.csr_matrix, embeddings: np.ndarray, gamma: float):
        self.a = adjacency
        self.gamma = gamma
        self.n = adjacency.shape[0]
        self.degrees = np.asarray(adjacency.sum(axis=1)).ravel()
        self.two_m = self.degrees.sum()
        norms = np.linalg.norm(embeddings, axis=1)
        safe = np.where(norms == 0.0, 1.0, norms)
        self.unit = embeddings / safe[:, None]

    def run(self, rng: np.random.Generator,
            init: np.ndarray | None = None) -> np.ndarray:
        comm = np.arange(self.n) if init is None else init.astype(np.int64).copy()
        units: list[np.ndarray] = [np.array([i]) for i in range(self.n)]
        while True:
            moved = self._local_move_pass(units, comm, rng)
            if not moved:
                break
            units = self._aggregate(comm)
        # singleton polish: escape aggregation lock-in
        singles = [np.array([i]) for i in range(self.n)]
        while self._local_move_pass(singles, comm, rng):
            pass
        return comm

    def _aggregate(self, comm: np.ndarray) -> list[np.ndarray]:
        groups: dict[int, list[int]] = {}
        for node, c in enumerate(comm):
            groups.setdefault(int(c), []).append(node)
        return [np.array(groups[c]) for c in sorted(groups)]

    def _local_move_pass(self, units: list[np.ndarray], comm: np.ndarray,
                         rng: np.random.Generator) -> bool:
        comm_vec = np.zeros((self.n, self.unit.shape[1]))
        comm_deg = np.zeros(self.n)
        comm_size = np.zeros(self.n, dtype=np.int64)
        np.add.at(comm_vec, comm, self.unit)
        np.add.at(comm_deg, comm, self.degrees)
        np.add.at(comm_size, comm, 1)
        moved_any = False
        improved = True
        while improved:
            improved = False
            for ui in rng.permutation(len(units)):
                unit = units[ui]
                current = int(comm[unit[0]])
                vec_u = self.unit[unit].sum(axis=0)
                deg_u = float(self.degrees[unit].sum())
                edge_to = np.zeros(self.n)
                in_unit = set(unit.tolist())
                for i in unit:
                    for j, w in zip(self.a.indices[self.a.indptr[i]:self.a.indptr[i + 1]],
                                    self.a.data[self.a.indptr[i]:self.a.indptr[i + 1]]):
                        if j not in in_unit:
                            edge_to[comm[j]] += w
                # detach the unit so every destination (incl. staying) is
                # scored against the community without it
                comm_vec[current] -= vec_u
                comm_deg[current] -= deg_u
                comm_size[current] -= len(unit)
                scores = (2.0 * (edge_to + self.gamma * (comm_vec @ vec_u))
                          - (1.0 - self.gamma) * 2.0 * deg_u * comm_deg / self.two_m)
                live = (comm_size > 0)
                live[current] = True  # staying (possibly alone) is always allowed
                empty = np.flatnonzero(comm_size == 0)
                if len(empty):
                    live[empty[0]] = True  # isolation move: start a fresh community
                scores[~live] = -np.inf
                best = int(np.argmax(scores))
                if scores[best] <= scores[current] + 1e-12:
                    best = current
                comm_vec[best] += vec_u
                comm_deg[best] += deg_u
                comm_size[best] += len(unit)
                if best != current:
                    comm[unit] = best
                    improved = True
                    moved_any = True
        return moved_any


def detect_communities(adjacency: sp.spmatrix, embeddings: np.ndarray,
                       config: GlaConfig, restarts: int | None = None
                       ) -> CommunityPartition:
    """Louvain-style maximization of semantic-enhanced modularity.

    Greedy local-move passes until no single move improves Q, then
    aggregation, repeated to a fixed point, with a final singleton-level
    polish. Runs several seeded restarts and keeps the best Q; fully
    deterministic given config.seed.
    """
    config.validate()
    a = sp.csr_matrix(adjacency)
    n = a.shape[0]
    if n == 0:
        raise ValueError("community detection needs a nonempty graph")
    if a.sum() == 0:
        raise ValueError("modularity is undefined on a graph with no edges")
    if restarts is None:
        restarts = 16 if n <= 32 else 4
    state = _LouvainState(a, embeddings, config.gamma)
    best_assign, best_q = None, -np.inf
    for restart in range(restarts):
        rng = np.random.default_rng((config.seed, restart))
        # restart 0 is the canonical singleton start; later restarts begin
        # from seeded random partitions to escape shared local basins
        init = None
        if restart > 0:
            groups = int(rng.integers(1, n + 1))
            init = rng.integers(0, groups, size=n)
        comm = state.run(rng, init)
        q = semantic_modularity(comm, a, embeddings, config.gamma)
        if q > best_q + 1e-15:
            best_assign, best_q = comm, q
    return CommunityPartition(_dense_assignment(best_assign), config.gamma, float(best_q))


def _dense_assignment(comm: np.ndarray) -> dict[int, int]:
    remap: dict[int, int] = {}
    out: dict[int, int] = {}
    for node in range(len(comm)):
        c = int(comm[node])
        if c not in remap:
            remap[c] = len(remap)
        out[node] = remap[c]
    return out


def singleton_partition(n: int, gamma: float) -> CommunityPartition:
    """Fallback when the rejected subgraph has no edges."""
    return CommunityPartition({i: i for i in range(n)}, gamma, None)


# ---------------------------------------------------------------------------
# Degree-guided annotation


def split_by_degree(members: list[int], degrees: np.ndarray,
                    mode: str = "median") -> tuple[list[int], list[int]]:
    """Split a community into (low, high) by the degree median (or mean).

    A node is low when its degree is strictly below the threshold. When no
    node falls below (degenerate communities), the minimum-degree node with
    the lowest id is forced low so every community has an LLM seed.
    """
    if not members:
        raise ValueError("cannot split an empty community")
    degs = np.array([degrees[v] for v in members], dtype=np.float64)
    threshold = float(np.median(degs)) if mode == "median" else float(degs.mean())
    low = [v for v, d in zip(members, degs) if d < threshold]
    high = [v for v, d in zip(members, degs) if d >= threshold]
    if not low:
        forced = min(members, key=lambda v: (degrees[v], v))
        low = [forced]
        high = [v for v in high if v != forced]
    return low, high


def neighbor_context(node: int, neighbors: np.ndarray, texts: list[str],
                     embeddings: np.ndarray, cap: int) -> list[str]:
    """Up to `cap` neighbor texts ranked by embedding cosine to the node."""
    if len(neighbors) == 0:
        return []
    sims = cosine_matrix(np.vstack([embeddings[node], embeddings[neighbors]]))[0, 1:]
    order = sorted(range(len(neighbors)), key=lambda j: (-sims[j], neighbors[j]))
    return [texts[neighbors[j]] for j in order[:cap]]


def annotate_low_degree(node: int, texts: list[str], neighbors: np.ndarray,
                        embeddings: np.ndarray, gateway: LlmGateway,
                        cap: int) -> str:
    if not texts[node]:
        raise ValueError(f"node {node} has empty text and cannot be annotated")
    ctx = neighbor_context(node, neighbors, texts, embeddings, cap)
    return gateway.annotate(texts[node], ctx)


def allocate_high_degree(node: int, neighbors: list[int], ledger: AnnotationLedger,
                         embeddings: np.ndarray, texts: list[str],
                         gateway: LlmGateway) -> tuple[str, str]:
    """Cosine-weighted vote over annotated neighbors; LLM fallback if none.

    Returns (label, provenance). Each annotated neighbor votes for its
    label with weight max(cos, 0); ties break lexicographically.
    """
    weights: dict[str, float] = {}
    sims = cosine_matrix(np.vstack([embeddings[node], embeddings[neighbors]]))[0, 1:] \
        if neighbors else np.zeros(0)
    for j, nb in enumerate(neighbors):
        if nb in ledger.nodes:
            lab = ledger.nodes[nb].label
            weights[lab] = weights.get(lab, 0.0) + max(float(sims[j]), 0.0)
    if not weights:
        ledger.fallback_calls += 1
        return gateway.annotate(texts[node], []), "llm"
    best = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
    return best, "allocated"


def select_representatives(members: list[int], neighborhoods: dict[int, set[int]],
                           embeddings: np.ndarray, phi: int) -> list[int]:
    """Top-phi members by mean pairwise (Jaccard overlap + cosine) score.

    Every member is returned when phi >= community size; ties break to the
    lowest node id.
    """
    if not members:
        raise ValueError("cannot pick representatives of an empty community")
    if phi >= len(members):
        return sorted(members)
    emb = embeddings[np.array(members)]
    sims = cosine_matrix(emb)
    scores = []
    for vi, v in enumerate(members):
        acc = 0.0
        for ui, u in enumerate(members):
            if u == v:
                continue
            inter = len(neighborhoods[v] & neighborhoods[u])
            union = len(neighborhoods[v] | neighborhoods[u])
            jacc = inter / union if union else 0.0
            acc += jacc + float(sims[vi, ui])
        scores.append(acc / (len(members) - 1))
    order = sorted(range(len(members)), key=lambda i: (-scores[i], members[i]))
    return [members[i] for i in order[:phi]]


def distill_community(rep_labels: list[str], gateway: LlmGateway) -> str:
    if not rep_labels:
        raise ValueError("distillation needs at least one representative label")
    return gateway.distill(rep_labels)


def community_similarity(members_a: list[int], members_b: list[int],
                         embeddings: np.ndarray) -> float:
    """Mean pairwise cosine across the two memberships."""
    if not members_a or not members_b:
        raise ValueError("community similarity needs two nonempty communities")
    ea = embeddings[np.array(members_a)]
    eb = embeddings[np.array(members_b)]
    sims = cosine_matrix(np.vstack([ea, eb]))[:len(members_a), len(members_a):]
    return float(sims.mean())


def fuse_until(partition: CommunityPartition, ledger: AnnotationLedger,
               embeddings: np.ndarray, gateway: LlmGateway,
               fusion_target: int) -> dict[int, str]:
    """Greedily merge the most similar label-bearing clusters down to the
    target count, then assign every node its cluster's final label.

    Ties on similarity break to the lexicographically lowest cluster-id
    pair. Returns the final node -> label map (also stored in the ledger).
    """
    communities = partition.communities()
    clusters: dict[int, dict] = {
        cid: {"members": list(members), "ids": [cid],
              "label": ledger.community_labels[cid]}
        for cid, members in communities.items()}
    merged_ids: set[int] = set()
    while len(clusters) > fusion_target:
        keys = sorted(clusters)
        best_pair, best_sim = None, -np.inf
        for i_pos, ci in enumerate(keys):
            for cj in keys[i_pos + 1:]:
                sim = community_similarity(clusters[ci]["members"],
                                           clusters[cj]["members"], embeddings)
                if sim > best_sim + 1e-15:
                    best_pair, best_sim = (ci, cj), sim
        ci, cj = best_pair
        fused = gateway.fuse(clusters[ci]["label"], clusters[cj]["label"])
        clusters[ci]["members"] = sorted(clusters[ci]["members"] + clusters[cj]["members"])
        clusters[ci]["ids"] = sorted(clusters[ci]["ids"] + clusters[cj]["ids"])
        clusters[ci]["label"] = fused
        merged_ids.update(clusters[ci]["ids"])
        del clusters[cj]
        ledger.fusion_trace.append({"merged": clusters[ci]["ids"], "label": fused})
    final: dict[int, str] = {}
    for info in clusters.values():
        was_merged = any(cid in merged_ids for cid in info["ids"])
        for node in info["members"]:
            final[node] = info["label"]
            ledger.final_labels[node] = info["label"]
            ledger.final_provenance[node] = "fused" if was_merged else "distilled"
    return final


# ---------------------------------------------------------------------------
# Orchestration over the rejected subgraph


def induced_subgraph(adjacency: sp.csr_matrix, positions: np.ndarray) -> sp.csr_matrix:
    return sp.csr_matrix(adjacency[positions][:, positions])


def detect_rejected_communities(adjacency: sp.csr_matrix, embeddings: np.ndarray,
                                rejected: np.ndarray, config: GlaConfig
                                ) -> CommunityPartition:
    """Partition the rejected-node subgraph; keys are global positions.

    Falls back to singleton communities when the subgraph has no edges
    (modularity undefined there).
    """
    config.validate()
    if len(rejected) == 0:
        raise ValueError("no rejected nodes to partition")
    rejected = np.sort(np.asarray(rejected))
    sub = induced_subgraph(adjacency, rejected)
    try:
        local = detect_communities(sub, embeddings[rejected], config)
    except ValueError:
        local = singleton_partition(len(rejected), config.gamma)
    return CommunityPartition(
        {int(rejected[i]): c for i, c in local.assignment.items()},
        local.gamma, local.q)


def annotate_partition(adjacency: sp.csr_matrix, texts: list[str],
                       embeddings: np.ndarray, partition: CommunityPartition,
                       gateway: LlmGateway, config: GlaConfig,
                       fusion_target: int) -> AnnotationLedger:
    """Annotate every node of a rejected-subgraph partition.

    Low-degree seeds go to the LLM (bounded concurrency; results keyed by
    node so completion order never matters), high-degree nodes inherit by
    cosine-weighted vote in (degree, id) order, then communities are
    distilled and fused. Degrees and neighborhoods live on the induced
    subgraph; prompt context uses full-graph neighbor texts.
    """
    config.validate()
    rejected = np.array(sorted(partition.assignment), dtype=np.int64)
    sub = induced_subgraph(adjacency, rejected)
    sub_degrees = np.asarray(sub.sum(axis=1)).ravel()
    degrees_by_global = {int(g): sub_degrees[i] for i, g in enumerate(rejected)}
    local_of = {int(g): i for i, g in enumerate(rejected)}
    full_neighbors = [adjacency.indices[adjacency.indptr[i]:adjacency.indptr[i + 1]]
                      for i in range(adjacency.shape[0])]
    sub_neighbors = {int(g): [int(rejected[j])
                              for j in sub.indices[sub.indptr[local_of[int(g)]]:
                                                   sub.indptr[local_of[int(g)] + 1]]]
                     for g in rejected}

    ledger = AnnotationLedger()
    communities = partition.communities()

    # individual annotations: parallel LLM seeds, then sequential allocation
    low_sets: dict[int, list[int]] = {}
    high_sets: dict[int, list[int]] = {}
    for cid, members in communities.items():
        low, high = split_by_degree(members, degrees_by_global, config.degree_split)
        low_sets[cid] = sorted(low, key=lambda v: (degrees_by_global[v], v))
        high_sets[cid] = sorted(high, key=lambda v: (degrees_by_global[v], v))

    seed_items = []
    for cid in sorted(communities):
        for node in low_sets[cid]:
            if not texts[node]:
                raise ValueError(f"node {node} has empty text and cannot be annotated")
            ctx = neighbor_context(node, full_neighbors[node], texts, embeddings,
                                   config.neighbor_context_cap)
            seed_items.append((node, texts[node], ctx))
    seed_labels = gateway.annotate_many(seed_items)
    for node, label in sorted(seed_labels.items()):
        ledger.nodes[node] = NodeAnnotation(label, "llm")
    ledger.low_seed_count = len(seed_items)

    for cid in sorted(communities):
        for node in high_sets[cid]:
            label, provenance = allocate_high_degree(
                node, sub_neighbors[node], ledger, embeddings, texts, gateway)
            ledger.nodes[node] = NodeAnnotation(label, provenance)

    # community labels via distillation
    for cid in sorted(communities):
        members = communities[cid]
        neighborhoods = {v: set(sub_neighbors[v]) | {v} for v in members}
        reps = select_representatives(members, neighborhoods, embeddings, config.phi)
        ledger.community_labels[cid] = distill_community(
            [ledger.nodes[v].label for v in reps], gateway)

    fuse_until(partition, ledger, embeddings, gateway, fusion_target)
    return ledger


def annotate_rejected(adjacency: sp.csr_matrix, texts: list[str],
                      embeddings: np.ndarray, rejected: np.ndarray,
                      gateway: LlmGateway, config: GlaConfig,
                      fusion_target: int) -> tuple[CommunityPartition, AnnotationLedger]:
    """Full pass: community detection followed by annotation."""
    partition = detect_rejected_communities(adjacency, embeddings, rejected, config)
    ledger = annotate_partition(adjacency, texts, embeddings, partition,
                                gateway, config, fusion_target)
    return partition, ledger
