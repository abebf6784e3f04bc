"""Evaluation metrics, retraining backbone, and synthetic benchmarks.

Covers the four evaluation aspects: known-class accuracy, rejection
coverage/precision, annotation quality via label-text similarity, and
retraining improvement against lower/upper-bound label sets, plus the
seeded stochastic-block-model generator used for desk-scale runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .alt import UNKNOWN, RejectionOutcome
from .embeddings import cosine_matrix, mock_embed
from .graph import TextAttributedGraph, build_operator

log = logging.getLogger(__name__)

BACKBONE_HIDDEN = 128
BACKBONE_EPOCHS = 200
BACKBONE_LR = 0.01


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Aspect 1 and 2


def metric_accuracy(outcome: RejectionOutcome, true_labels: np.ndarray,
                    eval_mask: np.ndarray, count_rejected: bool = True) -> float:
    """Fraction of masked true-known nodes predicted with their own class.

    A rejected known-class node counts as incorrect by default; pass
    count_rejected=False to measure accuracy over the accepted nodes only.
    """
    mask = np.asarray(eval_mask, dtype=bool)
    if not count_rejected:
        mask = mask & ~outcome.unknown_mask
    if mask.sum() == 0:
        raise MetricError("accuracy over an empty node set")
    return float((outcome.predictions[mask] == true_labels[mask]).mean())


@dataclass
class CoveragePrecision:
    coverage: float
    precision: float
    nothing_rejected: bool = False


def metric_coverage_precision(outcome: RejectionOutcome, true_unknown: np.ndarray,
                              eval_mask: np.ndarray) -> CoveragePrecision:
    """Recall and precision of the rejected set against true unknowns.

    Both are computed inside eval_mask. Precision is defined as 0 with a
    flag when nothing is rejected.
    """
    mask = np.asarray(eval_mask, dtype=bool)
    unknown = np.asarray(true_unknown, dtype=bool) & mask
    if unknown.sum() == 0:
        raise MetricError("no true unknown-class nodes to cover")
    rejected = outcome.unknown_mask & mask
    hits = int((rejected & unknown).sum())
    coverage = hits / int(unknown.sum())
    if rejected.sum() == 0:
        return CoveragePrecision(coverage, 0.0, nothing_rejected=True)
    return CoveragePrecision(coverage, hits / int(rejected.sum()))


# ---------------------------------------------------------------------------
# Aspect 3


@dataclass
class LabelQuality:
    k_to_k: float
    k_to_g: float
    g_to_u: float | None
    singleton_known: bool = False


def _mean_within(sims: np.ndarray) -> tuple[float, bool]:
    n = sims.shape[0]
    if n < 2:
        return 1.0, True
    off = ~np.eye(n, dtype=bool)
    return float(sims[off].mean()), False


def metric_label_quality(known_labels: list[str], generated_labels: list[str],
                         ideal_unknown_labels: list[str] | None,
                         embed_dim: int = 128, embed_seed: int = 0) -> LabelQuality:
    """Mean pairwise label-text cosine within and across label sets.

    k_to_k: within known labels; k_to_g: known x generated;
    g_to_u: generated x ideal unknown labels (None when no ideals exist,
    e.g. outside synthetic runs). Singleton within-sets score 1.0 with a
    flag.
    """
    if not known_labels or not generated_labels:
        raise MetricError("label quality needs nonempty known and generated label sets")
    all_labels = list(known_labels) + list(generated_labels) + list(ideal_unknown_labels or [])
    emb = mock_embed(all_labels, f=embed_dim, seed=embed_seed)
    nk, ng = len(known_labels), len(generated_labels)
    sims = cosine_matrix(emb)
    k_to_k, singleton = _mean_within(sims[:nk, :nk])
    k_to_g = float(sims[:nk, nk:nk + ng].mean())
    g_to_u = None
    if ideal_unknown_labels:
        g_to_u = float(sims[nk:nk + ng, nk + ng:].mean())
    return LabelQuality(k_to_k, k_to_g, g_to_u, singleton)


# ---------------------------------------------------------------------------
# Aspect 4: label allocation and the mini backbone


def allocate_labels(graph: TextAttributedGraph, final_labels: dict[int, str],
                    require: np.ndarray | None = None
                    ) -> tuple[np.ndarray, dict[str, int]]:
    """Augmented label vector: original ids for labeled nodes, dense new ids
    (after the known classes) for annotated nodes.

    `require` lists the positions that must be covered by labels or the
    ledger (default: every node); an uncovered required node raises,
    naming it. Uncovered optional nodes get -1.
    """
    n_known = len(graph.class_names)
    new_names = sorted(set(final_labels.values()))
    label_index = {name: n_known + i for i, name in enumerate(new_names)}
    required = set(range(graph.node_count)) if require is None else {int(i) for i in require}
    augmented = np.full(graph.node_count, -1, dtype=np.int64)
    for i, y in enumerate(graph.labels):
        if y is not None:
            augmented[i] = y
        elif i in final_labels:
            augmented[i] = label_index[final_labels[i]]
        elif i in required:
            raise MetricError(f"node {graph.node_ids[i]} is neither labeled nor annotated")
    return augmented, label_index


@dataclass
class MiniGcnParams:
    """Two-layer mean-aggregation classifier weights."""

    w0: np.ndarray
    w1: np.ndarray


def _backbone_logits(operator_t: torch.Tensor, features: torch.Tensor,
                     w0: torch.Tensor, w1: torch.Tensor) -> torch.Tensor:
    hidden = torch.relu(torch.sparse.mm(operator_t, features @ w0))
    return torch.sparse.mm(operator_t, hidden @ w1)


def backbone_ce(operator_t, features, w0, w1, labels_t, mask_idx) -> torch.Tensor:
    logits = _backbone_logits(operator_t, features, w0, w1)
    return torch.nn.functional.cross_entropy(logits[mask_idx], labels_t[mask_idx])


def _operator_tensor(graph: TextAttributedGraph) -> torch.Tensor:
    coo = build_operator(graph, r=0.0).tocoo()
    return torch.sparse_coo_tensor(np.vstack((coo.row, coo.col)), coo.data,
                                   coo.shape, dtype=torch.float64,
                                   check_invariants=False).coalesce()


def backbone_train(graph: TextAttributedGraph, features: np.ndarray,
                   labels: np.ndarray, train_mask: np.ndarray,
                   epochs: int = BACKBONE_EPOCHS, lr: float = BACKBONE_LR,
                   seed: int = 0, hidden: int = BACKBONE_HIDDEN,
                   n_classes: int | None = None) -> MiniGcnParams:
    """Full-batch cross-entropy training of the mean-aggregation backbone.

    h1 = relu(T X W0), logits = T h1 W1 with the row-stochastic operator.
    Deterministic per seed; aborts when the loss stops being finite.
    """
    mask = np.asarray(train_mask, dtype=bool)
    if mask.sum() == 0:
        raise MetricError("backbone training mask is empty")
    if n_classes is None:
        n_classes = int(labels[mask].max()) + 1
    f = features.shape[1]
    gen = torch.Generator().manual_seed(seed)
    a0 = np.sqrt(6.0 / (f + hidden))
    a1 = np.sqrt(6.0 / (hidden + n_classes))
    w0 = ((torch.rand(f, hidden, generator=gen, dtype=torch.float64) * 2 - 1) * a0
          ).requires_grad_()
    w1 = ((torch.rand(hidden, n_classes, generator=gen, dtype=torch.float64) * 2 - 1) * a1
          ).requires_grad_()
    operator_t = _operator_tensor(graph)
    features_t = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float64))
    labels_t = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.int64))
    mask_idx = torch.from_numpy(np.where(mask)[0])
    optimizer = torch.optim.Adam([w0, w1], lr=lr)
    for epoch in range(epochs):
        loss = backbone_ce(operator_t, features_t, w0, w1, labels_t, mask_idx)
        if not torch.isfinite(loss):
            raise MetricError(f"backbone loss became non-finite at epoch {epoch}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return MiniGcnParams(w0.detach().numpy(), w1.detach().numpy())


def backbone_predict(params: MiniGcnParams, graph: TextAttributedGraph,
                     features: np.ndarray) -> np.ndarray:
    operator_t = _operator_tensor(graph)
    with torch.no_grad():
        logits = _backbone_logits(
            operator_t, torch.from_numpy(np.ascontiguousarray(features, dtype=np.float64)),
            torch.from_numpy(params.w0), torch.from_numpy(params.w1))
    return logits.numpy().argmax(axis=1)


def backbone_eval(params: MiniGcnParams, graph: TextAttributedGraph,
                  features: np.ndarray, labels: np.ndarray,
                  test_mask: np.ndarray) -> float:
    """Argmax accuracy over masked nodes (ties to the lowest class id)."""
    mask = np.asarray(test_mask, dtype=bool)
    if mask.sum() == 0:
        raise MetricError("backbone evaluation mask is empty")
    preds = backbone_predict(params, graph, features)
    return float((preds[mask] == np.asarray(labels)[mask]).mean())


# ---------------------------------------------------------------------------
# Synthetic benchmark generator


@dataclass
class SyntheticSpec:
    classes: int = 6
    unknown_holdout: int = 2
    nodes_per_class: int = 60
    p_intra: float = 0.1
    p_inter: float = 0.01
    separation: float = 4.0
    noise: float = 0.5
    dim: int = 128
    seed: int = 7

    def validate(self) -> None:
        if self.nodes_per_class < 1:
            raise ValueError(f"nodes_per_class must be >= 1, got {self.nodes_per_class}")
        if not 0.0 <= self.p_inter <= self.p_intra <= 1.0:
            raise ValueError(
                f"need 0 <= p_inter <= p_intra <= 1, got {self.p_inter}, {self.p_intra}")
        if not 0 <= self.unknown_holdout < self.classes:
            raise ValueError(
                f"unknown_holdout must be < classes, got {self.unknown_holdout}")
        if self.dim < self.classes:
            raise ValueError(
                f"dim must be >= classes for orthogonal centroids, got {self.dim}")


@dataclass
class GroundTruth:
    """Evaluation-only knowledge about a synthetic instance."""

    true_labels: np.ndarray            # class ids over all classes
    known_classes: int                 # ids < known_classes are known
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    ideal_labels: list[str] = field(default_factory=list)  # per class id

    @property
    def unknown_mask(self) -> np.ndarray:
        return self.true_labels >= self.known_classes


_TOPICS = [
    ("gradient", "descent"), ("graph", "community"), ("bayesian", "inference"),
    ("kernel", "regression"), ("symbolic", "planning"), ("spectral", "clustering"),
    ("manifold", "geometry"), ("causal", "discovery"), ("quantum", "annealing"),
    ("neural", "network"), ("genetic", "algorithm"), ("convex", "duality"),
]


def ideal_label(topic: tuple[str, str]) -> str:
    """The label the mock annotator produces for a pure community of this
    class: its two topic tokens in lexicographic order."""
    return "_".join(sorted(topic))


def _class_topics(n_classes: int) -> list[tuple[str, str]]:
    topics = list(_TOPICS)
    if n_classes > len(topics):
        topics += [(f"topic{i}", f"field{i}") for i in range(n_classes - len(topics))]
    # sorted by ideal label so class ids survive a CSV round-trip, where
    # the label vocabulary is rebuilt in sorted order
    return sorted(topics, key=ideal_label)[:n_classes]


def generate_synthetic(spec: SyntheticSpec) -> tuple[TextAttributedGraph, np.ndarray, GroundTruth]:
    """Seeded SBM graph with class-clustered unit-norm embeddings.

    Edges appear with p_intra inside a class and p_inter across. The
    embedding of a node in class j is s*mu_j plus gaussian noise of RMS
    norm sigma, normalized to unit length (mu_j mutually orthogonal).
    Node texts repeat the class topic words so the mock annotator recovers
    the class's ideal label; the last unknown_holdout classes contribute no
    labeled nodes. Masks are a per-class 40/20/40 split.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    c, per = spec.classes, spec.nodes_per_class
    n = c * per
    known = c - spec.unknown_holdout
    f = max(spec.dim, c)
    true_labels = np.repeat(np.arange(c), per)

    mu = np.zeros((c, f))
    mu[np.arange(c), np.arange(c)] = 1.0
    noise = spec.noise / np.sqrt(f) * rng.standard_normal((n, f))
    embeddings = spec.separation * mu[true_labels] + noise
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    embeddings = embeddings / np.where(norms == 0.0, 1.0, norms)

    edges: list[tuple[int, int]] = []
    for ci in range(c):
        for cj in range(ci, c):
            p = spec.p_intra if ci == cj else spec.p_inter
            if p <= 0.0:
                continue
            rows = np.arange(ci * per, (ci + 1) * per)
            cols = np.arange(cj * per, (cj + 1) * per)
            draw = rng.random((per, per)) < p
            if ci == cj:
                draw = np.triu(draw, k=1)
            ii, jj = np.nonzero(draw)
            edges.extend(zip(rows[ii].tolist(), cols[jj].tolist()))

    topics = _class_topics(c)
    ideal = [ideal_label(t) for t in topics]
    texts = [
        f"Record {i}: {topics[y][0]} {topics[y][1]} methods for "
        f"{topics[y][0]} {topics[y][1]} analysis"
        for i, y in enumerate(true_labels)]

    train_mask = np.zeros(n, dtype=bool)
    val_mask = np.zeros(n, dtype=bool)
    test_mask = np.zeros(n, dtype=bool)
    for cls in range(c):
        members = rng.permutation(np.arange(cls * per, (cls + 1) * per))
        n_train = int(0.4 * per)
        n_val = int(0.2 * per)
        train_mask[members[:n_train]] = True
        val_mask[members[n_train:n_train + n_val]] = True
        test_mask[members[n_train + n_val:]] = True

    labels: list[int | None] = [
        int(y) if train_mask[i] and y < known else None
        for i, y in enumerate(true_labels)]
    graph = TextAttributedGraph(
        node_ids=list(range(n)), texts=texts, labels=labels,
        class_names=ideal[:known], edges=sorted(set(edges)))
    truth = GroundTruth(true_labels, known, train_mask, val_mask, test_mask, ideal)
    return graph, embeddings, truth


# ---------------------------------------------------------------------------
# Aspect-4 orchestration


@dataclass
class BackboneReport:
    lower: float
    ours: float
    upper: float


def _majority_map(truth: GroundTruth, augmented: np.ndarray,
                  label_index: dict[str, int]) -> dict[int, int]:
    """True unknown class -> generated label id, by majority vote among
    annotated train-mask nodes of that class (no test leakage)."""
    mapping: dict[int, int] = {}
    generated_ids = set(label_index.values())
    for cls in range(truth.known_classes, len(np.unique(truth.true_labels))):
        members = (truth.true_labels == cls) & truth.train_mask
        counts: dict[int, int] = {}
        for gid in augmented[members]:
            if int(gid) in generated_ids:
                counts[int(gid)] = counts.get(int(gid), 0) + 1
        if counts:
            mapping[cls] = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
    return mapping


def backbone_comparison(graph: TextAttributedGraph, features: np.ndarray,
                        truth: GroundTruth, augmented: np.ndarray,
                        label_index: dict[str, int], seed: int = 0,
                        epochs: int = BACKBONE_EPOCHS, lr: float = BACKBONE_LR
                        ) -> BackboneReport:
    """Retraining comparison on the test mask against ground truth.

    lower: trains only on originally labeled nodes; ours: adds annotated
    rejected nodes inside the train mask with their generated label ids
    (true unknown classes are mapped to generated ids for scoring);
    upper: trains on the train mask with full ground-truth labels.
    """
    n = graph.node_count
    original = np.array([y is not None for y in graph.labels])
    orig_labels = np.array([y if y is not None else -1 for y in graph.labels])

    lower_params = backbone_train(graph, features, orig_labels, original,
                                  epochs, lr, seed, n_classes=truth.known_classes)
    known_test = truth.test_mask & ~truth.unknown_mask
    lower_known = backbone_eval(lower_params, graph, features, truth.true_labels, known_test)
    # unknown test nodes cannot be predicted by a known-classes-only model
    lower = lower_known * known_test.sum() / truth.test_mask.sum()

    upper_params = backbone_train(graph, features, truth.true_labels, truth.train_mask,
                                  epochs, lr, seed,
                                  n_classes=len(np.unique(truth.true_labels)))
    upper = backbone_eval(upper_params, graph, features, truth.true_labels, truth.test_mask)

    ours_mask = original | (truth.train_mask & (augmented >= truth.known_classes))
    n_total = truth.known_classes + len(label_index)
    ours_params = backbone_train(graph, features, augmented, ours_mask,
                                 epochs, lr, seed, n_classes=n_total)
    mapping = _majority_map(truth, augmented, label_index)
    target = np.where(truth.unknown_mask,
                      np.array([mapping.get(int(y), -1) for y in truth.true_labels]),
                      truth.true_labels)
    ours = backbone_eval(ours_params, graph, features, target, truth.test_mask)
    return BackboneReport(float(lower), float(ours), float(upper))
