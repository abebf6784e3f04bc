"""Adaptive label traceability: propagation, concept building, rejection.

The model propagates frozen node embeddings through a trainable weighted
power series of the normalized adjacency operator, aggregates class
concepts from sampled neighborhoods of labeled nodes with a learned
attention score, classifies every node by a sharpness-controlled softmax
over concept distances, and rejects low-confidence nodes as unknown.

Training is full-batch and deterministic per seed. All differentiable
math runs in float64 torch; the public array API is numpy.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import torch

from .graph import TextAttributedGraph, build_operator, hop_balls_for, uniform_subset

log = logging.getLogger(__name__)

ATTENTION_HIDDEN = 128
LOG_EPS = 1e-12
UNKNOWN = -1
# Draws averaged for the served concept set; training uses one draw per
# epoch so concepts stay dynamic, inference wants the low-variance mean.
INFERENCE_CONCEPT_SAMPLES = 10

MODEL_MAGIC = b"OGAALT1\x00"


class NumericError(RuntimeError):
    """Raised when a loss component stops being finite during training."""


@dataclass
class AltConfig:
    k: int = 5
    kappa: float = 0.2
    r: float = 0.5
    sharpness: float = 10.0       # lambda
    epsilon: float = 0.6
    alpha: float = 0.4
    beta: float = 0.6
    theta: float = 0.8
    hop_max: int = 5
    sample_size: int = 16
    epochs: int = 300
    learning_rate: float = 0.01
    dropout_rate: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"propagation steps k must be >= 1, got {self.k}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.sharpness <= 0:
            raise ValueError(f"sharpness must be > 0, got {self.sharpness}")
        if self.theta <= 0:
            raise ValueError(f"theta must be > 0, got {self.theta}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class AltParameters:
    """Propagation weights plus the two-layer attention score map."""

    w: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, k: int, f: int, seed: int) -> "AltParameters":
        gen = torch.Generator().manual_seed(seed)
        a1 = math.sqrt(6.0 / (f + ATTENTION_HIDDEN))
        a2 = math.sqrt(6.0 / (ATTENTION_HIDDEN + 1))
        w1 = (torch.rand(f, ATTENTION_HIDDEN, generator=gen, dtype=torch.float64) * 2 - 1) * a1
        w2 = (torch.rand(ATTENTION_HIDDEN, 1, generator=gen, dtype=torch.float64) * 2 - 1) * a2
        return cls(w=np.full(k, 1.0 / k),
                   w1=w1.numpy(), b1=np.zeros(ATTENTION_HIDDEN),
                   w2=w2.numpy(), b2=np.zeros(1))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class LossBreakdown:
    total: float
    ce: float
    smooth: float
    separate: float

    def as_dict(self) -> dict:
        return {"total": self.total, "ce": self.ce,
                "smooth": self.smooth, "separate": self.separate}


@dataclass
class RejectionOutcome:
    """Per-node prediction (UNKNOWN = -1), confidence, and entropy."""

    predictions: np.ndarray
    confidence: np.ndarray
    entropy: np.ndarray
    epsilon: float

    @property
    def unknown_mask(self) -> np.ndarray:
        return self.predictions == UNKNOWN


# ---------------------------------------------------------------------------
# Forward pieces (public numpy API)


def propagation_basis(embeddings: np.ndarray, operator: sp.spmatrix, k: int) -> list[np.ndarray]:
    """[T E, T^2 E, ..., T^k E] by repeated sparse multiplication."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    basis = []
    current = embeddings
    for _ in range(k):
        current = operator @ current
        basis.append(current)
    return basis


def propagate(embeddings: np.ndarray, operator: sp.spmatrix, params: AltParameters,
              kappa: float, k: int) -> np.ndarray:
    """Residual propagation E + kappa * sum_i w_i T^i E."""
    if kappa == 0.0:
        return embeddings.copy()
    out = embeddings.astype(np.float64, copy=True)
    for i, term in enumerate(propagation_basis(embeddings, operator, k)):
        out += kappa * params.w[i] * term
    return out


def attention_scores(rows: np.ndarray, params: AltParameters) -> np.ndarray:
    hidden = np.maximum(rows @ params.w1 + params.b1, 0.0)
    return (hidden @ params.w2 + params.b2).ravel()


def attention_weights(neighbor_rows: np.ndarray, params: AltParameters) -> np.ndarray:
    """Softmax over per-neighbor scores; positive, sums to 1."""
    rows = np.atleast_2d(np.asarray(neighbor_rows, dtype=np.float64))
    if rows.shape[0] == 0:
        raise ValueError("attention over an empty neighborhood")
    scores = attention_scores(rows, params)
    scores = scores - scores.max()
    e = np.exp(scores)
    return e / e.sum()


def _labeled_by_class(graph: TextAttributedGraph) -> dict[int, np.ndarray]:
    classes = sorted(graph.known_classes)
    out = {}
    for c in classes:
        members = np.array([i for i, y in enumerate(graph.labels) if y == c], dtype=np.int64)
        if len(members) == 0:
            raise ValueError(f"class {c} has no labeled node")
        out[c] = members
    return out


def draw_neighborhoods(balls: list[list[np.ndarray]], hop_max: int, sample_size: int,
                       epoch_seed) -> list[np.ndarray]:
    """One sampled neighborhood per labeled node, in labeled-node order.

    Consumes the epoch RNG node by node: first the hop depth, uniform on
    {1..hop_max}, then a uniform subset of the hop ball capped at
    sample_size. The ball always contains the node itself.
    """
    rng = np.random.default_rng(epoch_seed)
    drawn = []
    for per_hop in balls:
        hop = int(rng.integers(1, hop_max + 1))
        drawn.append(uniform_subset(per_hop[hop - 1], sample_size, rng))
    return drawn


def build_concepts(propagated: np.ndarray, graph: TextAttributedGraph,
                   config: AltConfig, params: AltParameters, epoch_seed) -> np.ndarray:
    """One stochastic concept matrix, one row per known class (ascending id).

    C_c averages, over labeled nodes of class c, the (1 + attention)-weighted
    mean of each node's sampled neighborhood embeddings.
    """
    by_class = _labeled_by_class(graph)
    positions = np.concatenate([by_class[c] for c in sorted(by_class)])
    balls = hop_balls_for(graph, positions, config.hop_max)
    neigh = draw_neighborhoods(balls, config.hop_max, config.sample_size, epoch_seed)
    concepts = np.zeros((len(by_class), propagated.shape[1]))
    cursor = 0
    for row, c in enumerate(sorted(by_class)):
        members = by_class[c]
        acc = np.zeros(propagated.shape[1])
        for _ in members:
            picked = neigh[cursor]
            cursor += 1
            rows = propagated[picked]
            watt = attention_weights(rows, params)
            acc += ((1.0 + watt)[:, None] * rows).sum(axis=0) / len(picked)
        concepts[row] = acc / len(members)
    return concepts


def classify(propagated: np.ndarray, concepts: np.ndarray, sharpness: float) -> np.ndarray:
    """Distance softmax D_{i,c} = softmax_c(-lambda * ||e_i - C_c||_2)."""
    if sharpness <= 0:
        raise ValueError(f"sharpness must be > 0, got {sharpness}")
    diffs = propagated[:, None, :] - concepts[None, :, :]
    dists = np.linalg.norm(diffs, axis=2)
    logits = -sharpness * dists
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def entropy_floor_approx(epsilon: float, n_classes: int, sharpness: float) -> float:
    """Asymptotic entropy floor log|C| - (1/lambda) log((1-eps)/eps).

    Diagnostic only: not a valid lower bound for small class counts, so it
    is logged but never asserted. Use min_entropy_bound for guarantees.
    """
    return math.log(n_classes) - math.log((1 - epsilon) / epsilon) / sharpness


def reject(probabilities: np.ndarray, epsilon: float,
           sharpness: float | None = None) -> RejectionOutcome:
    """Argmax prediction when max probability >= epsilon, else UNKNOWN.

    Ties break to the lowest class id. Confidence and Shannon entropy are
    recorded for every node. When sharpness is given, the asymptotic
    entropy floor is logged as a diagnostic.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    conf = probabilities.max(axis=1)
    preds = probabilities.argmax(axis=1).astype(np.int64)
    preds[conf < epsilon] = UNKNOWN
    ent = -(probabilities * np.log(np.clip(probabilities, LOG_EPS, None))).sum(axis=1)
    if sharpness is not None and 0.0 < epsilon < 1.0:
        log.debug("rejection entropy floor (asymptotic form): %.4f",
                  entropy_floor_approx(epsilon, probabilities.shape[1], sharpness))
    return RejectionOutcome(preds, conf, ent, epsilon)


def min_entropy_bound(epsilon: float, n_classes: int) -> float:
    """Entropy of the most concentrated distribution with all mass <= eps.

    With m = floor(1/eps) entries at eps and remainder rho = 1 - m*eps,
    the minimum achievable entropy is -(m*eps*log eps + rho*log rho); any
    rejected node (max probability < eps) has entropy at least this.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if epsilon > 1:
        raise ValueError(f"epsilon must be <= 1, got {epsilon}")
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    m = int(math.floor(1.0 / epsilon + 1e-12))
    rho = 1.0 - m * epsilon
    h = -m * epsilon * math.log(epsilon)
    if rho > 1e-15:
        h -= rho * math.log(rho)
    return h


def loss(probabilities: np.ndarray, labels: list[int | None], concepts: np.ndarray,
         operator: sp.spmatrix, config: AltConfig) -> LossBreakdown:
    """Composite objective: cross-entropy + smoothness + concept separation.

    ce is the mean negative log-likelihood over labeled rows. smooth is the
    Dirichlet energy trace(D^T (I - T) D) / n plus the labeled-row
    alignment ||(D - Y) . M||_F^2 / |V_l|. separate is the mean over
    ordered class pairs of cos(C_i, C_j) + max(0, theta - ||C_i - C_j||^2).
    """
    d = probabilities
    n, n_classes = d.shape
    labeled = [i for i, y in enumerate(labels) if y is not None]
    if not labeled:
        raise ValueError("loss needs at least one labeled node")
    y_idx = np.array([labels[i] for i in labeled], dtype=np.int64)
    ce = -float(np.log(d[labeled, y_idx] + LOG_EPS).mean())

    td = operator @ d
    dirichlet = float((d * d).sum() - (d * td).sum()) / n
    target = np.zeros_like(d)
    target[labeled, y_idx] = 1.0
    mask = np.zeros((n, 1))
    mask[labeled] = 1.0
    align = float((((d - target) * mask) ** 2).sum()) / len(labeled)
    smooth = dirichlet + align

    norms = np.linalg.norm(concepts, axis=1, keepdims=True)
    unit = concepts / np.clip(norms, LOG_EPS, None)
    cos = unit @ unit.T
    dist2 = ((concepts[:, None, :] - concepts[None, :, :]) ** 2).sum(axis=2)
    off = ~np.eye(n_classes, dtype=bool)
    pairs = n_classes * (n_classes - 1)
    separate = float(cos[off].sum() + np.maximum(0.0, config.theta - dist2[off]).sum()) / pairs

    total = ce + config.alpha * smooth + config.beta * separate
    return LossBreakdown(total, ce, smooth, separate)


# ---------------------------------------------------------------------------
# Training (torch internals)


class TrainingProblem:
    """Caches everything about one (graph, embeddings, config) instance so
    the loss can be evaluated as a pure function of the parameters."""

    def __init__(self, graph: TextAttributedGraph, embeddings: np.ndarray,
                 config: AltConfig):
        config.validate()
        if embeddings.shape[0] != graph.node_count:
            raise ValueError(
                f"embedding rows {embeddings.shape[0]} != node count {graph.node_count}")
        self.graph = graph
        self.config = config
        self.by_class = _labeled_by_class(graph)
        self.classes = sorted(self.by_class)
        self.lab_positions = np.concatenate([self.by_class[c] for c in self.classes])
        self.lab_sizes = [len(self.by_class[c]) for c in self.classes]
        self.n, self.f = embeddings.shape

        operator = build_operator(graph, config.r)
        self.operator = operator
        self.embeddings = torch.from_numpy(np.ascontiguousarray(embeddings, dtype=np.float64))
        self.basis = torch.stack([
            torch.from_numpy(np.ascontiguousarray(term))
            for term in propagation_basis(embeddings.astype(np.float64), operator, config.k)])
        coo = operator.tocoo()
        self.operator_t = torch.sparse_coo_tensor(
            np.vstack((coo.row, coo.col)), coo.data, (self.n, self.n),
            dtype=torch.float64, check_invariants=False).coalesce()

        self.balls = hop_balls_for(graph, self.lab_positions, config.hop_max)
        self.target = torch.zeros(self.n, len(self.classes), dtype=torch.float64)
        self.lab_mask = torch.zeros(self.n, 1, dtype=torch.float64)
        for row_class, c in enumerate(self.classes):
            for pos in self.by_class[c]:
                self.target[pos, row_class] = 1.0
                self.lab_mask[pos, 0] = 1.0
        self.class_rows = torch.from_numpy(np.repeat(
            np.arange(len(self.classes)), self.lab_sizes))

    # -- sampled neighborhoods, padded for batched gather ---------------

    def sample_epoch(self, epoch_seed):
        drawn = draw_neighborhoods(self.balls, self.config.hop_max,
                                   self.config.sample_size, epoch_seed)
        size = max(len(d) for d in drawn)
        idx = np.zeros((len(drawn), size), dtype=np.int64)
        mask = np.zeros((len(drawn), size), dtype=bool)
        for j, d in enumerate(drawn):
            idx[j, :len(d)] = d
            mask[j, :len(d)] = True
        return torch.from_numpy(idx), torch.from_numpy(mask)

    # -- differentiable forward ----------------------------------------

    def propagated(self, params: dict[str, torch.Tensor]) -> torch.Tensor:
        if self.config.kappa == 0.0:
            return self.embeddings
        return self.embeddings + self.config.kappa * torch.tensordot(
            params["w"], self.basis, dims=1)

    def concepts(self, propagated: torch.Tensor, params: dict[str, torch.Tensor],
                 neigh) -> torch.Tensor:
        idx, mask = neigh
        rows = propagated[idx]                                  # [L, S, f]
        hidden = torch.relu(rows @ params["w1"] + params["b1"])
        scores = (hidden @ params["w2"] + params["b2"]).squeeze(-1)
        scores = scores.masked_fill(~mask, -torch.inf)
        watt = torch.softmax(scores, dim=1)
        sizes = mask.sum(dim=1, keepdim=True).to(rows.dtype)
        contrib = ((1.0 + watt).unsqueeze(-1) * rows * mask.unsqueeze(-1)).sum(dim=1) / sizes
        out = torch.zeros(len(self.classes), self.f, dtype=torch.float64)
        out = out.index_add(0, self.class_rows, contrib)
        counts = torch.tensor(self.lab_sizes, dtype=torch.float64).unsqueeze(1)
        return out / counts

    def probabilities(self, propagated: torch.Tensor, concepts: torch.Tensor) -> torch.Tensor:
        dists = torch.cdist(propagated, concepts)
        return torch.softmax(-self.config.sharpness * dists, dim=1)

    def loss_terms(self, params: dict[str, torch.Tensor], neigh,
                   dropout_mask: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        cfg = self.config
        et = self.propagated(params)
        if dropout_mask is not None:
            et = et * dropout_mask
        concepts = self.concepts(et, params, neigh)
        d = self.probabilities(et, concepts)

        n_labeled = self.lab_mask.sum()
        ce = -((torch.log(d + LOG_EPS) * self.target).sum()) / n_labeled
        td = torch.sparse.mm(self.operator_t, d)
        dirichlet = ((d * d).sum() - (d * td).sum()) / self.n
        align = (((d - self.target) * self.lab_mask) ** 2).sum() / n_labeled
        smooth = dirichlet + align

        unit = concepts / torch.clamp(concepts.norm(dim=1, keepdim=True), min=LOG_EPS)
        cos = unit @ unit.T
        dist2 = torch.cdist(concepts, concepts) ** 2
        off = ~torch.eye(len(self.classes), dtype=torch.bool)
        pairs = len(self.classes) * (len(self.classes) - 1)
        separate = (cos[off].sum() + torch.relu(cfg.theta - dist2[off]).sum()) / pairs

        total = ce + cfg.alpha * smooth + cfg.beta * separate
        return {"total": total, "ce": ce, "smooth": smooth, "separate": separate}

    def inference_concepts(self, params: dict[str, torch.Tensor],
                           first_seed_epoch: int,
                           samples: int = INFERENCE_CONCEPT_SAMPLES) -> torch.Tensor:
        """Low-variance served concepts: mean over independent draws."""
        with torch.no_grad():
            et = self.propagated(params)
            acc = torch.zeros(len(self.classes), self.f, dtype=torch.float64)
            for rep in range(samples):
                neigh = self.sample_epoch((self.config.seed, first_seed_epoch + rep))
                acc += self.concepts(et, params, neigh)
            return acc / samples


def _params_to_torch(params: AltParameters, requires_grad: bool) -> dict[str, torch.Tensor]:
    return {name: torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64)).clone()
            .requires_grad_(requires_grad)
            for name, arr in params.arrays().items()}


def _params_from_torch(tensors: dict[str, torch.Tensor]) -> AltParameters:
    arrs = {name: t.detach().numpy().copy() for name, t in tensors.items()}
    return AltParameters(**arrs)


def train(graph: TextAttributedGraph, embeddings: np.ndarray, config: AltConfig
          ) -> tuple[AltParameters, np.ndarray, list[dict]]:
    """Full-batch Adam over propagation weights and the attention map.

    Concepts are recomputed from a fresh neighborhood draw every epoch and
    differentiated through; dropout on the propagated embeddings is active
    only during training. Returns converged parameters, the served concept
    matrix, and a per-epoch loss log. Deterministic given config.seed.
    """
    problem = TrainingProblem(graph, embeddings, config)
    params = AltParameters.init(config.k, problem.f, config.seed)
    tensors = _params_to_torch(params, requires_grad=True)
    optimizer = torch.optim.Adam(tensors.values(), lr=config.learning_rate)
    drop_gen = torch.Generator().manual_seed(config.seed)

    history: list[dict] = []
    for epoch in range(config.epochs):
        neigh = problem.sample_epoch((config.seed, epoch))
        dropout = None
        if config.dropout_rate > 0:
            keep = (torch.rand(problem.n, problem.f, generator=drop_gen,
                               dtype=torch.float64) >= config.dropout_rate)
            dropout = keep.to(torch.float64) / (1.0 - config.dropout_rate)
        terms = problem.loss_terms(tensors, neigh, dropout)
        for name in ("ce", "smooth", "separate", "total"):
            if not torch.isfinite(terms[name]):
                raise NumericError(
                    f"loss component {name!r} became non-finite at epoch {epoch}")
        optimizer.zero_grad()
        terms["total"].backward()
        optimizer.step()
        history.append({"epoch": epoch,
                        **{k: float(v.detach()) for k, v in terms.items()}})

    concepts = problem.inference_concepts(tensors, first_seed_epoch=config.epochs).numpy()
    return _params_from_torch(tensors), concepts, history


def served_propagated(graph: TextAttributedGraph, embeddings: np.ndarray,
                      params: AltParameters, config: AltConfig) -> np.ndarray:
    """Inference-time propagated embeddings (dropout off)."""
    operator = build_operator(graph, config.r)
    return propagate(embeddings.astype(np.float64), operator, params,
                     config.kappa, config.k)


# ---------------------------------------------------------------------------
# Serialization


def _write_array(fh, arr: np.ndarray) -> None:
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<Q", arr32.ndim))
    for dim in arr32.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(arr32.tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<Q", fh.read(8))
    shape = struct.unpack("<" + "Q" * ndim, fh.read(8 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float64)


def save_model(path, config: AltConfig, params: AltParameters, concepts: np.ndarray) -> None:
    """Single-file model: magic, config echo, parameter arrays, concepts."""
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in (params.w, params.w1, params.b1, params.w2, params.b2, concepts):
            _write_array(fh, arr)


def load_model(path) -> tuple[AltConfig, AltParameters, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != MODEL_MAGIC:
            raise ValueError(f"{path} is not a serialized model (bad magic)")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        config = AltConfig(**json.loads(fh.read(blob_len).decode("utf-8")))
        w, w1, b1, w2, b2, concepts = (_read_array(fh) for _ in range(6))
    return config, AltParameters(w=w, w1=w1, b1=b1, w2=w2, b2=b2), concepts
