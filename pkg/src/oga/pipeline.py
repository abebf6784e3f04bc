"""End-to-end orchestration with a flat config file and file-based stages.

Every stage reads its inputs from the run directory and writes plain
files, so stages can be rerun and inspected independently. A fixed seed
plus the mock backend reproduces metrics.json byte for byte.
"""

from __future__ import annotations

import csv
import json
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .alt import (AltConfig, AltParameters, classify, load_model, reject,
                  save_model, served_propagated, train)
from .bench import (GroundTruth, SyntheticSpec, allocate_labels,
                    backbone_comparison, generate_synthetic,
                    metric_accuracy, metric_coverage_precision,
                    metric_label_quality)
from .embeddings import bind_to_graph, load_embeddings, mock_embed, save_embeddings
from .gla import (AnnotationLedger, CommunityPartition, GlaConfig,
                  annotate_partition, detect_rejected_communities)
from .graph import TextAttributedGraph, load_graph, save_graph
from .llm import BackendConfig, LlmGateway

STAGES = ("synth", "ingest", "alt-train", "alt-infer", "communities",
          "annotate", "evaluate")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BACKEND = 4
EXIT_NUMERIC = 5


class ConfigError(ValueError):
    pass


_COMMON_KEYS = {
    "mode": str, "output_dir": str, "seed": int,
    # propagation / rejection model
    "k": int, "kappa": float, "r": float, "lambda": float, "epsilon": float,
    "alpha": float, "beta": float, "theta": float, "hop_max": int,
    "sample_size": int, "epochs": int, "learning_rate": float, "dropout_rate": float,
    # annotator
    "gamma": float, "phi": int, "neighbor_context_cap": int,
    "fusion_target": str, "degree_split": str,
    # backend
    "llm_mode": str, "llm_endpoint": str, "llm_model": str, "llm_timeout": float,
    "llm_max_retries": int, "llm_cache": bool, "llm_cache_dir": str, "llm_workers": int,
}
_FILES_KEYS = {"nodes_path": str, "edges_path": str, "embeddings_path": str}
_SYNTH_KEYS = {
    "classes": int, "unknown_holdout": int, "nodes_per_class": int,
    "p_intra": float, "p_inter": float, "separation": float, "noise": float,
    "dim": int,
}

DEFAULT_CONFIG = """\
# default run configuration (paper-default hyperparameters)
mode = synth
output_dir = run
seed = 7

# propagation / rejection model
k = 5
kappa = 0.2
r = 0.5
lambda = 10.0
epsilon = 0.6
alpha = 0.4
beta = 0.6
theta = 0.8
hop_max = 5
sample_size = 16
epochs = 300
learning_rate = 0.01
dropout_rate = 0.1

# annotator
gamma = 0.6
phi = 3
neighbor_context_cap = 5
fusion_target =          # empty: number of known classes
degree_split = median

# LLM backend
llm_mode = mock
llm_endpoint =
llm_model =
llm_timeout = 30.0
llm_max_retries = 2
llm_cache = true
llm_cache_dir =          # empty: in-memory cache only
llm_workers = 4

# synthetic benchmark (synth mode)
classes = 6
unknown_holdout = 2
nodes_per_class = 60
p_intra = 0.1
p_inter = 0.01
separation = 4.0
noise = 0.5
dim = 128
"""


def _coerce(key: str, raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} has invalid value {raw!r}") from None


@dataclass
class PipelineConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["output_dir"])

    def alt_config(self) -> AltConfig:
        v = self.values
        return AltConfig(
            k=v["k"], kappa=v["kappa"], r=v["r"], sharpness=v["lambda"],
            epsilon=v["epsilon"], alpha=v["alpha"], beta=v["beta"], theta=v["theta"],
            hop_max=v["hop_max"], sample_size=v["sample_size"], epochs=v["epochs"],
            learning_rate=v["learning_rate"], dropout_rate=v["dropout_rate"],
            seed=v["seed"])

    def gla_config(self) -> GlaConfig:
        v = self.values
        target = v["fusion_target"]
        return GlaConfig(gamma=v["gamma"], phi=v["phi"],
                         neighbor_context_cap=v["neighbor_context_cap"],
                         fusion_target=int(target) if target else None,
                         degree_split=v["degree_split"], seed=v["seed"])

    def backend_config(self) -> BackendConfig:
        import os
        v = self.values
        cfg = BackendConfig(
            mode=v["llm_mode"],
            endpoint=v["llm_endpoint"] or os.environ.get("OGA_LLM_ENDPOINT", ""),
            api_key=os.environ.get("OGA_LLM_API_KEY", ""),
            model=v["llm_model"] or os.environ.get("OGA_LLM_MODEL", ""),
            timeout=v["llm_timeout"], max_retries=v["llm_max_retries"],
            cache_enabled=v["llm_cache"], cache_dir=v["llm_cache_dir"],
            workers=v["llm_workers"])
        cfg.validate()
        return cfg

    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values
        return SyntheticSpec(
            classes=v["classes"], unknown_holdout=v["unknown_holdout"],
            nodes_per_class=v["nodes_per_class"], p_intra=v["p_intra"],
            p_inter=v["p_inter"], separation=v["separation"], noise=v["noise"],
            dim=v["dim"], seed=v["seed"])


def parse_config_text(text: str) -> dict:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"duplicate config key {key!r}")
        raw[key] = value.strip()
    return raw


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Parse and validate a flat key = value config file.

    Every relevant key must be present (no silent defaults); unknown keys
    are rejected. `overrides` (e.g. from CLI flags) replace file values.
    """
    raw = parse_config_text(Path(path).read_text(encoding="utf-8"))
    if "mode" not in raw:
        raise ConfigError("missing config key 'mode'")
    mode = raw["mode"]
    if mode not in ("synth", "files"):
        raise ConfigError(f"mode must be synth or files, got {mode!r}")
    schema = dict(_COMMON_KEYS)
    schema.update(_SYNTH_KEYS if mode == "synth" else _FILES_KEYS)
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = set(schema) - set(raw)
    if missing:
        raise ConfigError(f"missing config key {sorted(missing)[0]!r}"
                          + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    values = {key: _coerce(key, raw[key], kind) if key != "mode" else raw[key]
              for key, kind in schema.items()}
    if overrides:
        values.update(overrides)
    if values["llm_mode"] == "http":
        # fail fast before any compute
        PipelineConfig(values).backend_config()
    return PipelineConfig(values)


# ---------------------------------------------------------------------------
# Artifact IO helpers


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _load_truth(out_dir: Path) -> GroundTruth | None:
    path = out_dir / "truth.json"
    if not path.exists():
        return None
    blob = json.loads(path.read_text(encoding="utf-8"))
    return GroundTruth(
        true_labels=np.array(blob["true_labels"], dtype=np.int64),
        known_classes=blob["known_classes"],
        train_mask=np.array(blob["train_mask"], dtype=bool),
        val_mask=np.array(blob["val_mask"], dtype=bool),
        test_mask=np.array(blob["test_mask"], dtype=bool),
        ideal_labels=blob["ideal_labels"])


def _load_inputs(config: PipelineConfig) -> tuple[TextAttributedGraph, np.ndarray]:
    out = config.out_dir
    if config["mode"] == "synth":
        graph = load_graph(out / "nodes.csv", out / "edges.csv")
        embeddings = load_embeddings(out / "embeddings.bin").astype(np.float64)
    else:
        graph = load_graph(config["nodes_path"], config["edges_path"])
        if config["embeddings_path"]:
            embeddings = load_embeddings(config["embeddings_path"]).astype(np.float64)
        else:
            embeddings = mock_embed(graph.texts, f=128, seed=config["seed"])
    bind_to_graph(embeddings, graph.node_count)
    return graph, embeddings


def _load_rejection(out_dir: Path, graph: TextAttributedGraph):
    preds = np.full(graph.node_count, -1, dtype=np.int64)
    conf = np.zeros(graph.node_count)
    ent = np.zeros(graph.node_count)
    name_to_id = {name: i for i, name in enumerate(graph.class_names)}
    with open(out_dir / "rejection.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pos = graph.position(int(row["node_id"]))
            preds[pos] = -1 if row["prediction"] == "UNKNOWN" else name_to_id[row["prediction"]]
            conf[pos] = float(row["confidence"])
            ent[pos] = float(row["entropy"])
    return preds, conf, ent


def _rejected_positions(graph: TextAttributedGraph, preds: np.ndarray) -> np.ndarray:
    unlabeled = np.array([y is None for y in graph.labels])
    return np.where(unlabeled & (preds == -1))[0]


# ---------------------------------------------------------------------------
# Stages


def stage_synth(config: PipelineConfig) -> None:
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    graph, embeddings, truth = generate_synthetic(config.synthetic_spec())
    save_graph(graph, out / "nodes.csv", out / "edges.csv")
    save_embeddings(embeddings.astype(np.float32), out / "embeddings.bin")
    _write_json(out / "truth.json", {
        "true_labels": truth.true_labels.tolist(),
        "known_classes": truth.known_classes,
        "train_mask": truth.train_mask.tolist(),
        "val_mask": truth.val_mask.tolist(),
        "test_mask": truth.test_mask.tolist(),
        "ideal_labels": truth.ideal_labels,
    })


def stage_ingest(config: PipelineConfig) -> None:
    graph, embeddings = _load_inputs(config)
    if not graph.known_classes:
        raise ConfigError("the labeled set is empty; nothing to train on")


def stage_alt_train(config: PipelineConfig) -> None:
    graph, embeddings = _load_inputs(config)
    alt_config = config.alt_config()
    params, concepts, history = train(graph, embeddings, alt_config)
    save_model(config.out_dir / "alt_model.bin", alt_config, params, concepts)
    if history:
        first, last = history[0]["total"], history[-1]["total"]
        print(f"alt-train: loss {first:.4f} -> {last:.4f} over {len(history)} epochs")


def stage_alt_infer(config: PipelineConfig) -> None:
    graph, embeddings = _load_inputs(config)
    model_config, params, concepts = load_model(config.out_dir / "alt_model.bin")
    propagated = served_propagated(graph, embeddings, params, model_config)
    probabilities = classify(propagated, concepts, model_config.sharpness)
    outcome = reject(probabilities, model_config.epsilon, model_config.sharpness)
    with open(config.out_dir / "rejection.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "prediction", "confidence", "entropy"])
        for pos, nid in enumerate(graph.node_ids):
            pred = outcome.predictions[pos]
            name = "UNKNOWN" if pred == -1 else graph.class_names[pred]
            writer.writerow([nid, name, repr(float(outcome.confidence[pos])),
                             repr(float(outcome.entropy[pos]))])


def stage_communities(config: PipelineConfig) -> None:
    graph, embeddings = _load_inputs(config)
    preds, _, _ = _load_rejection(config.out_dir, graph)
    rejected = _rejected_positions(graph, preds)
    if len(rejected) == 0:
        raise ValueError("no rejected unlabeled nodes; nothing to annotate")
    partition = detect_rejected_communities(
        graph.adjacency(), embeddings, rejected, config.gla_config())
    _write_json(config.out_dir / "communities.json", {
        "gamma": partition.gamma,
        "Q": partition.q,
        "assignment": [[graph.node_ids[pos], cid]
                       for pos, cid in sorted(partition.assignment.items())],
    })


def stage_annotate(config: PipelineConfig) -> None:
    graph, embeddings = _load_inputs(config)
    blob = json.loads((config.out_dir / "communities.json").read_text(encoding="utf-8"))
    partition = CommunityPartition(
        {graph.position(nid): cid for nid, cid in blob["assignment"]},
        blob["gamma"], blob["Q"])
    gla_config = config.gla_config()
    fusion_target = gla_config.fusion_target or len(graph.known_classes)
    gateway = LlmGateway(config.backend_config())
    ledger = annotate_partition(graph.adjacency(), graph.texts, embeddings,
                                partition, gateway, gla_config, fusion_target)
    payload = ledger.to_json_dict()
    payload["nodes"] = [{**rec, "id": graph.node_ids[rec["id"]]} for rec in payload["nodes"]]
    _write_json(config.out_dir / "ledger.json", payload)
    _write_json(config.out_dir / "llm_calls.json", {
        **gateway.counter.as_dict(),
        "low_seeds": ledger.low_seed_count,
        "fallbacks": ledger.fallback_calls,
    })
    # final labels keyed by node id, for the evaluation stage
    _write_json(config.out_dir / "final_labels.json",
                {str(graph.node_ids[pos]): label
                 for pos, label in sorted(ledger.final_labels.items())})


def stage_evaluate(config: PipelineConfig) -> None:
    from .alt import RejectionOutcome

    graph, embeddings = _load_inputs(config)
    out = config.out_dir
    truth = _load_truth(out)
    preds, conf, ent = _load_rejection(out, graph)
    final_labels = {graph.position(int(nid)): label
                    for nid, label in json.loads(
                        (out / "final_labels.json").read_text(encoding="utf-8")).items()}
    calls = json.loads((out / "llm_calls.json").read_text(encoding="utf-8"))

    rejected = _rejected_positions(graph, preds)
    augmented, label_index = allocate_labels(graph, final_labels, require=rejected)
    with open(out / "augmented_labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "label_id", "label"])
        inverse = {v: k for k, v in label_index.items()}
        for pos, nid in enumerate(graph.node_ids):
            lid = int(augmented[pos])
            if lid < 0:
                continue
            name = graph.class_names[lid] if lid < len(graph.class_names) else inverse[lid]
            writer.writerow([nid, lid, name])

    outcome = RejectionOutcome(preds, conf, ent, config["epsilon"])
    accuracy = coverage = precision = None
    backbone = {"lower": None, "ours": None, "upper": None}
    g_to_u_ideals = None
    if truth is not None:
        unlabeled = np.array([y is None for y in graph.labels])
        known_unlabeled = unlabeled & ~truth.unknown_mask
        accuracy = metric_accuracy(outcome, truth.true_labels, known_unlabeled)
        cp = metric_coverage_precision(outcome, truth.unknown_mask, unlabeled)
        coverage, precision = cp.coverage, cp.precision
        report = backbone_comparison(graph, embeddings, truth, augmented,
                                     label_index, seed=config["seed"])
        backbone = {"lower": report.lower, "ours": report.ours, "upper": report.upper}
        g_to_u_ideals = truth.ideal_labels[truth.known_classes:]

    generated = sorted(set(final_labels.values()))
    quality = metric_label_quality(graph.class_names, generated, g_to_u_ideals)

    pure = graph.node_count
    actual = calls["total"]
    metrics = {
        "accuracy": accuracy,
        "coverage": coverage,
        "precision": precision,
        "quality": {"k_to_k": quality.k_to_k, "k_to_g": quality.k_to_g,
                    "g_to_u": quality.g_to_u},
        "backbone": backbone,
        "llm_calls": {"pure": pure, "actual": actual,
                      "reduction": 1.0 - actual / pure},
    }
    _write_json(out / "metrics.json", metrics)


_STAGE_FUNCS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "alt-train": stage_alt_train,
    "alt-infer": stage_alt_infer,
    "communities": stage_communities,
    "annotate": stage_annotate,
    "evaluate": stage_evaluate,
}


def run_stage(name: str, config: PipelineConfig) -> None:
    _STAGE_FUNCS[name](config)


def cmd_pipeline(config: PipelineConfig) -> None:
    """Run every stage in order and write the run manifest.

    A stage failure propagates (the CLI converts it to a nonzero exit with
    the stage name); artifacts from completed stages stay on disk.
    """
    stages = list(STAGES) if config["mode"] == "synth" else list(STAGES[1:])
    config.out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    for name in stages:
        started = time.perf_counter()
        try:
            run_stage(name, config)
        except Exception as exc:
            raise StageFailure(name, exc) from exc
        timings[name] = time.perf_counter() - started
    import scipy
    import torch
    manifest = {
        "config": config.values,
        "seed": config["seed"],
        "versions": {
            "oga": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
        },
        "timings_seconds": timings,
    }
    _write_json(config.out_dir / "run_manifest.json", manifest)


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def cmd_report(run_dir, as_json: bool = False) -> str:
    """Human-readable (or raw JSON) summary of a finished run."""
    path = Path(run_dir) / "metrics.json"
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    text = path.read_text(encoding="utf-8")
    if as_json:
        return text.rstrip("\n")
    m = json.loads(text)

    def fmt(x, pct=False):
        if x is None:
            return "n/a"
        return f"{100 * x:.1f}%" if pct else f"{x:.4f}"

    lines = [
        "Aspect 1  accuracy             " + fmt(m["accuracy"]),
        "Aspect 2  coverage / precision " + fmt(m["coverage"]) + " / " + fmt(m["precision"]),
        "Aspect 3  k-to-k / k-to-g / g-to-u "
        + " / ".join(fmt(m["quality"][k]) for k in ("k_to_k", "k_to_g", "g_to_u")),
        "Aspect 4  lower / ours / upper "
        + " / ".join(fmt(m["backbone"][k]) for k in ("lower", "ours", "upper")),
        f"LLM calls pure={m['llm_calls']['pure']} actual={m['llm_calls']['actual']} "
        f"reduction={fmt(m['llm_calls']['reduction'], pct=True)}",
    ]
    return "\n".join(lines)
