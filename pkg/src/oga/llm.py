"""Single choke point for LLM interactions.

Every annotation, distillation, and fusion request is rendered here,
dispatched to either a deterministic mock or an HTTP chat-completion
backend, parsed, cached, and counted. Nothing else in the package talks
to a language model.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from collections import Counter as TokenCounter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .stopwords import STOPWORDS


class PromptError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, raw_response: str):
        super().__init__(f"{message}; raw response: {raw_response!r}")
        self.raw_response = raw_response


class TransportError(RuntimeError):
    pass


# Output-format instructions, one per request kind. The fusion line is the
# canonical "merged labels" phrasing; distillation and annotation use the
# consolidation and generation phrasings respectively.
FUSE_FORMAT = (
    "The output should be a comma-separated list of merged labels, each enclosed "
    "in parentheses, in the same order as the input community-level labels. "
    "Example: (label1), (label2), (label3).")
DISTILL_FORMAT = (
    "Return a comma-separated list of the merged labels, with each label enclosed "
    "in parentheses, following the original order of the input. "
    "Example: (label1), (label2), (label3).")
ANNOTATE_FORMAT = (
    "Return a comma-separated list of the final labels, with each label enclosed "
    "in parentheses, following the original community order. "
    "Example: (label1), (label2), (label3).")


@dataclass(frozen=True)
class LlmRequest:
    """A typed request; kind is one of annotate / distill / fuse."""

    kind: str
    node_text: str = ""
    neighbor_texts: tuple[str, ...] = ()
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("annotate", "distill", "fuse"):
            raise PromptError(f"unknown request kind {self.kind!r}")


def render_prompt(request: LlmRequest) -> str:
    """Deterministic template fill for a request.

    Annotation prompts embed the node text and every provided neighbor
    text verbatim; distillation and fusion prompts list their input labels.
    Each prompt ends with the output-format instruction for its kind.
    """
    if request.kind == "annotate":
        if not request.node_text:
            raise PromptError("annotate request has empty node text")
        lines = [
            "Task Description: Generate a concise, semantically precise label for the "
            "target graph node described below. Each label must consist of two or three "
            "words. Prioritize semantic relevance over breadth, and use the structural "
            "context (neighboring node descriptions) to guide label generation.",
            "",
            f"Target node description: ({request.node_text})",
        ]
        if request.neighbor_texts:
            lines.append("Neighboring node descriptions:")
            lines.extend(f"- ({t})" for t in request.neighbor_texts)
        lines += ["", "Output Format: " + ANNOTATE_FORMAT]
        return "\n".join(lines)

    if request.kind == "distill":
        if not request.labels:
            raise PromptError("distill request has no input labels")
        lines = [
            "Task Description: You are tasked with merging community-level labels based "
            "on their semantic similarity. Given a set of community labels, consolidate "
            "semantically similar labels into a unified, representative label, "
            "prioritizing semantic compactness.",
            "",
            "Input labels: " + ", ".join(f"({lab})" for lab in request.labels),
            "",
            "Output Format: " + DISTILL_FORMAT,
        ]
        return "\n".join(lines)

    # fuse
    if len(request.labels) < 2:
        raise PromptError("fuse request needs two labels")
    lines = [
        "Task Description: In this stage, you are tasked with merging labels for "
        "communities based on their semantic similarity. You will receive a set of "
        "community-level labels, and your job is to merge semantically similar labels "
        "into a single unified label, preserving semantic compactness.",
        "",
        "Input labels: " + ", ".join(f"({lab})" for lab in request.labels),
        "",
        "Output Format: " + FUSE_FORMAT,
    ]
    return "\n".join(lines)


_PAREN = re.compile(r"\(([^()]*)\)")


def parse_labels(response: str) -> list[str]:
    """Extract parenthesized labels in order; normalize to snake_case."""
    items = _PAREN.findall(response)
    labels = []
    for item in items:
        cleaned = re.sub(r"\s+", "_", item.strip().lower())
        if cleaned:
            labels.append(cleaned)
    if not labels:
        raise ParseError("no parenthesized labels found", response)
    return labels


# ---------------------------------------------------------------------------
# Backends


def _mock_annotate(node_text: str, neighbor_texts: tuple[str, ...]) -> str:
    """Top-2 frequent alphabetic tokens (len >= 4, stopwords removed) of the
    node text, ties broken by frequency then lexicographic order."""
    tokens = [t for t in re.findall(r"[a-zA-Z]+", node_text.lower())
              if len(t) >= 4 and t not in STOPWORDS]
    if not tokens:
        return "unlabeled_topic"
    counts = TokenCounter(tokens)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return "_".join(tok for tok, _ in ranked[:2])


def _mock_distill(labels: tuple[str, ...]) -> str:
    counts = TokenCounter(labels)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]


def _mock_fuse(labels: tuple[str, ...]) -> str:
    return sorted(labels, key=lambda lab: (len(lab), lab))[0]


def mock_response(request: LlmRequest) -> str:
    """Deterministic stand-in model; emits the parenthesized wire format."""
    if request.kind == "annotate":
        return f"({_mock_annotate(request.node_text, request.neighbor_texts)})"
    if request.kind == "distill":
        return f"({_mock_distill(request.labels)})"
    return f"({_mock_fuse(request.labels)})"


@dataclass
class BackendConfig:
    mode: str = "mock"
    endpoint: str = ""
    api_key: str = ""
    model: str = ""
    timeout: float = 30.0
    max_retries: int = 2
    cache_enabled: bool = True
    cache_dir: str = ""
    workers: int = 4

    @classmethod
    def from_env(cls, mode: str = "http", **overrides) -> "BackendConfig":
        cfg = cls(mode=mode,
                  endpoint=os.environ.get("OGA_LLM_ENDPOINT", ""),
                  api_key=os.environ.get("OGA_LLM_API_KEY", ""),
                  model=os.environ.get("OGA_LLM_MODEL", ""), **overrides)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in ("mock", "http"):
            raise ValueError(f"backend mode must be mock or http, got {self.mode!r}")
        if self.mode == "http":
            if not self.endpoint:
                raise ValueError("http backend requires an endpoint "
                                 "(config or OGA_LLM_ENDPOINT)")
            if not self.api_key:
                raise ValueError("http backend requires a credential "
                                 "(config or OGA_LLM_API_KEY)")


def _http_dispatch(prompt: str, config: BackendConfig) -> str:
    """Minimal chat-completion call.

    Request body: {"model": ..., "messages": [{"role": "user", "content": prompt}]}.
    Response text is read from choices[0].message.content.
    """
    import requests

    last_exc: Exception | None = None
    for _ in range(config.max_retries + 1):
        try:
            resp = requests.post(
                config.endpoint,
                json={"model": config.model,
                      "messages": [{"role": "user", "content": prompt}]},
                headers={"Authorization": f"Bearer {config.api_key}"},
                timeout=config.timeout)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except Exception as exc:  # noqa: BLE001 - every failure is retryable
            last_exc = exc
    raise TransportError(
        f"backend unreachable after {config.max_retries + 1} attempts: {last_exc}")


@dataclass
class CallCounter:
    """Per-kind dispatch counts; cache hits never increment."""

    annotate: int = 0
    distill: int = 0
    fuse: int = 0

    @property
    def total(self) -> int:
        return self.annotate + self.distill + self.fuse

    def as_dict(self) -> dict:
        return {"annotate": self.annotate, "distill": self.distill,
                "fuse": self.fuse, "total": self.total}


class LlmGateway:
    """Dispatches requests with caching, single-flight dedup, and counting.

    Concurrent identical requests coalesce into one backend call so the
    counter is independent of the worker count.
    """

    def __init__(self, config: BackendConfig):
        config.validate()
        self.config = config
        self.counter = CallCounter()
        self._memory_cache: dict[str, list[str]] = {}
        self._inflight: dict[str, threading.Event] = {}
        self._lock = threading.Lock()

    # -- cache helpers ------------------------------------------------

    @staticmethod
    def _key(kind: str, prompt: str) -> str:
        return hashlib.sha256(f"{kind}\x00{prompt}".encode("utf-8")).hexdigest()

    def _cache_path(self, key: str) -> Path | None:
        if not self.config.cache_dir:
            return None
        return Path(self.config.cache_dir) / f"{key}.json"

    def _cache_get(self, key: str) -> list[str] | None:
        if not self.config.cache_enabled:
            return None
        if key in self._memory_cache:
            return self._memory_cache[key]
        path = self._cache_path(key)
        if path is not None and path.exists():
            labels = json.loads(path.read_text(encoding="utf-8"))["labels"]
            self._memory_cache[key] = labels
            return labels
        return None

    def _cache_put(self, key: str, labels: list[str]) -> None:
        if not self.config.cache_enabled:
            return
        self._memory_cache[key] = labels
        path = self._cache_path(key)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"labels": labels}), encoding="utf-8")

    # -- dispatch -----------------------------------------------------

    def call(self, request: LlmRequest) -> list[str]:
        prompt = render_prompt(request)
        key = self._key(request.kind, prompt)
        while True:
            with self._lock:
                cached = self._cache_get(key)
                if cached is not None:
                    return cached
                waiter = self._inflight.get(key)
                if waiter is None:
                    self._inflight[key] = threading.Event()
                    break
            waiter.wait()
        try:
            if self.config.mode == "mock":
                raw = mock_response(request)
            else:
                raw = _http_dispatch(prompt, self.config)
            labels = parse_labels(raw)
            with self._lock:
                if request.kind == "annotate":
                    self.counter.annotate += 1
                elif request.kind == "distill":
                    self.counter.distill += 1
                else:
                    self.counter.fuse += 1
                self._cache_put(key, labels)
            return labels
        finally:
            with self._lock:
                self._inflight.pop(key).set()

    # -- convenience wrappers used by the annotator --------------------

    def annotate(self, node_text: str, neighbor_texts: list[str]) -> str:
        return self.call(LlmRequest("annotate", node_text=node_text,
                                    neighbor_texts=tuple(neighbor_texts)))[0]

    def distill(self, labels: list[str]) -> str:
        return self.call(LlmRequest("distill", labels=tuple(labels)))[0]

    def fuse(self, label_a: str, label_b: str) -> str:
        return self.call(LlmRequest("fuse", labels=(label_a, label_b)))[0]

    def annotate_many(self, items: list[tuple[int, str, list[str]]]) -> dict[int, str]:
        """Annotate (key, node_text, neighbor_texts) items with bounded
        concurrency; results keyed so completion order never matters."""
        results: dict[int, str] = {}
        workers = max(1, self.config.workers)
        if workers == 1 or len(items) <= 1:
            for key, text, ctx in items:
                results[key] = self.annotate(text, ctx)
            return results
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {key: pool.submit(self.annotate, text, ctx)
                       for key, text, ctx in items}
            for key, fut in futures.items():
                results[key] = fut.result()
        return results
