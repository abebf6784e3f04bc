"""Node and label-text embedding providers.

Embeddings either come from a binary file written by an external encoder
or from a deterministic hash-based mock used in tests and synthetic runs.
"""

from __future__ import annotations

import csv
import hashlib
import struct

import numpy as np

MAGIC = b"OGAEMB1\x00"


class EmbeddingFormatError(ValueError):
    """Raised for malformed embedding files or inconsistent bindings."""


def save_embeddings(values: np.ndarray, path) -> None:
    """Write an n×f float32 matrix in the binary embedding format.

    Layout: 8-byte magic, little-endian u64 n and f, then n·f little-endian
    float32 values row-major.
    """
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise EmbeddingFormatError(f"expected a 2-d matrix, got shape {values.shape}")
    n, f = values.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", n, f))
        fh.write(values.tobytes())


def load_embeddings(path) -> np.ndarray:
    """Load a matrix written by save_embeddings, bit-faithfully."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise EmbeddingFormatError(f"bad magic in {path}: {blob[:8]!r}")
    if len(blob) < 24:
        raise EmbeddingFormatError(f"truncated header in {path}")
    n, f = struct.unpack("<QQ", blob[8:24])
    expected = 24 + n * f * 4
    if len(blob) != expected:
        raise EmbeddingFormatError(
            f"declared {n}x{f} matrix needs {expected} bytes, file has {len(blob)}")
    return np.frombuffer(blob[24:], dtype="<f4").reshape(n, f).copy()


def load_embeddings_csv(path) -> np.ndarray:
    """Debug import: rows ``node_id,v0,...,v{f-1}`` ordered by appearance."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "node_id":
            raise EmbeddingFormatError("embedding CSV must start with a node_id column")
        for row in reader:
            rows.append([float(x) for x in row[1:]])
    return np.asarray(rows, dtype=np.float64)


def bind_to_graph(values: np.ndarray, node_count: int) -> None:
    if values.shape[0] != node_count:
        raise EmbeddingFormatError(
            f"embedding row count {values.shape[0]} does not match graph node count {node_count}")


def mock_embed(texts: list[str], f: int = 128, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm embedding of each text.

    A pure function of (text, f, seed): the text is hashed together with f
    and the seed, the digest seeds a PRNG, and a standard-normal draw is
    normalized. Identical texts map to identical rows; distinct texts are
    near-orthogonal at moderate f.
    """
    if f < 2:
        raise ValueError(f"embedding dim must be >= 2, got {f}")
    out = np.empty((len(texts), f), dtype=np.float64)
    for i, text in enumerate(texts):
        digest = hashlib.sha256(f"{seed}|{f}|{text}".encode("utf-8")).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        vec = rng.standard_normal(f)
        out[i] = vec / np.linalg.norm(vec)
    return out


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero-norm inputs map to 0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(values: np.ndarray) -> np.ndarray:
    """All-pairs cosine; zero-norm rows yield 0 similarity everywhere."""
    norms = np.linalg.norm(values, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = values / safe[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    zero = norms == 0.0
    sims[zero, :] = 0.0
    sims[:, zero] = 0.0
    return sims
