import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oga.embeddings import (EmbeddingFormatError, bind_to_graph, cosine,
                            load_embeddings, mock_embed, save_embeddings)


class TestBinaryFormat:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((7, 5)).astype(np.float32)
        path = tmp_path / "emb.bin"
        save_embeddings(m, path)
        loaded = load_embeddings(path)
        assert loaded.dtype == np.float32
        assert loaded.tobytes() == m.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "emb.bin"
        save_embeddings(np.zeros((2, 2), dtype=np.float32), path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(EmbeddingFormatError, match="magic"):
            load_embeddings(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "emb.bin"
        save_embeddings(np.zeros((3, 4), dtype=np.float32), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(EmbeddingFormatError, match="bytes"):
            load_embeddings(path)

    def test_binding_mismatch_names_both_counts(self):
        with pytest.raises(EmbeddingFormatError, match="5.*3|3.*5"):
            bind_to_graph(np.zeros((5, 2)), 3)


class TestMockEmbed:
    def test_identical_texts_identical_rows(self):
        m = mock_embed(["same text", "other", "same text"], f=16, seed=1)
        assert np.array_equal(m[0], m[2])
        assert not np.array_equal(m[0], m[1])

    def test_unit_norms(self):
        m = mock_embed([f"t{i}" for i in range(50)], f=32, seed=0)
        assert np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-9)

    def test_distinct_texts_near_orthogonal(self):
        # empirical threshold for the hashing scheme at f=128, fixed once:
        # random unit pairs have E|cos| ~ sqrt(2/(pi*128)) ~ 0.07
        texts = [f"document number {i}" for i in range(2000)]
        m = mock_embed(texts, f=128, seed=0)
        rng = np.random.default_rng(0)
        idx = rng.integers(0, 2000, size=(1000, 2))
        idx = idx[idx[:, 0] != idx[:, 1]]
        cos = np.abs(np.einsum("ij,ij->i", m[idx[:, 0]], m[idx[:, 1]]))
        assert cos.mean() < 0.2

    def test_pure_function_across_processes(self):
        script = ("import numpy as np; from oga.embeddings import mock_embed; "
                  "import sys; sys.stdout.buffer.write(mock_embed(['alpha','beta'], 16, 3).tobytes())")
        runs = [subprocess.run([sys.executable, "-c", script], capture_output=True,
                               check=True).stdout for _ in range(2)]
        assert runs[0] == runs[1]
        assert runs[0] == mock_embed(["alpha", "beta"], 16, 3).tobytes()

    def test_dim_too_small_rejected(self):
        with pytest.raises(ValueError):
            mock_embed(["x"], f=1, seed=0)


class TestCosine:
    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_identical_nonzero(self):
        v = np.array([0.3, -0.4, 1.2])
        assert cosine(v, v) == pytest.approx(1.0)

    def test_zero_vector_rule(self):
        assert cosine(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            cosine(np.zeros(2), np.zeros(3))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8),
           st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8))
    def test_symmetric_and_bounded(self, xs, ys):
        k = min(len(xs), len(ys))
        u, v = np.array(xs[:k]), np.array(ys[:k])
        c = cosine(u, v)
        assert -1.0 <= c <= 1.0
        assert c == pytest.approx(cosine(v, u), abs=1e-12)
