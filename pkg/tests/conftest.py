import csv

import numpy as np
import pytest
import scipy.sparse as sp

from oga.graph import TextAttributedGraph


def write_graph_csvs(tmp_path, rows, edges):
    """rows: (node_id, label, text); edges: (src, dst)."""
    nodes_path = tmp_path / "nodes.csv"
    edges_path = tmp_path / "edges.csv"
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "label", "text"])
        writer.writerows(rows)
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst"])
        writer.writerows(edges)
    return nodes_path, edges_path


def make_graph(n, edges, labels=None, texts=None, class_names=None):
    labels = labels if labels is not None else [None] * n
    texts = texts if texts is not None else [f"text {i}" for i in range(n)]
    if class_names is None:
        class_names = sorted({f"c{y}" for y in labels if y is not None})
        labels = [None if y is None else sorted({v for v in labels if v is not None}).index(y)
                  for y in labels]
    return TextAttributedGraph(
        node_ids=list(range(n)), texts=texts, labels=labels,
        class_names=class_names, edges=[(min(u, v), max(u, v)) for u, v in edges])


@pytest.fixture
def path_graph():
    """0 - 1 - 2."""
    return make_graph(3, [(0, 1), (1, 2)])


def random_graph(rng, n, p=0.4, ensure_edge=True):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    if ensure_edge and not edges:
        edges = [(0, 1)]
    return make_graph(n, edges)


def adjacency_from_edges(n, edges):
    if not edges:
        return sp.csr_matrix((n, n))
    a = sp.coo_matrix((np.ones(len(edges)), tuple(zip(*edges))), shape=(n, n))
    return (a + a.T).tocsr()
