"""Shared helpers: tiny graph builders and a dense mirror of the
normalized adjacency, used as an independent oracle for the sparse
aggregation paths."""
import numpy as np

from lmcgnn.graph import NormalizedAdjacency, build_graph


def path_edges(n):
    return [(i, i + 1) for i in range(n - 1)]


def clique_edges(n, offset=0):
    return [(offset + u, offset + v) for u in range(n) for v in range(u + 1, n)]


def path_graph(n):
    return build_graph(n, path_edges(n))


def dense_adj(adj: NormalizedAdjacency) -> np.ndarray:
    """Dense n x n matrix with the same entries as the CSR + diagonal."""
    n = adj.n
    out = np.zeros((n, n))
    for i in range(n):
        out[i, i] = adj.diag[i]
        lo, hi = adj.indptr[i], adj.indptr[i + 1]
        for j, w in zip(adj.indices[lo:hi], adj.weights[lo:hi]):
            out[i, j] = w
    return out


def random_graph(rng, n, p_edge):
    """Connected random graph: spanning path plus Bernoulli extras."""
    edges = set(path_edges(n))
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < p_edge:
                edges.add((u, v))
    return build_graph(n, sorted(edges))
