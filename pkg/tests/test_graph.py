import math

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import star_graph
from langgsl.graph import (KNNGraph, build_knn_graph, cosine_matrix, cosine_similarity,
                           dump_adjacency, fuse_graphs, load_adjacency, normalize_adjacency)


def brute_force_knn(H, k, threshold=0.0):
    """O(n^2) reference: per-node top-k by (-similarity, index), union of directions."""
    n = len(H)
    norms = [math.sqrt(sum(x * x for x in row)) for row in H]

    def cos(i, j):
        if norms[i] == 0 or norms[j] == 0:
            return 0.0
        return sum(a * b for a, b in zip(H[i], H[j])) / (norms[i] * norms[j])

    edges = {}
    for i in range(n):
        cands = sorted((-cos(i, j), j) for j in range(n) if j != i)[:k]
        for neg, j in cands:
            s = -neg
            if s >= threshold and s > 0:
                edges[(min(i, j), max(i, j))] = min(cos(i, j), 1.0)
    return edges


def as_edges(A):
    u = sp.triu(A, k=1).tocoo()
    return {(int(i), int(j)): float(w) for i, j, w in zip(u.row, u.col, u.data)}


def dense_normalize(A):
    n = len(A)
    B = [[A[i][j] + (1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
    d = [sum(row) for row in B]
    return np.array([[B[i][j] / math.sqrt(d[i] * d[j]) for j in range(n)] for i in range(n)])


# --- cosine -------------------------------------------------------------------

def test_cosine_examples():
    assert cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2, 2], [2, 1, 2]) == pytest.approx(8 / 9, abs=1e-15)


def test_cosine_zero_vector_and_mismatch():
    assert cosine_similarity([0, 0], [1, 2]) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity([1, 2], [1, 2, 3])


def test_cosine_matrix_symmetric_unit_diagonal(rng):
    S = cosine_matrix(rng.normal(size=(8, 3)))
    np.testing.assert_array_equal(S, S.T)
    np.testing.assert_allclose(np.diag(S), 1.0, atol=1e-12)


# --- kNN ----------------------------------------------------------------------

def test_knn_complete_graph_for_positive_embeddings(rng):
    H = rng.uniform(0.1, 1.0, size=(7, 4))
    A = build_knn_graph(H, k=6, threshold=-1.0)
    assert sp.triu(A, k=1).nnz == 21


def test_knn_threshold_above_one_is_empty(rng):
    A = build_knn_graph(rng.normal(size=(10, 3)), k=3, threshold=1 + 1e-9)
    assert A.nnz == 0


def test_knn_matches_brute_force_small(rng):
    H = rng.normal(size=(50, 6))
    A = build_knn_graph(H, 5)
    ref = brute_force_knn(H.tolist(), 5)
    got = as_edges(A)
    assert set(got) == set(ref)
    for e in ref:
        assert got[e] == pytest.approx(ref[e], abs=1e-12)


def test_knn_is_symmetric_without_self_loops(rng):
    A = build_knn_graph(rng.normal(size=(30, 4)), 4)
    assert (A != A.T).nnz == 0
    assert not A.diagonal().any()
    assert A.data.min() > 0 and A.data.max() <= 1


def test_knn_ties_go_to_lower_index():
    # node 0 is equally similar to 1 and 2, which prefer each other
    H = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 1.0], [-1.0, 0.0]])
    A = build_knn_graph(H, 1, threshold=-1.0)
    assert as_edges(A).keys() == {(0, 1), (1, 2)}


def test_knn_block_size_does_not_change_result(rng):
    H = rng.normal(size=(40, 5))
    a = build_knn_graph(H, 6, block_size=7)
    b = build_knn_graph(H, 6, block_size=1024)
    assert (a != b).nnz == 0


def test_knn_rejects_bad_k(rng):
    H = rng.normal(size=(5, 2))
    with pytest.raises(ValueError):
        build_knn_graph(H, 5)
    with pytest.raises(ValueError):
        build_knn_graph(H, 0)


def test_knn_transformer(rng):
    H = rng.normal(size=(12, 3))
    A = KNNGraph(k=3).fit_transform(H)
    assert (A != build_knn_graph(H, 3)).nnz == 0


# --- fusion -------------------------------------------------------------------

def test_fuse_extremes(rng):
    A = sp.random(6, 6, density=0.3, random_state=1)
    A = sp.csr_matrix(A + A.T)
    B = sp.csr_matrix(np.ones((6, 6)) - np.eye(6))
    assert abs(fuse_graphs(A, B, 1.0) - A).max() == 0
    assert abs(fuse_graphs(A, B, 0.0) - B).max() == 0


def test_fuse_half_on_disjoint_edges():
    A = np.zeros((4, 4))
    B = np.zeros((4, 4))
    A[0, 1] = A[1, 0] = 1
    B[2, 3] = B[3, 2] = 1
    F = fuse_graphs(A, B, 0.5)
    assert F[0, 1] == 0.5 and F[2, 3] == 0.5 and F.sum() == 2.0


def test_fuse_is_affine(rng):
    A, B = rng.random((5, 5)), rng.random((5, 5))
    for lam in (0.1, 0.37, 0.5):
        np.testing.assert_allclose(fuse_graphs(A, B, lam) + fuse_graphs(A, B, 1 - lam), A + B,
                                   atol=1e-12)


def test_fuse_validates():
    with pytest.raises(ValueError):
        fuse_graphs(np.zeros((2, 2)), np.zeros((3, 3)), 0.5)
    with pytest.raises(ValueError):
        fuse_graphs(np.zeros((2, 2)), np.zeros((2, 2)), 1.5)


# --- normalization ------------------------------------------------------------

def test_normalize_isolated_nodes_gives_identity():
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((2, 2))), np.eye(2))


def test_normalize_single_edge():
    A_hat = normalize_adjacency(sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]])))
    np.testing.assert_allclose(A_hat.toarray(), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_normalize_matches_dense_oracle(rng):
    for n in (1, 3, 10, 50):
        A = (rng.random((n, n)) < 0.2).astype(float)
        A = np.triu(A, 1)
        A = A + A.T
        ref = dense_normalize(A.tolist())
        np.testing.assert_allclose(normalize_adjacency(A), ref, atol=1e-14)
        np.testing.assert_allclose(normalize_adjacency(sp.csr_matrix(A)).toarray(), ref, atol=1e-14)


def test_normalized_row_sums_on_regular_graph_are_one():
    n = 8
    A = np.zeros((n, n))
    for i in range(n):
        A[i, (i + 1) % n] = A[(i + 1) % n, i] = 1
    np.testing.assert_allclose(normalize_adjacency(A).sum(axis=1), 1.0, atol=1e-14)


def test_normalized_row_sums_can_exceed_one_at_hubs():
    # a hub with low-degree neighbors: 1/5 + 4/sqrt(10) > 1
    sums = normalize_adjacency(star_graph(5).toarray()).sum(axis=1)
    assert sums[0] == pytest.approx(0.2 + 4 / math.sqrt(10))
    assert sums[0] > 1


def test_normalized_spectral_radius_at_most_one(rng):
    for _ in range(10):
        n = int(rng.integers(2, 30))
        A = np.triu((rng.random((n, n)) < 0.3).astype(float), 1)
        A_hat = normalize_adjacency(A + A.T)
        assert np.abs(np.linalg.eigvalsh(A_hat)).max() <= 1 + 1e-12


# --- dumps --------------------------------------------------------------------

def test_adjacency_dump_roundtrip(tmp_path, rng):
    A = build_knn_graph(rng.normal(size=(15, 3)), 3)
    dump_adjacency(A, tmp_path / "g.txt")
    B = load_adjacency(tmp_path / "g.txt", 15)
    assert abs(A - B).max() == 0


def test_empty_adjacency_dump(tmp_path):
    dump_adjacency(sp.csr_matrix((3, 3)), tmp_path / "g.txt")
    assert load_adjacency(tmp_path / "g.txt", 3).nnz == 0
