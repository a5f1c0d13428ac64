"""Similarity graphs from embeddings, graph fusion and GCN normalization."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array


def cosine_similarity(h_i, h_v) -> float:
    """Cosine of two vectors; 0 when either vector is zero."""
    a = np.asarray(h_i, dtype=np.float64).ravel()
    b = np.asarray(h_v, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _row_normalized(H: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(H, axis=1, keepdims=True)
    out = np.zeros_like(H)
    np.divide(H, norms, out=out, where=norms > 0)
    return out


def cosine_matrix(H) -> np.ndarray:
    Hn = _row_normalized(np.asarray(H, dtype=np.float64))
    S = Hn @ Hn.T
    S = 0.5 * (S + S.T)
    return np.clip(S, -1.0, 1.0)


def build_knn_graph(H, k: int, threshold: float = 0.0, block_size: int = 1024) -> sp.csr_matrix:
    """Symmetric kNN graph weighted by cosine similarity.

    Each node keeps its ``k`` most similar other nodes (ties to the lower
    index) whose similarity is at least ``threshold``; the union of both
    directions is returned. Weights are similarities clipped to ``[0, 1]`` and
    pairs with non-positive similarity carry no edge.
    """
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the node count {n}")
    Hn = _row_normalized(H)
    rows, cols, vals = [], [], []
    for start in range(0, n, block_size):
        stop = min(n, start + block_size)
        S = Hn[start:stop] @ Hn.T
        S = np.clip(S, -1.0, 1.0)
        local = np.arange(stop - start)
        S[local, local + start] = -np.inf
        order = np.argsort(-S, axis=1, kind="stable")[:, :k]
        picked = np.take_along_axis(S, order, axis=1)
        keep = (picked >= threshold) & (picked > 0)
        r = np.repeat(np.arange(start, stop), k).reshape(-1, k)
        rows.append(r[keep])
        cols.append(order[keep])
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    # union of directions; weights recomputed once per unordered pair so they are symmetric
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0) if lo.size else np.zeros((0, 2), np.int64)
    vals = np.einsum("ij,ij->i", Hn[pairs[:, 0]], Hn[pairs[:, 1]]) if len(pairs) else np.zeros(0)
    vals = np.clip(vals, 0.0, 1.0)
    A = sp.csr_matrix((np.concatenate([vals, vals]),
                       (np.concatenate([pairs[:, 0], pairs[:, 1]]),
                        np.concatenate([pairs[:, 1], pairs[:, 0]]))), shape=(n, n))
    A.eliminate_zeros()
    A.sort_indices()
    return A


def fuse_graphs(A_orig, A_sim, lam: float):
    """Elementwise ``lam * A_orig + (1 - lam) * A_sim``."""
    if A_orig.shape != A_sim.shape:
        raise ValueError(f"shape mismatch: {A_orig.shape} vs {A_sim.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if sp.issparse(A_orig) or sp.issparse(A_sim):
        out = sp.csr_matrix(lam * sp.csr_matrix(A_orig) + (1.0 - lam) * sp.csr_matrix(A_sim))
        out.eliminate_zeros()
        out.sort_indices()
        return out
    return lam * np.asarray(A_orig) + (1.0 - lam) * np.asarray(A_sim)


def normalize_adjacency(A):
    """Symmetric renormalization ``D^-1/2 (A + I) D^-1/2`` with ``D`` the degrees of ``A + I``.

    Sparse input gives a CSR result, dense input a dense one.
    """
    n = A.shape[0]
    if sp.issparse(A):
        B = sp.csr_matrix(A, dtype=np.float64) + sp.identity(n, format="csr")
        s = 1.0 / np.sqrt(np.asarray(B.sum(axis=1)).ravel())
        D = sp.diags(s)
        out = sp.csr_matrix(D @ B @ D)
        out.sort_indices()
        return out
    B = np.asarray(A, dtype=np.float64) + np.eye(n)
    s = 1.0 / np.sqrt(B.sum(axis=1))
    return s[:, None] * B * s[None, :]


def dump_adjacency(A, path) -> Path:
    """Write the upper triangle as ``src dst weight`` lines."""
    upper = sp.triu(sp.csr_matrix(A), k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    with open(path, "w") as fh:
        for i in order:
            fh.write(f"{upper.row[i]} {upper.col[i]} {upper.data[i]:.17g}\n")
    return Path(path)


def load_adjacency(path, n: int) -> sp.csr_matrix:
    if not Path(path).read_text().strip():
        return sp.csr_matrix((n, n))
    data = np.loadtxt(path, ndmin=2)
    r, c, w = data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2]
    A = sp.csr_matrix((np.concatenate([w, w]), (np.concatenate([r, c]), np.concatenate([c, r]))),
                      shape=(n, n))
    A.sort_indices()
    return A


class KNNGraph(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping an embedding matrix to its cosine kNN graph."""

    def __init__(self, k=10, threshold=0.0):
        self.k = k
        self.threshold = threshold

    def fit(self, H, y=None):
        check_array(H)
        return self

    def transform(self, H):
        return build_knn_graph(check_array(H, dtype=np.float64), self.k, self.threshold)
