"""Text-attributed graph container, dataset IO, synthetic generation and splits."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

UNLABELED = -1


class DatasetError(ValueError):
    """Raised for malformed dataset directories or inconsistent graph data."""


class EdgelessGraphWarning(UserWarning):
    """Homophily was requested on a graph without edges."""


def _symmetric_binary(n: int, src: np.ndarray, dst: np.ndarray) -> tuple[sp.csr_matrix, int]:
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    loops = int(np.count_nonzero(src == dst))
    keep = src != dst
    src, dst = src[keep], dst[keep]
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0) if lo.size else np.zeros((0, 2), np.int64)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    A = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    A.sort_indices()
    return A, loops


@dataclass(frozen=True)
class TextAttributedGraph:
    """Nodes with free text, a symmetric 0/1 adjacency and (partially known) labels.

    ``labels`` uses ``-1`` for unknown classes, following the scikit-learn
    semi-supervised convention.
    """

    raw_texts: tuple[str, ...]
    adjacency: sp.csr_matrix
    labels: np.ndarray
    num_classes: int
    cleaned_texts: Optional[tuple[str, ...]] = None
    class_names: tuple[str, ...] = ()
    name: str = "tag"

    def __post_init__(self):
        object.__setattr__(self, "raw_texts", tuple(self.raw_texts))
        if self.cleaned_texts is not None:
            object.__setattr__(self, "cleaned_texts", tuple(self.cleaned_texts))
        n = len(self.raw_texts)
        A = sp.csr_matrix(self.adjacency, dtype=np.float64)
        A.sort_indices()
        if A.shape != (n, n):
            raise DatasetError(f"adjacency shape {A.shape} does not match {n} nodes")
        if (A != A.T).nnz:
            raise DatasetError("adjacency must be symmetric")
        if A.diagonal().any():
            raise DatasetError("adjacency must have a zero diagonal")
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        if labels.shape != (n,):
            raise DatasetError(f"expected {n} labels, got shape {labels.shape}")
        if self.num_classes < 1:
            raise DatasetError("num_classes must be positive")
        if np.any(labels >= self.num_classes) or np.any(labels < UNLABELED):
            raise DatasetError("label index out of range [0, num_classes)")
        if self.cleaned_texts is not None and len(self.cleaned_texts) != n:
            raise DatasetError("cleaned_texts length differs from node count")
        labels.flags.writeable = False
        object.__setattr__(self, "adjacency", A)
        object.__setattr__(self, "labels", labels)

    @property
    def node_count(self) -> int:
        return len(self.raw_texts)

    @property
    def num_edges(self) -> int:
        return int(sp.triu(self.adjacency, k=1).nnz)

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an ``(m, 2)`` array with ``src < dst``, sorted."""
        upper = sp.triu(self.adjacency, k=1).tocoo()
        pairs = np.stack([upper.row, upper.col], axis=1).astype(np.int64)
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]

    def texts(self, source: str = "raw") -> tuple[str, ...]:
        if source == "raw":
            return self.raw_texts
        if source == "cleaned":
            return self.cleaned_texts if self.cleaned_texts is not None else self.raw_texts
        raise ValueError(f"unknown text source {source!r}")

    def with_adjacency(self, adjacency) -> "TextAttributedGraph":
        return TextAttributedGraph(self.raw_texts, adjacency, self.labels, self.num_classes,
                                   self.cleaned_texts, self.class_names, self.name)

    def with_cleaned_texts(self, cleaned: Sequence[str]) -> "TextAttributedGraph":
        return TextAttributedGraph(self.raw_texts, self.adjacency, self.labels, self.num_classes,
                                   tuple(cleaned), self.class_names, self.name)

    def without_edges(self) -> "TextAttributedGraph":
        n = self.node_count
        return self.with_adjacency(sp.csr_matrix((n, n)))


@dataclass(frozen=True)
class SplitMasks:
    """Disjoint train/val/test index sets; ``train`` is the labeled set L."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    node_count: int

    def __post_init__(self):
        for name in ("train", "val", "test"):
            arr = np.sort(np.asarray(getattr(self, name), dtype=np.int64))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("train, val and test must be disjoint")
        every = np.concatenate([self.train, self.val, self.test])
        if every.size and (every.min() < 0 or every.max() >= self.node_count):
            raise ValueError("split index out of range")

    @property
    def labeled(self) -> np.ndarray:
        return self.train

    @property
    def unlabeled(self) -> np.ndarray:
        mask = np.ones(self.node_count, dtype=bool)
        mask[self.train] = False
        return np.flatnonzero(mask)

    def mask(self, name: str) -> np.ndarray:
        out = np.zeros(self.node_count, dtype=bool)
        out[getattr(self, name) if name != "unlabeled" else self.unlabeled] = True
        return out

    def to_dict(self) -> dict:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist(),
                "node_count": self.node_count}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitMasks":
        return cls(np.array(d["train"], dtype=np.int64), np.array(d["val"], dtype=np.int64),
                   np.array(d["test"], dtype=np.int64), int(d["node_count"]))


@dataclass(frozen=True)
class SyntheticConfig:
    """Planted-partition topology plus class-skewed token draws.

    The vocabulary is cut into ``num_classes + 1`` equal contiguous blocks of
    token ids: one topic block per class and a final background block shared
    by all classes. A node draws each token uniformly from its class block with
    probability ``class_token_skew`` and from the background block otherwise.
    """

    nodes_per_class: int = 100
    num_classes: int = 2
    intra_edge_prob: float = 0.10
    inter_edge_prob: float = 0.01
    vocab_size: int = 600
    tokens_per_node: int = 6
    class_token_skew: float = 0.7

    def __post_init__(self):
        if self.nodes_per_class < 1 or self.num_classes < 1:
            raise ValueError("degenerate synthetic config: need at least one node and one class")
        for p in (self.intra_edge_prob, self.inter_edge_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("edge probabilities must lie in [0, 1]")
        if self.intra_edge_prob < self.inter_edge_prob:
            raise ValueError("intra_edge_prob must be >= inter_edge_prob")
        if not 0.0 < self.class_token_skew <= 1.0:
            raise ValueError("class_token_skew must lie in (0, 1]")
        if self.vocab_size < self.num_classes + 1 or self.tokens_per_node < 0:
            raise ValueError("vocab_size must cover every class block plus the background "
                             "block; tokens_per_node >= 0")

    def expected_homophily(self) -> float:
        m, c = self.nodes_per_class, self.num_classes
        intra = c * m * (m - 1) / 2 * self.intra_edge_prob
        inter = c * (c - 1) / 2 * m * m * self.inter_edge_prob
        total = intra + inter
        return 1.0 if total == 0 else intra / total


def make_synthetic_tag(config: SyntheticConfig, seed: int) -> TextAttributedGraph:
    rng = np.random.default_rng(seed)
    c, m = config.num_classes, config.nodes_per_class
    n = c * m
    labels = np.repeat(np.arange(c), m)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, config.intra_edge_prob, config.inter_edge_prob)
    draws = rng.random((n, n))
    upper = np.triu(draws < prob, k=1)
    src, dst = np.nonzero(upper)
    A, _ = _symmetric_binary(n, src, dst)

    block = config.vocab_size // (c + 1)
    texts = []
    for y in labels:
        own = rng.random(config.tokens_per_node) < config.class_token_skew
        offset = np.where(own, y * block, c * block)
        tok = offset + rng.integers(0, block, config.tokens_per_node)
        texts.append(" ".join(f"w{t}" for t in tok))
    return TextAttributedGraph(tuple(texts), A, labels, c,
                               class_names=tuple(f"class{k}" for k in range(c)),
                               name=f"synthetic-seed{seed}")


def _largest_remainder(counts: np.ndarray, ratio: float) -> np.ndarray:
    """Per-class floor allocation, topped up by largest fractional remainder."""
    total = int(math.floor(ratio * counts.sum() + 1e-9))
    exact = ratio * counts
    alloc = np.floor(exact + 1e-9).astype(np.int64)
    remainder = exact - alloc
    order = sorted(range(len(counts)), key=lambda k: (-remainder[k], k))
    for k in order:
        if alloc.sum() >= total:
            break
        if alloc[k] < counts[k]:
            alloc[k] += 1
    return alloc


def split_nodes(g: TextAttributedGraph, train_ratio: float, val_ratio: float, seed: int) -> SplitMasks:
    """Seeded class-stratified split of the labeled nodes.

    Counts use floor-then-distribute: each class gets ``floor(ratio * n_c)``
    and the shortfall to ``floor(ratio * n)`` goes to the classes with the
    largest fractional remainders (lower class index first on ties). Nodes
    with unknown labels never enter any split.
    """
    if train_ratio < 0 or val_ratio < 0 or train_ratio + val_ratio > 1 + 1e-12:
        raise ValueError("ratios must be nonnegative with sum <= 1")
    rng = np.random.default_rng(seed)
    labels = g.labels
    classes = np.arange(g.num_classes)
    pools = [rng.permutation(np.flatnonzero(labels == k)) for k in classes]
    counts = np.array([p.size for p in pools])
    n_train = _largest_remainder(counts, train_ratio)
    if train_ratio > 0 and np.any((n_train == 0) & (counts > 0)):
        bad = int(np.flatnonzero((n_train == 0) & (counts > 0))[0])
        raise ValueError(f"class {bad} receives no training nodes at train_ratio={train_ratio}")
    n_val = _largest_remainder(counts, val_ratio)
    n_val = np.minimum(n_val, counts - n_train)
    train, val, test = [], [], []
    for pool, a, b in zip(pools, n_train, n_val):
        train.append(pool[:a])
        val.append(pool[a:a + b])
        test.append(pool[a + b:])
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, np.int64)
    return SplitMasks(cat(train), cat(val), cat(test), g.node_count)


def edge_homophily(g: TextAttributedGraph) -> float:
    """Fraction of undirected edges whose endpoints share a label."""
    edges = g.edge_list()
    if edges.shape[0] == 0:
        warnings.warn("graph has no edges; homophily reported as 1.0", EdgelessGraphWarning)
        return 1.0
    ya, yb = g.labels[edges[:, 0]], g.labels[edges[:, 1]]
    if np.any(ya == UNLABELED) or np.any(yb == UNLABELED):
        raise DatasetError("edge_homophily needs every edge endpoint labeled")
    return float(np.mean(ya == yb))


# --- directory format -------------------------------------------------------

def load_dataset(path) -> TextAttributedGraph:
    """Read ``nodes.jsonl``, ``edges.txt`` and ``meta.json`` from ``path``.

    Edges are symmetrized and deduplicated; self-loops are dropped and counted
    in a log warning.
    """
    root = Path(path)
    for fname in ("nodes.jsonl", "edges.txt", "meta.json"):
        if not (root / fname).is_file():
            raise DatasetError(f"missing {fname} in {root}")
    meta = json.loads((root / "meta.json").read_text())
    num_classes = int(meta["num_classes"])

    records = []
    with open(root / "nodes.jsonl") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    records.sort(key=lambda r: r["id"])
    ids = [r["id"] for r in records]
    if ids != list(range(len(records))):
        raise DatasetError("node ids must be contiguous integers starting at 0")
    n = len(records)
    raw = [r["raw_text"] for r in records]
    cleaned = [r.get("cleaned_text") for r in records]
    cleaned = tuple(c if c is not None else t for c, t in zip(cleaned, raw)) \
        if any(c is not None for c in cleaned) else None
    labels = np.array([UNLABELED if r.get("label") is None else int(r["label"]) for r in records],
                      dtype=np.int64)
    if np.any(labels >= num_classes):
        raise DatasetError(f"label index >= num_classes ({num_classes})")

    pairs = []
    with open(root / "edges.txt") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise DatasetError(f"edges.txt line {lineno}: expected 'src dst'")
            pairs.append((int(parts[0]), int(parts[1])))
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        raise DatasetError("edge references a node id absent from nodes.jsonl")
    A, loops = _symmetric_binary(n, arr[:, 0], arr[:, 1])
    if loops:
        logger.warning("dropped %d self-loop(s) from %s", loops, root / "edges.txt")
    return TextAttributedGraph(tuple(raw), A, labels, num_classes, cleaned,
                               tuple(meta.get("class_names", ())), meta.get("dataset_name", root.name))


def save_dataset(g: TextAttributedGraph, path, splits: Optional[SplitMasks] = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "nodes.jsonl", "w") as fh:
        for i, text in enumerate(g.raw_texts):
            rec = {"id": i, "raw_text": text,
                   "label": None if g.labels[i] == UNLABELED else int(g.labels[i])}
            if g.cleaned_texts is not None:
                rec["cleaned_text"] = g.cleaned_texts[i]
            fh.write(json.dumps(rec) + "\n")
    with open(root / "edges.txt", "w") as fh:
        for s, d in g.edge_list():
            fh.write(f"{s} {d}\n")
    meta = {"num_classes": g.num_classes, "class_names": list(g.class_names), "dataset_name": g.name}
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    if splits is not None:
        (root / "splits.json").write_text(json.dumps(splits.to_dict()) + "\n")
    return root


def load_splits(path) -> Optional[SplitMasks]:
    f = Path(path) / "splits.json"
    return SplitMasks.from_dict(json.loads(f.read_text())) if f.is_file() else None
