"""Shallow text features: vocabulary, TF-IDF and bag-of-words."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on anything that is not a Unicode letter or digit."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    index: dict
    document_frequency: dict
    max_features: int
    n_documents: int

    def __len__(self):
        return len(self.index)

    def terms(self) -> list[str]:
        return sorted(self.index, key=self.index.__getitem__)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"#\t{self.max_features}\t{self.n_documents}\n")
            for term in self.terms():
                fh.write(f"{term}\t{self.index[term]}\t{self.document_frequency[term]}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        index, df = {}, {}
        with open(path) as fh:
            header = fh.readline().rstrip("\n").split("\t")
            max_features, n_docs = int(header[1]), int(header[2])
            for line in fh:
                term, idx, freq = line.rstrip("\n").split("\t")
                index[term] = int(idx)
                df[term] = int(freq)
        return cls(index, df, max_features, n_docs)


def build_vocabulary(texts: Sequence[str], max_features: int) -> Vocabulary:
    """Keep the ``max_features`` most frequent terms (ties: lexicographic).

    Column indices follow lexicographic term order.
    """
    if max_features < 1:
        raise ValueError("max_features must be >= 1")
    if len(texts) == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    df: Counter = Counter()
    for text in texts:
        toks = tokenize(text)
        counts.update(toks)
        df.update(set(toks))
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[:max_features]
    kept = sorted(ranked)
    return Vocabulary({t: i for i, t in enumerate(kept)}, {t: df[t] for t in kept},
                      max_features, len(texts))


def _counts(texts: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    out = np.zeros((len(texts), len(vocab)))
    for row, text in enumerate(texts):
        for tok in tokenize(text):
            col = vocab.index.get(tok)
            if col is not None:
                out[row, col] += 1.0
    return out


def tfidf_features(texts: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    """Raw-count tf times smoothed idf ``ln((1+N)/(1+df)) + 1``, rows L2-normalized.

    ``N`` and ``df`` come from the corpus the vocabulary was built on.
    """
    tf = _counts(texts, vocab)
    df = np.array([vocab.document_frequency[t] for t in vocab.terms()], dtype=np.float64)
    idf = np.log((1.0 + vocab.n_documents) / (1.0 + df)) + 1.0
    X = tf * idf
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    np.divide(X, norms, out=X, where=norms > 0)
    return X


def bow_features(texts: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    return (_counts(texts, vocab) > 0).astype(np.float64)


class TextFeaturizer(TransformerMixin, BaseEstimator):
    """Fit a vocabulary on a corpus and map texts to TF-IDF or binary BoW rows.

    Parameters
    ----------
    max_features : int
        Vocabulary cap (500 for TF-IDF and 1433 for BoW on the reference datasets).
    method : {"tfidf", "bow"}
    """

    def __init__(self, max_features: int = 500, method: str = "tfidf"):
        self.max_features = max_features
        self.method = method

    def fit(self, texts, y=None):
        if self.method not in ("tfidf", "bow"):
            raise ValueError(f"unknown feature method {self.method!r}")
        self.vocabulary_ = build_vocabulary(list(texts), self.max_features)
        self.n_features_out_ = len(self.vocabulary_)
        return self

    def transform(self, texts):
        check_is_fitted(self, "vocabulary_")
        fn = tfidf_features if self.method == "tfidf" else bow_features
        return fn(list(texts), self.vocabulary_)

    def save_vocabulary(self, path) -> Path:
        check_is_fitted(self, "vocabulary_")
        self.vocabulary_.dump(path)
        return Path(path)

    @classmethod
    def from_vocabulary(cls, vocab: Vocabulary, method: str = "tfidf") -> "TextFeaturizer":
        feat = cls(max_features=vocab.max_features, method=method)
        feat.vocabulary_ = vocab
        feat.n_features_out_ = len(vocab)
        return feat
