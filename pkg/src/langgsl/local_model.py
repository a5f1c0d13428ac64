"""Local text classifier: a two-layer perceptron over node features.

It plays the role of the variational distribution over unlabeled labels. The
hidden activations double as node embeddings for graph construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._nn import (Optimizer, activate, activation_grad, dropout_mask, glorot, log_softmax,
                  one_hot, softmax, two_term_logit_grad, two_term_loss)
from .data import UNLABELED, SplitMasks

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class LocalModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    dropout_rate: float = 0.0
    activation: str = "relu"
    loss_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.W1.shape[1] < 1:
            raise ValueError("hidden dimension must be >= 1")
        if self.W1.shape[1] != self.W2.shape[0] or self.b1.shape != (self.W1.shape[1],) \
                or self.b2.shape != (self.W2.shape[1],):
            raise ValueError("inconsistent parameter shapes")

    @property
    def n_features(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W2.shape[1]

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def with_params(self, params: dict, **kw) -> "LocalModel":
        return replace(self, **params, **kw)


def init_local_model(n_features: int, hidden_dim: int, num_classes: int, seed,
                     dropout_rate: float = 0.0) -> LocalModel:
    rng = np.random.default_rng(seed)
    return LocalModel(glorot(rng, n_features, hidden_dim), np.zeros(hidden_dim),
                      glorot(rng, hidden_dim, num_classes), np.zeros(num_classes), dropout_rate)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _forward(model: LocalModel, X: np.ndarray, mask: Optional[np.ndarray]):
    Z1 = X @ model.W1 + model.b1
    H = activate(Z1, model.activation)
    Hd = H if mask is None else H * mask
    logits = Hd @ model.W2 + model.b2
    return Z1, H, Hd, logits


def lm_forward(model: LocalModel, X, train_mode: bool = False, seed=None):
    """Return ``(embeddings, label_distribution)`` for every row of ``X``.

    Dropout on the hidden layer is applied only when ``train_mode`` is set;
    the returned embeddings are always the pre-dropout activations.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} feature columns, got shape {X.shape}")
    mask = None
    if train_mode and model.dropout_rate > 0:
        mask = dropout_mask((X.shape[0], model.hidden_dim), model.dropout_rate, _rng(seed))
    _, H, _, logits = _forward(model, X, mask)
    return H, softmax(logits)


def _lm_targets(p_targets, labels, masks: SplitMasks, distill_nodes):
    labeled = masks.labeled
    other = masks.unlabeled if distill_nodes is None else np.asarray(distill_nodes, dtype=np.int64)
    p_targets = np.asarray(p_targets, dtype=np.float64)
    C = p_targets.shape[1]
    lab_t = one_hot(np.asarray(labels)[labeled], C)
    return labeled, lab_t, other, p_targets[other]


def lm_phase_loss(q, p_targets, true_labels, masks: SplitMasks, alpha: float,
                  distill_nodes=None) -> float:
    """Negated local-model objective.

    ``alpha * mean_U CE(p_target, q) + (1 - alpha) * mean_L CE(onehot(y), q)``.
    ``distill_nodes`` restricts the distillation term to a subset of U.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    q = np.asarray(q, dtype=np.float64)
    labeled, lab_t, other, oth_t = _lm_targets(p_targets, true_labels, masks, distill_nodes)
    with np.errstate(divide="ignore"):
        log_q = np.log(q)
    return two_term_loss(log_q, labeled, lab_t, other, oth_t, alpha)


def lm_loss_and_grad(model: LocalModel, X, p_targets, true_labels, masks: SplitMasks,
                     alpha: float, distill_nodes=None, dropout=None):
    """Loss (computed from logits) and analytic gradients for every parameter."""
    X = np.asarray(X, dtype=np.float64)
    labeled, lab_t, other, oth_t = _lm_targets(p_targets, true_labels, masks, distill_nodes)
    Z1, H, Hd, logits = _forward(model, X, dropout)
    loss = two_term_loss(log_softmax(logits), labeled, lab_t, other, oth_t, alpha)
    G = two_term_logit_grad(softmax(logits), labeled, lab_t, other, oth_t, alpha)
    grads = {"W2": Hd.T @ G, "b2": G.sum(axis=0)}
    dH = G @ model.W2.T
    if dropout is not None:
        dH = dH * dropout
    dZ1 = dH * activation_grad(Z1, model.activation)
    grads["W1"] = X.T @ dZ1
    grads["b1"] = dZ1.sum(axis=0)
    return loss, grads


@dataclass(frozen=True)
class LMPhaseConfig:
    lr: float = 0.01
    epochs: int = 100
    alpha: float = 0.5
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    momentum: float = 0.0
    distill_mode: str = "soft"
    seed: int = 0


def train_lm_phase(model: LocalModel, X, p_targets, labels, masks: SplitMasks,
                   config: LMPhaseConfig, distill_nodes=None) -> LocalModel:
    """Full-batch gradient training of the local model on the two-term objective.

    In ``hard`` distillation mode the targets are one categorical draw per
    node from ``p_targets``, made once per phase.
    """
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    if p_targets is None:
        p_targets = np.full((X.shape[0], model.num_classes), 1.0 / model.num_classes)
    targets = np.asarray(p_targets, dtype=np.float64)
    if config.distill_mode == "hard" and config.alpha > 0:
        draw = sample_pseudo_labels(targets, np.arange(len(targets)), "categorical", rng)
        targets = one_hot(draw.classes, targets.shape[1])
    elif config.distill_mode not in ("soft", "hard"):
        raise ValueError(f"unknown distill_mode {config.distill_mode!r}")
    opt = Optimizer(config.lr, config.optimizer, config.momentum, config.weight_decay,
                    decay=("W1", "W2"))
    params = model.params()
    history = []
    for epoch in range(config.epochs):
        cur = model.with_params(params)
        mask = None
        if cur.dropout_rate > 0:
            mask = dropout_mask((X.shape[0], cur.hidden_dim), cur.dropout_rate, rng)
        loss, grads = lm_loss_and_grad(cur, X, targets, labels, masks, config.alpha,
                                       distill_nodes, mask)
        if not np.isfinite(loss):
            raise FloatingPointError(f"local model loss became non-finite at epoch {epoch} "
                                     f"(lr={config.lr}); lower the learning rate")
        history.append(loss)
        params = opt.step(params, grads)
    return model.with_params(params, loss_history=tuple(history))


# --- pseudo labels ------------------------------------------------------------

@dataclass(frozen=True)
class PseudoLabelSet:
    nodes: np.ndarray
    classes: np.ndarray
    provenance: str = "from_lm"
    round: int = 0

    def __post_init__(self):
        if self.provenance not in ("from_lm", "from_gslm"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if len(self.nodes) != len(self.classes):
            raise ValueError("nodes and classes differ in length")

    def __len__(self):
        return len(self.nodes)


def sample_pseudo_labels(q, nodes, mode: str = "argmax", seed=None,
                         provenance: str = "from_lm", round: int = 0) -> PseudoLabelSet:
    """Hard labels for ``nodes``: argmax (lowest index wins ties) or a categorical draw."""
    q = np.asarray(q, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.int64)
    rows = q[nodes]
    if mode == "argmax":
        classes = rows.argmax(axis=1)
    elif mode == "categorical":
        u = _rng(seed).random(len(nodes))
        cdf = np.cumsum(rows, axis=1)
        cdf[:, -1] = 1.0
        classes = (u[:, None] >= cdf).sum(axis=1)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return PseudoLabelSet(nodes, classes.astype(np.int64), provenance, round)


def most_confident(dist, nodes, ratio: float) -> np.ndarray:
    """The ``round(ratio * len(nodes))`` nodes with the highest max-probability.

    Ties go to the lower node index; a positive ratio keeps at least one node.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0 or ratio <= 0:
        return nodes[:0]
    k = max(1, int(round(ratio * nodes.size)))
    conf = np.asarray(dist)[nodes].max(axis=1)
    order = np.lexsort((nodes, -conf))
    return np.sort(nodes[order[:k]])


# --- estimator ----------------------------------------------------------------

class TextMLPClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Supervised two-layer perceptron with the local-model training loop.

    ``y`` uses ``-1`` for unlabeled rows, which are ignored by :meth:`fit`.
    :meth:`transform` returns the hidden-layer embeddings.
    """

    def __init__(self, hidden_dim=64, lr=0.01, epochs=200, weight_decay=5e-4, dropout=0.0,
                 optimizer="adam", random_state=0):
        self.hidden_dim = hidden_dim
        self.lr = lr
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        labeled = np.flatnonzero(y != UNLABELED)
        if labeled.size == 0:
            raise ValueError("fit needs at least one labeled row")
        self.classes_ = np.arange(int(y.max()) + 1)
        masks = SplitMasks(labeled, np.zeros(0, np.int64), np.zeros(0, np.int64), len(y))
        model = init_local_model(X.shape[1], self.hidden_dim, len(self.classes_),
                                 self.random_state, self.dropout)
        cfg = LMPhaseConfig(lr=self.lr, epochs=self.epochs, alpha=0.0,
                            weight_decay=self.weight_decay, optimizer=self.optimizer,
                            seed=self.random_state)
        self.model_ = train_lm_phase(model, X, None, y, masks, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return lm_forward(self.model_, check_array(X, dtype=np.float64))[1]

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def transform(self, X):
        check_is_fitted(self, "model_")
        return lm_forward(self.model_, check_array(X, dtype=np.float64))[0]
