"""Graph structure learning model: a two-layer GCN with optional adjacency learning.

Two refinement strategies are supported. ``implicit`` trains only the GCN
weights on a fixed graph. ``joint`` also learns one weight per candidate
undirected edge, minimizing the task loss plus a structure regularizer
(smoothness, connectivity and sparsity) with projected gradient steps that
keep every weight in ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._nn import (Optimizer, activate, activation_grad, dropout_mask, glorot, log_softmax,
                  one_hot, softmax, two_term_logit_grad, two_term_loss)
from .data import UNLABELED, SplitMasks
from .graph import normalize_adjacency
from .local_model import PseudoLabelSet

PARAM_NAMES = ("U1", "b1", "U2", "b2")


@dataclass(frozen=True)
class GcnModel:
    U1: np.ndarray
    b1: np.ndarray
    U2: np.ndarray
    b2: np.ndarray
    dropout_rate: float = 0.5
    activation: str = "relu"
    loss_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.U1.shape[1] < 1:
            raise ValueError("hidden width must be >= 1")
        if self.U1.shape[1] != self.U2.shape[0]:
            raise ValueError("inconsistent parameter shapes")

    @property
    def in_dim(self) -> int:
        return self.U1.shape[0]

    @property
    def hidden(self) -> int:
        return self.U1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.U2.shape[1]

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def with_params(self, params: dict, **kw) -> "GcnModel":
        return replace(self, **params, **kw)


def init_gcn(in_dim: int, hidden: int, num_classes: int, seed, dropout_rate: float = 0.5) -> GcnModel:
    rng = np.random.default_rng(seed)
    return GcnModel(glorot(rng, in_dim, hidden), np.zeros(hidden),
                    glorot(rng, hidden, num_classes), np.zeros(num_classes), dropout_rate)


def _forward(model: GcnModel, A_hat, H, mask):
    HU = H @ model.U1
    Z1 = A_hat @ HU + model.b1
    R = activate(Z1, model.activation)
    Rd = R if mask is None else R * mask
    RU = Rd @ model.U2
    logits = A_hat @ RU + model.b2
    return HU, Z1, Rd, RU, logits


def _check_inputs(model: GcnModel, A_hat, H):
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != model.in_dim:
        raise ValueError(f"expected embeddings with {model.in_dim} columns, got {H.shape}")
    if A_hat.shape != (H.shape[0], H.shape[0]):
        raise ValueError(f"adjacency shape {A_hat.shape} does not match {H.shape[0]} nodes")
    return H


def gcn_forward(model: GcnModel, A_hat, H, train_mode: bool = False, seed=None) -> np.ndarray:
    """Row-softmax of ``A_hat @ act(A_hat @ H @ U1 + b1) @ U2 + b2``."""
    H = _check_inputs(model, A_hat, H)
    mask = None
    if train_mode and model.dropout_rate > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        mask = dropout_mask((H.shape[0], model.hidden), model.dropout_rate, rng)
    return softmax(_forward(model, A_hat, H, mask)[-1])


# --- objectives -------------------------------------------------------------------

def _gslm_targets(num_classes, true_labels, pseudo: PseudoLabelSet, masks: SplitMasks,
                  soft_targets=None):
    labeled = masks.labeled
    lab_t = one_hot(np.asarray(true_labels)[labeled], num_classes)
    other = np.asarray(pseudo.nodes, dtype=np.int64)
    if soft_targets is not None:
        oth_t = np.asarray(soft_targets, dtype=np.float64)[other]
    else:
        oth_t = one_hot(pseudo.classes, num_classes)
    return labeled, lab_t, other, oth_t


def gslm_phase_loss(p, true_labels, pseudo: Optional[PseudoLabelSet], masks: SplitMasks,
                    beta: float, soft_targets=None) -> float:
    """Negated pseudo-likelihood objective.

    ``beta * mean_{pseudo} CE(onehot(y_hat), p) + (1 - beta) * mean_L CE(onehot(y), p)``.
    The pseudo-label term runs over the unlabeled nodes covered by ``pseudo``.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    p = np.asarray(p, dtype=np.float64)
    if pseudo is None:
        pseudo = PseudoLabelSet(np.zeros(0, np.int64), np.zeros(0, np.int64))
    if beta > 0 and len(pseudo) == 0:
        raise ValueError("beta > 0 but no unlabeled node carries a pseudo-label")
    if np.isin(pseudo.nodes, masks.labeled).any():
        raise ValueError("pseudo-labels must cover unlabeled nodes only")
    labeled, lab_t, other, oth_t = _gslm_targets(p.shape[1], true_labels, pseudo, masks,
                                                 soft_targets)
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
    return two_term_loss(log_p, labeled, lab_t, other, oth_t, beta)


@dataclass(frozen=True)
class RefinementConfig:
    strategy: str = "implicit"
    gamma_smooth: float = 1.0
    gamma_degree: float = 1.0
    gamma_sparse: float = 0.1
    adjacency_lr: float = 0.01

    def __post_init__(self):
        if self.strategy not in ("implicit", "joint"):
            raise ValueError(f"unknown refinement strategy {self.strategy!r}")
        if min(self.gamma_smooth, self.gamma_degree, self.gamma_sparse) < 0:
            raise ValueError("refinement weights must be nonnegative")


def graph_refine_loss(A_param, H, gamma_smooth: float = 1.0, gamma_degree: float = 0.0,
                      gamma_sparse: float = 0.0) -> float:
    """Structure regularizer on a symmetric nonnegative adjacency.

    ``gamma_smooth * tr(H^T L H) / n^2 - gamma_degree * sum(log(A 1)) / n
    + gamma_sparse * ||A||_F^2 / n^2`` with ``L`` the unnormalized Laplacian.
    """
    A = sp.csr_matrix(A_param, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64).reshape(A.shape[0], -1)
    n = A.shape[0]
    coo = A.tocoo()
    diff = H[coo.row] - H[coo.col]
    smooth = 0.5 * float(np.sum(coo.data * np.einsum("ij,ij->i", diff, diff)))
    loss = gamma_smooth * smooth / n**2
    if gamma_degree > 0:
        deg = np.asarray(A.sum(axis=1)).ravel()
        if np.any(deg <= 0):
            raise ValueError("degree term needs strictly positive row sums")
        loss -= gamma_degree * float(np.sum(np.log(deg))) / n
    loss += gamma_sparse * float(np.sum(coo.data ** 2)) / n**2
    return float(loss)


# --- learnable adjacency ------------------------------------------------------

def support_pairs(*mats) -> np.ndarray:
    """Sorted undirected pairs ``(i < j)`` present in any of the given matrices."""
    parts = []
    for M in mats:
        if M is None:
            continue
        u = sp.triu(sp.csr_matrix(M), k=1).tocoo()
        keep = u.data != 0
        parts.append(np.stack([u.row[keep], u.col[keep]], axis=1))
    pairs = np.concatenate(parts) if parts else np.zeros((0, 2), np.int64)
    return np.unique(pairs.astype(np.int64), axis=0) if len(pairs) else np.zeros((0, 2), np.int64)


def adjacency_from_weights(n: int, pairs: np.ndarray, w: np.ndarray) -> sp.csr_matrix:
    A = sp.csr_matrix((np.concatenate([w, w]),
                       (np.concatenate([pairs[:, 0], pairs[:, 1]]),
                        np.concatenate([pairs[:, 1], pairs[:, 0]]))), shape=(n, n))
    A.sort_indices()
    return A


def _refine_grad(n, pairs, w, H, cfg: RefinementConfig) -> np.ndarray:
    i, j = pairs[:, 0], pairs[:, 1]
    diff = H[i] - H[j]
    g = cfg.gamma_smooth * np.einsum("ij,ij->i", diff, diff) / n**2
    g = g + 4.0 * cfg.gamma_sparse * w / n**2
    if cfg.gamma_degree > 0:
        deg = np.bincount(i, w, n) + np.bincount(j, w, n)
        g = g - cfg.gamma_degree / n * (1.0 / deg[i] + 1.0 / deg[j])
    return g


def gslm_loss_and_grad(model: GcnModel, A_hat, H, true_labels, pseudo: PseudoLabelSet,
                       masks: SplitMasks, beta: float, soft_targets=None, dropout=None,
                       need_adjacency_grad: bool = False):
    """Task loss, parameter gradients and (optionally) ``dL/dA_hat`` on its nonzeros.

    The adjacency gradient is returned as a function ``(rows, cols) -> values``
    so callers evaluate it only on the entries they parameterize.
    """
    H = _check_inputs(model, A_hat, H)
    labeled, lab_t, other, oth_t = _gslm_targets(model.num_classes, true_labels, pseudo, masks,
                                                 soft_targets)
    HU, Z1, Rd, RU, logits = _forward(model, A_hat, H, dropout)
    loss = two_term_loss(log_softmax(logits), labeled, lab_t, other, oth_t, beta)
    G = two_term_logit_grad(softmax(logits), labeled, lab_t, other, oth_t, beta)
    At = A_hat.T
    GA = At @ G
    grads = {"U2": Rd.T @ GA, "b2": G.sum(axis=0)}
    dR = GA @ model.U2.T
    if dropout is not None:
        dR = dR * dropout
    dZ1 = dR * activation_grad(Z1, model.activation)
    grads["U1"] = H.T @ (At @ dZ1)
    grads["b1"] = dZ1.sum(axis=0)
    adj_grad = None
    if need_adjacency_grad:
        def adj_grad(rows, cols):
            return (np.einsum("ij,ij->i", G[rows], RU[cols])
                    + np.einsum("ij,ij->i", dZ1[rows], HU[cols]))
    return loss, grads, adj_grad


def joint_loss_and_grad(model: GcnModel, pairs, w, H, true_labels, pseudo, masks, beta,
                        refinement: RefinementConfig, soft_targets=None, dropout=None):
    """Hybrid loss (task + structure regularizer) and gradients w.r.t. GCN params and edge weights."""
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    A = adjacency_from_weights(n, pairs, w)
    d_tilde = np.asarray(A.sum(axis=1)).ravel() + 1.0
    s = 1.0 / np.sqrt(d_tilde)
    A_hat = normalize_adjacency(A)
    loss, grads, adj_grad = gslm_loss_and_grad(model, A_hat, H, true_labels, pseudo, masks,
                                               beta, soft_targets, dropout, True)
    i, j = pairs[:, 0], pairs[:, 1]
    g_ij, g_ji = adj_grad(i, j), adj_grad(j, i)
    diag = np.arange(n)
    g_ii = adj_grad(diag, diag)
    # dL/ds through A_hat = diag(s) (A + I) diag(s)
    ds = 2.0 * g_ii * s
    ds += np.bincount(i, (g_ij + g_ji) * w * s[j], n)
    ds += np.bincount(j, (g_ij + g_ji) * w * s[i], n)
    c = ds * (-0.5) * d_tilde ** -1.5
    gw = (g_ij + g_ji) * s[i] * s[j] + c[i] + c[j]
    if refinement.strategy == "joint":
        loss += graph_refine_loss(A, H, refinement.gamma_smooth, refinement.gamma_degree,
                                  refinement.gamma_sparse)
        gw = gw + _refine_grad(n, pairs, w, H, refinement)
    return loss, grads, gw


# --- training -----------------------------------------------------------------

@dataclass(frozen=True)
class GSLMPhaseConfig:
    lr: float = 0.01
    epochs: int = 100
    beta: float = 0.5
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    seed: int = 0


def train_gslm_phase(model: GcnModel, A_fused, H, labels, pseudo: Optional[PseudoLabelSet],
                     masks: SplitMasks, refinement: RefinementConfig, config: GSLMPhaseConfig,
                     soft_targets=None, candidate=None):
    """Train the GCN (and, for ``joint``, the edge weights). Returns ``(model, A_refined)``.

    With ``implicit`` the input adjacency object is returned untouched. With
    ``joint`` the learnable entries are the union of the supports of
    ``A_fused`` and ``candidate``.
    """
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    if pseudo is None:
        pseudo = PseudoLabelSet(np.zeros(0, np.int64), np.zeros(0, np.int64))
    if config.beta > 0 and len(pseudo) == 0:
        raise ValueError("beta > 0 but no unlabeled node carries a pseudo-label")
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(config.lr, config.optimizer, 0.0, config.weight_decay, decay=("U1", "U2"))
    params = model.params()
    history = []

    joint = refinement.strategy == "joint"
    if joint:
        pairs = support_pairs(A_fused, candidate)
        Af = sp.csr_matrix(A_fused)
        w = np.clip(np.asarray(Af[pairs[:, 0], pairs[:, 1]]).ravel(), 0.0, 1.0) \
            if len(pairs) else np.zeros(0)
        adj_opt = Optimizer(refinement.adjacency_lr, "adam")
    else:
        A_hat = normalize_adjacency(A_fused if sp.issparse(A_fused) else np.asarray(A_fused))

    for epoch in range(config.epochs):
        cur = model.with_params(params)
        mask = None
        if cur.dropout_rate > 0:
            mask = dropout_mask((n, cur.hidden), cur.dropout_rate, rng)
        if joint:
            loss, grads, gw = joint_loss_and_grad(cur, pairs, w, H, labels, pseudo, masks,
                                                  config.beta, refinement, soft_targets, mask)
        else:
            loss, grads, _ = gslm_loss_and_grad(cur, A_hat, H, labels, pseudo, masks,
                                                config.beta, soft_targets, mask)
        if not np.isfinite(loss):
            raise FloatingPointError(f"graph model loss became non-finite at epoch {epoch} "
                                     f"(lr={config.lr}); lower the learning rate")
        history.append(loss)
        params = opt.step(params, grads)
        if joint and refinement.adjacency_lr > 0 and len(w):
            w = np.clip(adj_opt.step({"w": w}, {"w": gw})["w"], 0.0, 1.0)

    new_model = model.with_params(params, loss_history=tuple(history))
    if not joint:
        return new_model, A_fused
    A_ref = adjacency_from_weights(n, pairs, w)
    A_ref.eliminate_zeros()
    return new_model, A_ref


# --- estimator ----------------------------------------------------------------

class GCNClassifier(ClassifierMixin, BaseEstimator):
    """Transductive two-layer GCN trained on the labeled rows of ``y`` (``-1`` = unlabeled).

    ``adjacency`` is passed to :meth:`fit` and to the prediction methods; it is
    normalized internally.
    """

    def __init__(self, hidden=128, lr=0.01, epochs=200, weight_decay=5e-4, dropout=0.5,
                 random_state=0):
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.random_state = random_state

    def fit(self, X, y, adjacency):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        labeled = np.flatnonzero(y != UNLABELED)
        if labeled.size == 0:
            raise ValueError("fit needs at least one labeled row")
        self.classes_ = np.arange(int(y.max()) + 1)
        masks = SplitMasks(labeled, np.zeros(0, np.int64), np.zeros(0, np.int64), len(y))
        model = init_gcn(X.shape[1], self.hidden, len(self.classes_), self.random_state,
                         self.dropout)
        cfg = GSLMPhaseConfig(lr=self.lr, epochs=self.epochs, beta=0.0,
                              weight_decay=self.weight_decay, seed=self.random_state)
        self.model_, _ = train_gslm_phase(model, adjacency, X, y, None, masks,
                                          RefinementConfig("implicit"), cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X, adjacency):
        check_is_fitted(self, "model_")
        return gcn_forward(self.model_, normalize_adjacency(adjacency),
                           check_array(X, dtype=np.float64))

    def predict(self, X, adjacency):
        return self.predict_proba(X, adjacency).argmax(axis=1)
