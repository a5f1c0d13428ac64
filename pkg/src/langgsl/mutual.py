"""Alternating training of the local model and the graph model.

One round runs: local-model forward, graph (re)construction, local
pseudo-labels, graph-model phase, graph pseudo-labels, local-model phase
distilling the graph model's posterior. Round 0 fits the local model on the
labeled nodes only.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import xlogy
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import accuracy_score, f1_score
from sklearn.utils.validation import check_array, check_is_fitted

from .config import TrainConfig, derive_seed
from .data import UNLABELED, SplitMasks, TextAttributedGraph
from .features import TextFeaturizer
from .graph import build_knn_graph, fuse_graphs, normalize_adjacency
from .gslm import (GcnModel, GSLMPhaseConfig, RefinementConfig, gcn_forward, graph_refine_loss,
                   init_gcn, train_gslm_phase)
from .local_model import (LMPhaseConfig, LocalModel, PseudoLabelSet, init_local_model,
                          lm_forward, most_confident, sample_pseudo_labels, train_lm_phase)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def evaluate(dist, labels, mask) -> tuple[float, float]:
    """Accuracy and macro-F1 of the argmax prediction on ``mask``.

    ``mask`` is a boolean mask or an index array. Classes with no support and
    no predictions contribute an F1 of 0.
    """
    dist = np.asarray(dist)
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, np.int64)
    if idx.size == 0:
        raise ValueError("cannot evaluate on an empty mask")
    y_true = np.asarray(labels)[idx]
    y_pred = dist[idx].argmax(axis=1)
    acc = accuracy_score(y_true, y_pred)
    f1 = f1_score(y_true, y_pred, labels=np.arange(dist.shape[1]), average="macro",
                  zero_division=0)
    return float(acc), float(f1)


def elbo_terms(q, p, labels, masks: SplitMasks) -> dict:
    """Components of the evidence lower bound under a factorized joint.

    The joint over labels is the product of the graph model's per-node
    conditionals, so ``E_q[log p(y_L, y_U)] = sum_L log p_m(y_m) + sum_U sum_c
    q_mc log p_mc`` and the entropy is that of the mean-field ``q`` on U.
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    L, U = masks.labeled, masks.unlabeled
    y = np.asarray(labels)[L]
    with np.errstate(divide="ignore"):
        log_lik = float(np.sum(np.log(p[L, y])))
    expected = float(np.sum(xlogy(q[U], p[U])))
    entropy = float(-np.sum(xlogy(q[U], q[U])))
    return {"log_likelihood_labeled": log_lik, "expected_log_unlabeled": expected,
            "expected_log_joint": log_lik + expected, "entropy": entropy,
            "elbo": log_lik + expected + entropy}


def elbo_estimate(q, p, labels, masks: SplitMasks) -> float:
    return elbo_terms(q, p, labels, masks)["elbo"]


@dataclass
class MetricsRecord:
    rounds: list = field(default_factory=list)

    def append(self, entry: dict) -> None:
        if self.rounds and entry["round"] <= self.rounds[-1]["round"]:
            raise ValueError("metrics must be appended in increasing round order")
        for key in ("lm_loss", "gslm_loss", "elbo"):
            v = entry.get(key)
            if v is not None and not np.isfinite(v):
                raise FloatingPointError(f"non-finite {key} in round {entry['round']}")
        self.rounds.append(entry)

    def to_dict(self) -> dict:
        return {"rounds": self.rounds}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "head", "split", "accuracy", "f1", "lm_loss", "gslm_loss",
                    "refine_loss", "elbo"])
        for r in self.rounds:
            for head in ("lm", "gslm"):
                for split, (acc, f1) in r[head].items():
                    w.writerow([r["round"], head, split, repr(acc), repr(f1), _fmt(r["lm_loss"]),
                                _fmt(r["gslm_loss"]), _fmt(r["refine_loss"]), _fmt(r["elbo"])])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(v)


@dataclass
class EmState:
    round: int
    lm: LocalModel
    gcn: GcnModel
    adjacency: sp.csr_matrix
    embeddings: np.ndarray
    q: np.ndarray
    p: np.ndarray
    pseudo_from_lm: Optional[PseudoLabelSet] = None
    pseudo_from_gslm: Optional[PseudoLabelSet] = None
    # per-head selection by validation accuracy across rounds
    best_lm_round: int = 0
    best_gslm_round: int = 0
    best_lm: Optional[LocalModel] = None
    best_gcn: Optional[GcnModel] = None
    best_q: Optional[np.ndarray] = None
    best_p: Optional[np.ndarray] = None
    best_adjacency: Optional[sp.csr_matrix] = None
    best_embeddings: Optional[np.ndarray] = None
    best_lm_val: float = -np.inf
    best_gslm_val: float = -np.inf
    trace: list = field(default_factory=list)


# --- helpers -----------------------------------------------------------------------

def featurize(g: TextAttributedGraph, config: TrainConfig):
    feat = TextFeaturizer(config.features.max_features, config.features.method)
    texts = g.texts(config.features.source)
    return feat.fit(texts).transform(texts), feat


def training_labels(labels, masks: SplitMasks) -> np.ndarray:
    """Labels visible to training: the train split only, ``-1`` elsewhere."""
    y = np.full(masks.node_count, UNLABELED, dtype=np.int64)
    y[masks.train] = np.asarray(labels)[masks.train]
    return y


def _lm_cfg(config: TrainConfig, alpha: float, seed: int) -> LMPhaseConfig:
    c = config.lm
    return LMPhaseConfig(lr=c.lr, epochs=c.epochs, alpha=alpha, weight_decay=c.weight_decay,
                         optimizer=c.optimizer, momentum=c.momentum, distill_mode=c.distill_mode,
                         seed=seed)


def _gslm_cfg(config: TrainConfig, beta: float, seed: int) -> GSLMPhaseConfig:
    c = config.gslm
    return GSLMPhaseConfig(lr=c.lr, epochs=c.epochs, beta=beta, weight_decay=c.weight_decay,
                           optimizer=c.optimizer, seed=seed)


def refinement_config(config: TrainConfig) -> RefinementConfig:
    c = config.gslm
    return RefinementConfig(c.strategy, c.gamma_smooth, c.gamma_degree, c.gamma_sparse,
                            c.adjacency_lr)


def _structure(A_orig, H, config: TrainConfig):
    A_sim = build_knn_graph(H, config.graph.k, config.graph.threshold)
    if config.scenario == "TI" or A_orig is None:
        return A_sim, A_sim
    return fuse_graphs(A_orig, A_sim, config.graph.lam), A_sim


def _head_metrics(dist, labels, masks: SplitMasks) -> dict:
    out = {}
    for split in SPLITS:
        idx = getattr(masks, split)
        if idx.size:
            out[split] = list(evaluate(dist, labels, idx))
    return out


class _Runner:
    """Holds the shared pieces of one run (features, labels, seeds)."""

    def __init__(self, X, labels, masks: SplitMasks, A_orig, config: TrainConfig,
                 num_classes: Optional[int] = None):
        self.X = np.asarray(X, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.masks = masks
        self.y = training_labels(self.labels, masks)
        self.A_orig = None if config.scenario == "TI" else A_orig
        self.config = config
        self.C = int(num_classes) if num_classes else int(self.labels.max()) + 1

    def seed(self, *keys) -> int:
        return derive_seed(self.config.seed, *keys)

    def bootstrap(self) -> LocalModel:
        c = self.config.lm
        lm = init_local_model(self.X.shape[1], c.hidden_dim, self.C, self.seed("lm_init"),
                              c.dropout)
        return train_lm_phase(lm, self.X, None, self.y, self.masks,
                              _lm_cfg(self.config, 0.0, self.seed("lm_phase", 0)))

    def new_gcn(self, in_dim: int) -> GcnModel:
        c = self.config.gslm
        return init_gcn(in_dim, c.hidden, self.C, self.seed("gslm_init"), c.dropout)

    def record(self, state: EmState, metrics: MetricsRecord, r, lm_loss, gslm_loss, refine):
        lm_m = _head_metrics(state.q, self.labels, self.masks)
        gs_m = _head_metrics(state.p, self.labels, self.masks)
        elbo = elbo_estimate(state.q, state.p, self.labels, self.masks) \
            if self.masks.unlabeled.size else None
        entry = {"round": r, "lm_loss": lm_loss, "gslm_loss": gslm_loss, "refine_loss": refine,
                 "elbo": elbo if elbo is None or np.isfinite(elbo) else None,
                 "lm": lm_m, "gslm": gs_m}
        metrics.append(entry)
        state.trace.append(entry)
        self._select(state, entry)

    def _select(self, state: EmState, entry: dict):
        # ties go to the later round
        lm_val = entry["lm"].get("val", [0.0])[0]
        if lm_val >= state.best_lm_val:
            state.best_lm_val, state.best_lm_round = lm_val, entry["round"]
            state.best_lm, state.best_q = state.lm, state.q
        gs_val = entry["gslm"].get("val", [0.0])[0]
        if gs_val >= state.best_gslm_val:
            state.best_gslm_val, state.best_gslm_round = gs_val, entry["round"]
            state.best_gcn, state.best_p = state.gcn, state.p
            state.best_adjacency, state.best_embeddings = state.adjacency, state.embeddings


def fit_langgsl(X, labels, masks: SplitMasks, A_orig, config: TrainConfig,
                num_classes: Optional[int] = None):
    """Array-level driver behind :func:`run_langgsl`. Returns ``(EmState, MetricsRecord)``.

    With ``em_rounds == 0`` both heads are the supervised baselines. Otherwise
    rounds ``1..em_rounds`` exchange pseudo-labels, and each head's reported
    model is the round with the best validation accuracy among those rounds.
    """
    run = _Runner(X, labels, masks, A_orig, config, num_classes)
    cfg = config
    metrics = MetricsRecord()
    refinement = refinement_config(cfg)
    U = masks.unlabeled

    lm = run.bootstrap()
    H, q = lm_forward(lm, run.X)
    A_fused, A_sim = _structure(run.A_orig, H, cfg)
    gcn = run.new_gcn(H.shape[1])

    if cfg.em_rounds == 0:
        gcn, A_ref = train_gslm_phase(gcn, A_fused, H, run.y, None, masks, refinement,
                                      _gslm_cfg(cfg, 0.0, run.seed("gslm_phase", 0)),
                                      candidate=A_sim)
        p = gcn_forward(gcn, normalize_adjacency(A_ref), H)
        state = EmState(0, lm, gcn, A_ref, H, q, p)
        refine = graph_refine_loss(A_ref, H, refinement.gamma_smooth, refinement.gamma_degree,
                                   refinement.gamma_sparse) if refinement.strategy == "joint" else None
        run.record(state, metrics, 0, lm.loss_history[-1] if lm.loss_history else None,
                   gcn.loss_history[-1] if gcn.loss_history else None, refine)
        return state, metrics

    state = None
    for r in range(1, cfg.em_rounds + 1):
        # (1) local model view of the nodes
        H, q = lm_forward(lm, run.X)
        # (2) structure from embeddings
        if cfg.graph.refresh == "per_round" or r == 1:
            A_fused, A_sim = _structure(run.A_orig, H, cfg)
        # (3) local pseudo-labels for the graph phase
        chosen = most_confident(q, U, cfg.gslm.pl_ratio)
        pseudo_lm = sample_pseudo_labels(q, chosen, cfg.gslm.pl_mode,
                                         run.seed("pseudo_lm", r), "from_lm", r)
        soft = q if cfg.gslm.target_mode == "soft" else None
        # (4) graph phase
        gcn, A_ref = train_gslm_phase(gcn, A_fused, H, run.y, pseudo_lm, masks, refinement,
                                      _gslm_cfg(cfg, cfg.gslm.beta, run.seed("gslm_phase", r)),
                                      soft_targets=soft, candidate=A_sim)
        p = gcn_forward(gcn, normalize_adjacency(A_ref), H)
        distill = most_confident(p, U, cfg.lm.pl_ratio)
        pseudo_gslm = PseudoLabelSet(distill, p[distill].argmax(axis=1), "from_gslm", r)
        # (5) local phase distilling the graph posterior
        lm = train_lm_phase(lm, run.X, p, run.y, masks,
                            _lm_cfg(cfg, cfg.lm.alpha, run.seed("lm_phase", r)),
                            distill_nodes=distill)
        H_new, q_new = lm_forward(lm, run.X)
        refine = graph_refine_loss(A_ref, H, refinement.gamma_smooth, refinement.gamma_degree,
                                   refinement.gamma_sparse) if refinement.strategy == "joint" else None
        if state is None:
            state = EmState(r, lm, gcn, A_ref, H, q_new, p, pseudo_lm, pseudo_gslm)
        else:
            state.round, state.lm, state.gcn, state.adjacency = r, lm, gcn, A_ref
            state.embeddings, state.q, state.p = H, q_new, p
            state.pseudo_from_lm, state.pseudo_from_gslm = pseudo_lm, pseudo_gslm
        run.record(state, metrics, r, lm.loss_history[-1], gcn.loss_history[-1], refine)
    return state, metrics


def run_decoupled_baselines(X, labels, masks: SplitMasks, A_orig, config: TrainConfig,
                            num_classes: Optional[int] = None):
    """Same schedule as :func:`fit_langgsl` with no pseudo-label exchange at all.

    Returns ``(q, p)`` of the final round.
    """
    run = _Runner(X, labels, masks, A_orig, config, num_classes)
    cfg = config
    refinement = refinement_config(cfg)
    lm = run.bootstrap()
    H, q = lm_forward(lm, run.X)
    A_fused, A_sim = _structure(run.A_orig, H, cfg)
    gcn = run.new_gcn(H.shape[1])
    rounds = max(cfg.em_rounds, 0)
    if rounds == 0:
        gcn, A_ref = train_gslm_phase(gcn, A_fused, H, run.y, None, masks, refinement,
                                      _gslm_cfg(cfg, 0.0, run.seed("gslm_phase", 0)),
                                      candidate=A_sim)
        return q, gcn_forward(gcn, normalize_adjacency(A_ref), H)
    for r in range(1, rounds + 1):
        H, _ = lm_forward(lm, run.X)
        if cfg.graph.refresh == "per_round" or r == 1:
            A_fused, A_sim = _structure(run.A_orig, H, cfg)
        gcn, A_ref = train_gslm_phase(gcn, A_fused, H, run.y, None, masks, refinement,
                                      _gslm_cfg(cfg, 0.0, run.seed("gslm_phase", r)),
                                      candidate=A_sim)
        p = gcn_forward(gcn, normalize_adjacency(A_ref), H)
        lm = train_lm_phase(lm, run.X, None, run.y, masks,
                            _lm_cfg(cfg, 0.0, run.seed("lm_phase", r)))
    _, q = lm_forward(lm, run.X)
    return q, p


def run_langgsl(g: TextAttributedGraph, masks: SplitMasks, config: TrainConfig):
    """Featurize ``g`` and run the alternating training. Returns ``(EmState, MetricsRecord)``."""
    if masks.node_count != g.node_count:
        raise ValueError("split masks do not match the graph")
    if np.any(g.labels[masks.train] == UNLABELED):
        raise ValueError("every training node needs a label")
    X, _ = featurize(g, config)
    A = g.adjacency if config.scenario == "TR" else None
    return fit_langgsl(X, g.labels, masks, A, config, g.num_classes)


def vanilla_gcn(X, labels, masks: SplitMasks, A, config: TrainConfig,
                num_classes: Optional[int] = None) -> np.ndarray:
    """Supervised GCN on the raw features and the given graph; returns its label distribution."""
    run = _Runner(X, labels, masks, A, config, num_classes)
    gcn = run.new_gcn(run.X.shape[1])
    gcn, _ = train_gslm_phase(gcn, A, run.X, run.y, None, masks, RefinementConfig("implicit"),
                              _gslm_cfg(config, 0.0, run.seed("vanilla_gcn")))
    return gcn_forward(gcn, normalize_adjacency(A), run.X)


# --- estimator ------------------------------------------------------------------------

class LangGSLClassifier(ClassifierMixin, BaseEstimator):
    """Mutual learning of a feature MLP and a GCN, exposed as a transductive classifier.

    ``fit(X, y, adjacency=None)``: rows of ``y`` equal to ``-1`` are unlabeled.
    Passing ``val_mask`` enables validation-based round selection. Without an
    adjacency the graph is inferred from embeddings alone. ``predict_proba``
    returns the graph head unless ``head="lm"``.
    """

    def __init__(self, config: Optional[TrainConfig] = None, head: str = "gslm"):
        self.config = config
        self.head = head

    def fit(self, X, y, adjacency=None, val_mask=None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        cfg = self.config or TrainConfig()
        train = np.flatnonzero(y != UNLABELED)
        val = np.zeros(0, np.int64) if val_mask is None else np.flatnonzero(val_mask)
        train = np.setdiff1d(train, val)
        masks = SplitMasks(train, val, np.zeros(0, np.int64), len(y))
        if adjacency is None:
            cfg = replace(cfg, scenario="TI")
        self.classes_ = np.arange(int(y.max()) + 1)
        self.state_, self.metrics_ = fit_langgsl(X, y, masks, adjacency, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X=None):
        check_is_fitted(self, "state_")
        return self.state_.best_q if self.head == "lm" else self.state_.best_p

    def predict(self, X=None):
        return self.predict_proba(X).argmax(axis=1)
