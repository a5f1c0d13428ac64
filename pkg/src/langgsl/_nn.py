"""Numerical building blocks shared by both heads."""
from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(z: np.ndarray, activation: str) -> np.ndarray:
    return (z > 0).astype(z.dtype) if activation == "relu" else np.ones_like(z)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout: kept units are scaled by 1/(1-rate)."""
    if rate <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _xent_rows(targets: np.ndarray, log_probs: np.ndarray) -> np.ndarray:
    # 0 * log 0 counts as 0
    with np.errstate(invalid="ignore"):
        prod = np.where(targets > 0, targets * log_probs, 0.0)
    return -prod.sum(axis=1)


def two_term_loss(log_probs, labeled, labeled_targets, other, other_targets, weight) -> float:
    """``weight * mean_other CE + (1 - weight) * mean_labeled CE``.

    A term whose coefficient is zero is skipped entirely (its node set may
    then be empty).
    """
    loss = 0.0
    if weight > 0:
        if len(other) == 0:
            raise ValueError("pseudo-label/distillation term has weight > 0 but no nodes")
        loss += weight * _xent_rows(other_targets, log_probs[other]).mean()
    if weight < 1:
        if len(labeled) == 0:
            raise ValueError("supervised term has weight > 0 but no labeled nodes")
        loss += (1.0 - weight) * _xent_rows(labeled_targets, log_probs[labeled]).mean()
    return float(loss)


def two_term_logit_grad(probs, labeled, labeled_targets, other, other_targets, weight) -> np.ndarray:
    """Gradient of :func:`two_term_loss` w.r.t. the logits (rows sum-to-one targets)."""
    g = np.zeros_like(probs)
    if weight > 0:
        g[other] += weight / len(other) * (probs[other] - other_targets)
    if weight < 1:
        g[labeled] += (1.0 - weight) / len(labeled) * (probs[labeled] - labeled_targets)
    return g


class Optimizer:
    """Minimal first-order optimizer over a dict of named arrays.

    ``kind`` is ``"adam"`` or ``"sgd"`` (with optional heavy-ball momentum).
    ``weight_decay`` adds ``wd * param`` to the gradient of the names listed in
    ``decay``.
    """

    def __init__(self, lr: float, kind: str = "adam", momentum: float = 0.0,
                 weight_decay: float = 0.0, decay=(), betas=(0.9, 0.999), eps=1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.lr, self.kind, self.momentum = lr, kind, momentum
        self.weight_decay, self.decay = weight_decay, set(decay)
        self.betas, self.eps = betas, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None or self.lr == 0:
                out[name] = p
                continue
            if self.weight_decay and name in self.decay:
                g = g + self.weight_decay * p
            if self.kind == "sgd":
                if self.momentum:
                    buf = self.m.get(name)
                    buf = g if buf is None else self.momentum * buf + g
                    self.m[name] = buf
                    g = buf
                out[name] = p - self.lr * g
            else:
                b1, b2 = self.betas
                m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
                v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
                self.m[name], self.v[name] = m, v
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                out[name] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out
