"""Task and channel losses with their gradients.

All batch losses are means over the batch rows; the returned gradients are
w.r.t. the argument named in each docstring.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..nncore import softmax

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    reid: float = 1.0
    color: float = 0.125
    vtype: float = 0.125

    def __post_init__(self):
        if min(self.reid, self.color, self.vtype) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self):
        return (self.reid, self.color, self.vtype)


def one_hot(labels, m):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros(labels.shape + (m,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def loss_cross_entropy(y, probs):
    """Categorical cross-entropy ``-sum y log p``; returns ``(loss, d loss / d probs)``."""
    y = np.asarray(y, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if y.shape != probs.shape:
        raise ShapeError("label and prediction shapes differ")
    clamped = np.maximum(probs, LOG_CLAMP)
    rows = 1 if probs.ndim == 1 else probs.shape[0]
    loss = -np.sum(y * np.log(clamped)) / rows
    grad = np.where(probs > LOG_CLAMP, -y / clamped, 0.0) / rows
    return float(loss), grad


def softmax_cross_entropy(logits, labels):
    """Cross-entropy of integer labels against softmax(logits); gradient w.r.t. logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    probs = softmax(logits)
    n = logits.shape[0]
    picked = np.maximum(probs[np.arange(n), labels], LOG_CLAMP)
    loss = -np.mean(np.log(picked))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def loss_channel_mse(s, s_hat):
    """``mean((s - s_hat)^2)``; returns ``(loss, d/d s_hat)``. d/d s is the negation."""
    s = np.asarray(s, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    if s.shape != s_hat.shape:
        raise ShapeError("feature vectors differ in shape")
    diff = s_hat - s
    loss = np.mean(diff ** 2)
    return float(loss), 2.0 * diff / diff.size


@dataclass
class TripletResult:
    loss: float
    grad: np.ndarray
    valid_anchors: int

    @property
    def degenerate(self):
        """True when the batch had no anchor with both a positive and a negative."""
        return self.valid_anchors == 0


def pairwise_distances(emb):
    diff = emb[:, None, :] - emb[None, :, :]
    sq = np.sum(diff ** 2, axis=-1)
    return np.sqrt(np.maximum(sq, 1e-12)), diff


def loss_triplet_hard(embeddings, labels, margin=0.3) -> TripletResult:
    """Batch-hard triplet loss: hardest positive and hardest negative per anchor.

    Averaged over anchors that have at least one positive and one negative;
    the gradient is w.r.t. ``embeddings``.
    """
    emb = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    n = emb.shape[0]
    dist, diff = pairwise_distances(emb)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    grad = np.zeros_like(emb)
    if not valid.any():
        return TripletResult(0.0, grad, 0)
    anchors = np.flatnonzero(valid)
    hp = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hn = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    total = 0.0
    scale = 1.0 / anchors.size
    for a in anchors:
        p, q = hp[a], hn[a]
        value = dist[a, p] - dist[a, q] + margin
        if value <= 0.0:
            continue
        total += value
        # d||a-p||/da = (a-p)/||a-p||; zero-distance pairs contribute no direction
        gp = diff[a, p] / dist[a, p] if dist[a, p] > 1e-6 else 0.0
        gq = diff[a, q] / dist[a, q] if dist[a, q] > 1e-6 else 0.0
        grad[a] += scale * (gp - gq)
        grad[p] -= scale * gp
        grad[q] += scale * gq
    return TripletResult(total * scale, grad, int(anchors.size))


@dataclass
class MultitaskLoss:
    total: float
    parts: dict
    grad_logits: list
    grad_embedding: np.ndarray


def loss_multitask(logits, embedding, labels, weights: LossWeights = LossWeights(), margin=0.3):
    """Weighted multi-task loss.

    ``reid * (triplet + CE_id) + color * CE_color + type * CE_type``. ``logits``
    is the list of three head outputs, ``embedding`` the ReID semantic-decoder
    output that feeds the triplet term, ``labels`` an (n, 3) int array.
    """
    labels = np.atleast_2d(np.asarray(labels, dtype=int))
    lam = weights.as_tuple()
    parts, grads = {}, []
    names = ("reid_ce", "color_ce", "type_ce")
    for k, (lg, name) in enumerate(zip(logits, names)):
        loss, g = softmax_cross_entropy(lg, labels[:, k])
        parts[name] = loss
        grads.append(lam[k] * g)
    trip = loss_triplet_hard(embedding, labels[:, 0], margin)
    parts["triplet"] = trip.loss
    total = lam[0] * (trip.loss + parts["reid_ce"]) + lam[1] * parts["color_ce"] + lam[2] * parts["type_ce"]
    return MultitaskLoss(float(total), parts, grads, lam[0] * trip.grad)
