"""Feature importance ranking by gradient attribution on the encoded symbols."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .channel import to_complex, to_real
from .errors import ShapeError
from .nncore import frozen
from .semcodec.codec import TASKS


@dataclass
class ImportancePlan:
    ind: np.ndarray
    per_task: list = field(default_factory=list)
    weights: tuple = ()

    def __post_init__(self):
        self.ind = np.asarray(self.ind, dtype=float)

    @property
    def order(self):
        """Positions by descending importance, ties to the lower index."""
        return np.argsort(-self.ind, kind="stable")

    def to_csv(self, path):
        rank = np.empty(self.ind.size, dtype=int)
        rank[self.order] = np.arange(self.ind.size)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "ind", "rank"])
            for pos in range(self.ind.size):
                w.writerow([pos, repr(float(self.ind[pos])), int(rank[pos])])

    @classmethod
    def from_csv(cls, path) -> "ImportancePlan":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ind = np.zeros(len(rows))
        for r in rows:
            ind[int(r["position"])] = float(r["ind"])
        return cls(ind)


@dataclass
class SelectionMask:
    positions: np.ndarray
    index: int
    already_sent: frozenset


def select_features(ind, block_size, already_received=(), index=0) -> SelectionMask:
    """Top positions by importance that have not been received yet.

    With nothing received this is the first-transmission top-B choice; later
    calls give the incremental pool head. Returns fewer than ``block_size``
    positions when the pool runs out.
    """
    order = ind.order if isinstance(ind, ImportancePlan) else np.argsort(-np.asarray(ind, float), kind="stable")
    if block_size > order.size:
        raise ShapeError("block size exceeds the number of features")
    sent = frozenset(int(p) for p in already_received)
    pool = [int(p) for p in order if int(p) not in sent]
    return SelectionMask(np.array(pool[:block_size], dtype=int), index, sent)


def _normalize_rows_backward(f, grad, power):
    # z = sqrt(P L) f / ||f|| per row, complex gradient convention
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    u = f / norm
    proj = np.real(np.sum(np.conj(u) * grad, axis=-1, keepdims=True))
    return np.sqrt(power * f.shape[-1]) / norm * (grad - u * proj)


def attribution(codec, x, k, power=1.0, trained=True):
    """Per-item ``|dc_km/dRe f_i| + |dc_km/dIm f_i|`` for task ``k``; shape (n, L).

    ``f`` is sent whole over a noiseless, unit-gain channel and ``m`` is the
    argmax class of that pass.
    """
    if not trained:
        warnings.warn("importance computed on an untrained pipeline", UserWarning, stacklevel=2)
    if k not in range(len(TASKS)):
        raise ShapeError(f"unknown task {k}")
    x = np.atleast_2d(x)
    f = to_complex(codec.jsc_encode(codec.encode_semantic(x)))
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    z = np.sqrt(power * f.shape[-1]) * f / norm
    rp = codec.receiver_forward(to_real(z))
    probs = rp.probs[k]
    m = np.argmax(probs, axis=-1)
    n = probs.shape[0]
    pm = probs[np.arange(n), m]
    # d p_m / d logits = p_m (e_m - p)
    g_logits = -pm[:, None] * probs
    g_logits[np.arange(n), m] += pm
    grads = [np.zeros_like(lg) for lg in rp.logits]
    grads[k] = g_logits
    with frozen(codec.receiver_nets()):
        g_buf = codec.receiver_backward(rp, grads)
    g_f = _normalize_rows_backward(f, to_complex(g_buf), power)
    return np.abs(g_f.real) + np.abs(g_f.imag)


def importance_per_task(codec, x, k, power=1.0, trained=True):
    """Attribution vector for task ``k`` averaged over the rows of ``x``."""
    return attribution(codec, x, k, power, trained).mean(axis=0)


def aggregate_importance(per_task, weights):
    per_task = [np.asarray(v, dtype=float) for v in per_task]
    if len(per_task) != len(weights):
        raise ShapeError("need one weight per task")
    if len({v.shape for v in per_task}) != 1:
        raise ShapeError("attribution vectors differ in length")
    return sum(w * v for w, v in zip(weights, per_task))


def compute_importance(codec, x, weights, power=1.0) -> ImportancePlan:
    per_task = [importance_per_task(codec, x, k, power) for k in range(len(TASKS))]
    return ImportancePlan(aggregate_importance(per_task, weights), per_task, tuple(weights))
