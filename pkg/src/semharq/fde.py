"""Feature distortion evaluation.

A four-layer statistic network is trained as a Donsker-Varadhan mutual
information critic on ``[s ; s_hat]`` pairs. Its third (sigmoid) layer is
read out per feature as a similarity score; one minus that score is the
distortion of a received symbol. Distortions are thresholded into the binary
retransmission request, and a multi-sample Gumbel-softmax relaxation supplies
the backward pass for that request.

At inference only the received block exists, so the ``s`` half of the input
is zero and the ``s_hat`` half carries the magnitude of each zero-padded
received symbol.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .channel import ComplexSymbolBlock
from .errors import InvariantError, ShapeError
from .nncore import Adam, Mlp, as_rng, logsumexp, sample_gumbel, softmax, softmax_backward

MAGIC = b"SHQF"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")  # 16 bytes: magic, version, N


class UntrainedWarning(UserWarning):
    """Distortion scores requested from a network that never finished MI training."""


class DistortionNet:
    """Statistic network ``2N -> hidden -> bottleneck -> N (sigmoid) -> 1``."""

    def __init__(self, n_features, rng=0, hidden=None, bottleneck=None, zero=False):
        self.n = int(n_features)
        self.hidden = hidden or self.n
        self.bottleneck = bottleneck or max(self.n // 4, 1)
        widths = [2 * self.n, self.hidden, self.bottleneck, self.n, 1]
        acts = ["relu", "relu", "sigmoid", "linear"]
        self.net = Mlp.build(widths, acts, None if zero else as_rng(rng).child("fde"))
        self.trained = False

    @property
    def is_default_shape(self):
        return self.hidden == self.n and self.bottleneck == max(self.n // 4, 1)

    def nets(self):
        return [self.net]

    def statistic_forward(self, pairs):
        """``pairs`` is (batch, 2N); returns T of shape (batch,) and the cache."""
        pairs = np.atleast_2d(pairs)
        if pairs.shape[-1] != 2 * self.n:
            raise ShapeError(f"statistic input width {pairs.shape[-1]} != {2 * self.n}")
        out, cache = self.net.run(pairs)
        return out[:, 0], cache

    def statistic_backward(self, cache, grad_t):
        return self.net.backward(np.asarray(grad_t)[:, None], cache)

    def similarity_forward(self, inputs):
        """Layer-3 sigmoid activations, shape (batch, N), with cache."""
        inputs = np.atleast_2d(inputs)
        if inputs.shape[-1] != 2 * self.n:
            raise ShapeError(f"input width {inputs.shape[-1]} != {2 * self.n}")
        return self.net.run(inputs, upto=3)

    def similarity_backward(self, cache, grad_sim):
        return self.net.backward(grad_sim, cache)

    # --- serialisation

    def to_bytes(self) -> bytes:
        if not self.is_default_shape:
            raise ValueError("only the default layer widths are serialisable")
        body = b"".join(p.astype("<f8").tobytes() for p in self.net.params())
        return _HEADER.pack(MAGIC, VERSION, self.n) + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DistortionNet":
        magic, version, n = _HEADER.unpack_from(raw)
        if magic != MAGIC or version != VERSION:
            raise ValueError("not a distortion-network file")
        f = cls(n, zero=True)
        off = _HEADER.size
        for p in f.net.params():
            p[...] = np.frombuffer(raw, "<f8", p.size, off).reshape(p.shape)
            off += 8 * p.size
        if off != len(raw):
            raise ValueError("trailing bytes in distortion-network file")
        f.trained = True
        return f


def pad_align(block: ComplexSymbolBlock, n_features):
    """Scatter a received block into a zero-padded 2N-real vector (real half, imag half)."""
    pos = block.positions
    if np.unique(pos).size != pos.size:
        raise InvariantError("duplicate positions in received block")
    if np.any(pos >= n_features):
        raise InvariantError("position beyond feature length")
    out = np.zeros(2 * n_features)
    out[pos] = block.symbols.real
    out[n_features + pos] = block.symbols.imag
    return out


def received_magnitude(padded):
    """Per-symbol magnitude of a padded 2N-real vector (or batch), width N."""
    padded = np.asarray(padded, dtype=float)
    n = padded.shape[-1] // 2
    return np.hypot(padded[..., :n], padded[..., n:])


def inference_input(padded):
    mag = received_magnitude(padded)
    return np.concatenate([np.zeros_like(mag), mag], axis=-1)


def mine_statistic(f: DistortionNet, s, s_hat):
    s = np.asarray(s, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    if s.shape != s_hat.shape or s.shape[-1] != f.n:
        raise ShapeError("s and s_hat must both have width N")
    t, _ = f.statistic_forward(np.concatenate([s, s_hat], axis=-1))
    return float(t[0]) if s.ndim == 1 else t


# ---------------------------------------------------------------------------
# mutual information estimation


@dataclass
class MineBatch:
    joint: np.ndarray      # (n, 2N) aligned [s ; s_hat]
    marginal: np.ndarray   # (k n, 2N) [s_i ; s_hat_pi(i)] over k derangements pi


def derangement(n, rng):
    """Random permutation with no fixed points: a single cycle through a shuffled order."""
    if n < 2:
        raise ValueError("need at least two samples for a derangement")
    order = as_rng(rng).permutation(n)
    perm = np.empty(n, dtype=int)
    perm[order] = np.roll(order, -1)
    return perm


def make_mine_batch(s, s_hat, rng, shuffles=1) -> MineBatch:
    """Joint pairs plus ``shuffles`` independent derangements as product-of-marginals samples.

    More shuffles lower the variance of the marginal term without changing its expectation.
    """
    s = np.atleast_2d(s)
    s_hat = np.atleast_2d(s_hat)
    if s.shape != s_hat.shape:
        raise ShapeError("s and s_hat batches differ in shape")
    if shuffles < 1:
        raise ValueError("need at least one shuffle")
    rng = as_rng(rng)
    if shuffles == 1:
        perms = [derangement(s.shape[0], rng)]
    else:
        perms = [derangement(s.shape[0], rng.child("shuffle", i)) for i in range(shuffles)]
    marginal = np.concatenate([np.concatenate([s, s_hat[p]], axis=1) for p in perms], axis=0)
    return MineBatch(np.concatenate([s, s_hat], axis=1), marginal)


def estimate_mi(f, batch: MineBatch):
    """Donsker-Varadhan estimate ``mean_joint T - log mean_marginal exp T`` in nats."""
    if batch.joint.shape[0] < 2 or batch.marginal.shape[0] < 2:
        raise ValueError("batches must hold at least two samples")
    t_joint, _ = f.statistic_forward(batch.joint)
    t_marg, _ = f.statistic_forward(batch.marginal)
    return float(np.mean(t_joint) - (logsumexp(t_marg) - np.log(t_marg.size)))


def mine_loss_backward(f, batch: MineBatch):
    """Accumulates gradients of ``-I_hat`` into ``f``; returns ``I_hat``."""
    both = np.concatenate([batch.joint, batch.marginal], axis=0)
    t, cache = f.statistic_forward(both)
    nj = batch.joint.shape[0]
    t_joint, t_marg = t[:nj], t[nj:]
    lse = logsumexp(t_marg)
    mi = float(np.mean(t_joint) - (lse - np.log(t_marg.size)))
    g = np.empty_like(t)
    g[:nj] = -1.0 / nj
    g[nj:] = np.exp(t_marg - lse)
    f.statistic_backward(cache, g)
    return mi


def train_mine(f, sample_pairs, steps, batch_size=256, lr=1e-3, rng=0):
    """Fit ``f`` as a standalone critic; ``sample_pairs(rng, n)`` returns aligned ``(s, s_hat)``.

    Returns the per-step training estimates.
    """
    rng = as_rng(rng)
    opt = Adam([f.net], lr)
    trace = []
    for step in range(steps):
        s, s_hat = sample_pairs(rng.child("pairs", step), batch_size)
        opt.zero_grad()
        trace.append(mine_loss_backward(f, make_mine_batch(s, s_hat, rng.child("shuffle", step))))
        opt.step()
    f.trained = True
    return trace


# ---------------------------------------------------------------------------
# distortion scoring and feedback


def distortion_vector(f: DistortionNet, padded, positions):
    """``1 - sigmoid-layer output`` gathered at the block's positions."""
    if not f.trained:
        warnings.warn("distortion network has not been trained", UntrainedWarning, stacklevel=2)
    sim, _ = f.similarity_forward(inference_input(padded))
    return 1.0 - sim[0, np.asarray(positions, dtype=int)]


def quantize_feedback(d, threshold):
    """Binary request ``p_i = [d_i >= t]`` and the count R."""
    p = (np.asarray(d, dtype=float) >= threshold).astype(np.int8)
    return p, int(p.sum())


def top_order(values, mask=None):
    """Indices sorted by value descending, ties to the lowest index; masked entries last."""
    values = np.asarray(values, dtype=float)
    key = -values if mask is None else np.where(mask, -values, np.inf)
    return np.argsort(key, axis=-1, kind="stable")


@dataclass
class RelaxCache:
    keep: list        # per r: (n, W) float, 0 where the r-1 largest were zeroed
    v: list           # per r: softmax of the zeroed distortion
    w: list           # per r: relaxed sample
    active: list      # per r: (n,) bool, row has R >= r
    mask: np.ndarray
    tau: float


def relax_batch(d, mask, counts, tau, gumbel):
    """Batched multi-sample Gumbel-softmax over masked rows.

    ``d`` and ``mask`` are (n, W); ``counts`` the per-row R; ``gumbel`` has
    shape (max R, n, W). Returns ``(w_sum, cache)``.
    """
    d = np.atleast_2d(np.asarray(d, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    counts = np.atleast_1d(np.asarray(counts, dtype=int))
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n, width = d.shape
    order = top_order(d, mask)
    cache = RelaxCache([], [], [], [], mask, tau)
    w_sum = np.zeros_like(d)
    rows = np.arange(n)
    safe = np.any(mask, axis=1)
    for r in range(1, int(counts.max(initial=0)) + 1):
        active = (counts >= r) & safe
        keep = np.ones_like(d)
        if r > 1:
            keep[rows[:, None], order[:, : r - 1]] = 0.0
        dr = d * keep
        v = _masked_softmax(dr, mask)
        with np.errstate(divide="ignore"):
            logv = np.where(mask, np.log(np.where(mask, v, 1.0)), -np.inf)
        a = np.where(mask, (logv + gumbel[r - 1]) / tau, -np.inf)
        w = _masked_softmax(a, mask)
        w = np.where(active[:, None], w, 0.0)
        w_sum += w
        cache.keep.append(keep)
        cache.v.append(v)
        cache.w.append(w)
        cache.active.append(active)
    return w_sum, cache


def _masked_softmax(x, mask):
    out = np.zeros_like(x)
    ok = np.any(mask, axis=1)
    if ok.any():
        out[ok] = softmax(x[ok], mask=mask[ok])
    return out


def relax_backward(cache: RelaxCache, grad_w):
    """Gradient of a loss w.r.t. ``d`` given its gradient w.r.t. the relaxed sum."""
    grad_d = np.zeros_like(grad_w)
    for keep, v, w, active in zip(cache.keep, cache.v, cache.w, cache.active):
        g = np.where(active[:, None], grad_w, 0.0)
        ga = softmax_backward(w, g) / cache.tau
        ga = np.where(cache.mask, ga, 0.0)
        # log softmax: d(log v_i)/d x_j = delta_ij - v_j
        g_dr = ga - v * np.sum(ga, axis=1, keepdims=True)
        grad_d += keep * np.where(cache.mask, g_dr, 0.0)
    return grad_d


def multi_gumbel_relax(d, count, tau, rng):
    """Relaxed R-hot sample for one distortion vector.

    Returns ``(samples, w_sum)`` where ``samples`` is (R, B): row r-1 is the
    softmax of ``(log softmax(d with its r-1 largest entries zeroed) + g_r) / tau``.
    """
    d = np.asarray(d, dtype=float).reshape(-1)
    if count == 0:
        return np.zeros((0, d.size)), np.zeros(d.size)
    if not 1 <= count <= d.size:
        raise ValueError(f"R must lie in 1..{d.size}")
    rng = as_rng(rng)
    g = np.stack([sample_gumbel(rng, d.size) for _ in range(count)])[:, None, :]
    w_sum, cache = relax_batch(d[None], np.ones((1, d.size), bool), [count], tau, g)
    return np.stack([w[0] for w in cache.w]), w_sum[0]


class StraightThrough:
    """Hard value in the forward pass, relaxed gradient in the backward pass.

    Numerically ``w + stop_gradient(p - w)``: ``value`` is exactly ``p`` and
    :meth:`backward` hands an upstream gradient to the relaxation unchanged.
    """

    def __init__(self, hard, relaxed):
        hard = np.asarray(hard, dtype=float)
        relaxed = np.asarray(relaxed, dtype=float)
        if hard.shape != relaxed.shape:
            raise ShapeError("hard and relaxed values differ in shape")
        self.value = hard.copy()
        self.relaxed = relaxed

    def backward(self, grad):
        return np.asarray(grad, dtype=float)


def straight_through_bind(p, w):
    return StraightThrough(p, w)


def anneal_temperature(epoch, tau0=1.0, rate=0.95, tau_min=0.1):
    if tau0 <= 0 or not 0 < rate <= 1:
        raise ValueError("need tau0 > 0 and rate in (0, 1]")
    return max(tau_min, tau0 * rate ** epoch)
