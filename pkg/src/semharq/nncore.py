"""Small deterministic dense-network kernel.

Everything here works on float64 numpy arrays. Inputs may be a single vector
of shape ``(in,)`` or a batch of row vectors ``(batch, in)``; outputs follow
the same convention.
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "linear")
LEAKY_SLOPE = 0.01


# ---------------------------------------------------------------------------
# randomness


class SeededRng:
    """Seeded generator with labelled, order-independent substreams.

    ``SeededRng(7).child("channel", 3)`` always yields the same stream no matter
    how much the parent has been consumed.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        for part in self.path:
            words.extend(_label_words(part))
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def child(self, *labels) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(labels))

    # thin pass-throughs used all over the package
    def normal(self, size=None, scale=1.0):
        return self.generator.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def open_uniform(self, size=None):
        """Uniform draws on the open interval (0, 1)."""
        u = self.generator.random(size)
        return np.where(u <= 0.0, np.finfo(float).tiny, u)


def _label_words(part) -> list[int]:
    if isinstance(part, (int, np.integer)):
        v = int(part)
        return [1, v & 0xFFFFFFFF, (v >> 32) & 0xFFFFFFFF]
    digest = hashlib.sha256(str(part).encode()).digest()
    return [2] + [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def as_rng(rng) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    return SeededRng(int(rng))


# ---------------------------------------------------------------------------
# elementwise functions


def activate(tag: str, pre: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return np.maximum(pre, 0.0)
    if tag == "leaky_relu":
        return np.where(pre > 0.0, pre, LEAKY_SLOPE * pre)
    if tag == "sigmoid":
        return sigmoid(pre)
    if tag == "linear":
        return pre
    raise ValueError(f"unknown activation {tag!r}")


def activation_grad(tag: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Local derivative of the activation, evaluated elementwise."""
    if tag == "relu":
        return (pre > 0.0).astype(float)
    if tag == "leaky_relu":
        return np.where(pre > 0.0, 1.0, LEAKY_SLOPE)
    if tag == "sigmoid":
        return post * (1.0 - post)
    if tag == "linear":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {tag!r}")


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1, mask=None):
    """Max-subtracted softmax; entries where ``mask`` is False get probability 0."""
    x = np.asarray(x, dtype=float)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(prob, grad_out, axis=-1):
    """Vector-Jacobian product of softmax given its output."""
    inner = np.sum(grad_out * prob, axis=axis, keepdims=True)
    return prob * (grad_out - inner)


def logsumexp(x, axis=None):
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def sample_gumbel(rng, n) -> np.ndarray:
    """i.i.d. Gumbel(0, 1) samples, ``-ln(-ln u)`` with u on the open unit interval."""
    if np.prod(n) < 1:
        raise ShapeError("need at least one sample")
    return gumbel_from_uniform(as_rng(rng).open_uniform(n))


def gumbel_from_uniform(u):
    return -np.log(-np.log(u))


# ---------------------------------------------------------------------------
# layers


class DenseLayer:
    """``act(x @ W.T + b)`` with W of shape (out, in)."""

    def __init__(self, n_in: int, n_out: int, activation: str = "linear", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        if rng is None:
            self.weight = np.zeros((n_out, n_in))
        else:
            limit = np.sqrt(6.0 / (n_in + n_out))
            self.weight = as_rng(rng).uniform(-limit, limit, (n_out, n_in))
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"layer expects width {self.n_in}, got {x.shape[-1]}")
        pre = x @ self.weight.T + self.bias
        post = activate(self.activation, pre)
        return post, (x, pre, post)

    def backward(self, cache, grad_out):
        x, pre, post = cache
        g = grad_out * activation_grad(self.activation, pre, post)
        if g.ndim == 1:
            self.grad_weight += np.outer(g, x)
            self.grad_bias += g
        else:
            self.grad_weight += g.T @ x
            self.grad_bias += g.sum(axis=0)
        return g @ self.weight

    def input_grad(self, cache, grad_out):
        """Gradient w.r.t. the layer input only; parameter grads untouched."""
        _, pre, post = cache
        return (grad_out * activation_grad(self.activation, pre, post)) @ self.weight


class Mlp:
    """Chain of dense layers with a cached forward pass for backprop.

    ``forward`` stores its cache on the instance; ``run`` returns the cache so
    the same network can be evaluated several times before a single backward.
    """

    def __init__(self, layers: list[DenseLayer]):
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.layers = list(layers)
        self._cache = None
        self.frozen = False

    @classmethod
    def build(cls, widths, activations, rng=None) -> "Mlp":
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        rng = None if rng is None else as_rng(rng)
        layers = []
        for i, (a, b, act) in enumerate(zip(widths, widths[1:], activations)):
            layers.append(DenseLayer(a, b, act, None if rng is None else rng.child("layer", i)))
        return cls(layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def run(self, x, upto=None):
        """Forward pass returning ``(output, cache)``; ``upto`` stops after that many layers."""
        caches = []
        h = np.asarray(x, dtype=float)
        for layer in self.layers[:upto]:
            h, c = layer.forward(h)
            caches.append(c)
        return h, caches

    def forward(self, x):
        out, self._cache = self.run(x)
        return out

    def __call__(self, x):
        return self.run(x)[0]

    def backward(self, grad_out, cache=None):
        """Accumulate parameter gradients and return the input gradient."""
        caches = self._cache if cache is None else cache
        if caches is None:
            raise StateError("backward called before forward")
        g = np.asarray(grad_out, dtype=float)
        for layer, c in zip(reversed(self.layers[:len(caches)]), reversed(caches)):
            g = layer.input_grad(c, g) if self.frozen else layer.backward(c, g)
        return g

    def params(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def grads(self):
        out = []
        for layer in self.layers:
            out.extend([layer.grad_weight, layer.grad_bias])
        return out

    def zero_grad(self):
        for g in self.grads():
            g.fill(0.0)

    def copy(self) -> "Mlp":
        clone = Mlp.build([self.n_in] + [l.n_out for l in self.layers],
                          [l.activation for l in self.layers])
        for dst, src in zip(clone.params(), self.params()):
            dst[...] = src
        return clone


@contextmanager
def frozen(nets):
    """Within the block, backward passes compute input gradients only."""
    saved = [n.frozen for n in nets]
    for n in nets:
        n.frozen = True
    try:
        yield
    finally:
        for n, flag in zip(nets, saved):
            n.frozen = flag


def forward(net: Mlp, x):
    return net.forward(x)


def backward(net: Mlp, upstream_grad):
    """Returns ``(param_grads, input_grad)`` for the last ``forward`` call.

    Parameter gradients are those of this call only (buffers are reset first).
    """
    net.zero_grad()
    gx = net.backward(upstream_grad)
    return [g.copy() for g in net.grads()], gx


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params, grads):
    """In-place Adam update with bias correction; returns ``params``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Adam over a fixed list of networks."""

    def __init__(self, nets, lr=1e-3):
        self.nets = list(nets)
        self.state = AdamState(lr=lr)

    def zero_grad(self):
        for net in self.nets:
            net.zero_grad()

    def step(self):
        params, grads = [], []
        for net in self.nets:
            params.extend(net.params())
            grads.extend(net.grads())
        adam_step(self.state, params, grads)


def step_decay_lr(base_lr, epoch, total_epochs, factor=0.5, pieces=3):
    """Multiply by ``factor`` after every ``1/pieces`` of the total epochs."""
    if total_epochs <= 0:
        return base_lr
    span = max(1, int(np.ceil(total_epochs / pieces)))
    return base_lr * factor ** (epoch // span)


# ---------------------------------------------------------------------------
# gradient checking


def numeric_grad(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar ``fn`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = fn()
        x[idx] = orig - h
        fm = fn()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
