"""Trainable transmission codec: semantic encoder, JSC encoder/decoder and task heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..channel import to_complex
from ..errors import ConfigError, ShapeError
from ..nncore import Mlp, as_rng, softmax

TASKS = ("reid", "color", "type")


@dataclass
class TaskPrediction:
    logits: np.ndarray
    probs: np.ndarray

    @property
    def predicted(self):
        return np.argmax(self.probs, axis=-1)


@dataclass(frozen=True)
class CodecDims:
    d_obs: int = 64
    n_features: int = 64
    n_symbols: int = 64
    counts: tuple = (32, 6, 4)

    @property
    def decoder_widths(self):
        # ReID decoder as wide as the feature vector, the attribute decoders half of it
        n = self.n_features
        return (n, max(n // 2, 1), max(n // 2, 1))


class SemanticCodec:
    """All transmitter/receiver networks except the distortion network.

    Attribute names follow the parameter sets they hold: ``encoder`` is the
    multi-task semantic encoder, ``jsc_encoder``/``jsc_decoder`` the channel
    codec, ``sem_decoders[k]`` and ``performers[k]`` the per-task heads.
    """

    def __init__(self, dims: CodecDims = CodecDims(), rng=0):
        self.dims = dims
        rng = as_rng(rng).child("codec")
        n, two_l = dims.n_features, 2 * dims.n_symbols
        self.encoder = Mlp.build([dims.d_obs, 2 * n, n], ["leaky_relu", "relu"], rng.child("encoder"))
        self.jsc_encoder = Mlp.build([n, two_l, two_l], ["leaky_relu", "linear"], rng.child("jsc_encoder"))
        self.jsc_decoder = Mlp.build([two_l, two_l, n], ["leaky_relu", "relu"], rng.child("jsc_decoder"))
        self.sem_decoders = [
            Mlp.build([n, w], ["leaky_relu"], rng.child("sem_decoder", k))
            for k, w in enumerate(dims.decoder_widths)
        ]
        self.performers = [
            Mlp.build([w, m], ["linear"], rng.child("performer", k))
            for k, (w, m) in enumerate(zip(dims.decoder_widths, dims.counts))
        ]

    # --- grouping helpers

    def transmitter_nets(self):
        return [self.encoder, self.jsc_encoder]

    def receiver_nets(self):
        return [self.jsc_decoder, *self.sem_decoders, *self.performers]

    def nets(self):
        return self.transmitter_nets() + self.receiver_nets()

    def named_nets(self):
        out = {"encoder": self.encoder, "jsc_encoder": self.jsc_encoder, "jsc_decoder": self.jsc_decoder}
        for k, name in enumerate(TASKS):
            out[f"sem_decoder_{name}"] = self.sem_decoders[k]
            out[f"performer_{name}"] = self.performers[k]
        return out

    # --- single-call operations

    def encode_semantic(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dims.d_obs:
            raise ShapeError(f"observation width {x.shape[-1]} != {self.dims.d_obs}")
        return self.encoder(x)

    def jsc_encode(self, s):
        """Real output of width 2L; use :func:`jsc_encode_complex` for symbols."""
        return self.jsc_encoder(self._check(s, self.dims.n_features))

    def jsc_encode_complex(self, s):
        return to_complex(self.jsc_encode(s))

    def jsc_decode(self, buffer):
        return self.jsc_decoder(self._check(buffer, 2 * self.dims.n_symbols))

    def decode_task(self, s_hat, k) -> TaskPrediction:
        if k not in range(len(TASKS)):
            raise ConfigError(f"unknown task index {k}", "task")
        s_hat = self._check(s_hat, self.dims.n_features)
        logits = self.performers[k](self.sem_decoders[k](s_hat))
        return TaskPrediction(logits, softmax(logits))

    def predict(self, buffer):
        """Buffer (2L reals) to the list of K task predictions."""
        s_hat = self.jsc_decode(buffer)
        return [self.decode_task(s_hat, k) for k in range(len(TASKS))]

    def _check(self, v, width):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != width:
            raise ShapeError(f"expected width {width}, got {v.shape[-1]}")
        return v

    # --- differentiable receiver

    def receiver_forward(self, buffer):
        """Runs decoder and heads keeping caches; returns a :class:`ReceiverPass`."""
        s_hat, c_dec = self.jsc_decoder.run(buffer)
        emb, logits, caches = [], [], []
        for dec, perf in zip(self.sem_decoders, self.performers):
            e, ce = dec.run(s_hat)
            lg, cp = perf.run(e)
            emb.append(e)
            logits.append(lg)
            caches.append((ce, cp))
        return ReceiverPass(s_hat, emb, logits, c_dec, caches)

    def receiver_backward(self, rp: "ReceiverPass", grad_logits, grad_embedding=None, grad_s_hat=None):
        """Backprop through heads and decoder; returns gradient w.r.t. the buffer."""
        g_s = np.zeros_like(rp.s_hat) if grad_s_hat is None else grad_s_hat.copy()
        for k, (dec, perf) in enumerate(zip(self.sem_decoders, self.performers)):
            ce, cp = rp.head_caches[k]
            g_e = perf.backward(grad_logits[k], cp)
            if k == 0 and grad_embedding is not None:
                g_e = g_e + grad_embedding
            g_s += dec.backward(g_e, ce)
        return self.jsc_decoder.backward(g_s, rp.decoder_cache)


@dataclass
class ReceiverPass:
    s_hat: np.ndarray
    embeddings: list
    logits: list
    decoder_cache: list
    head_caches: list

    @property
    def probs(self):
        return [softmax(lg) for lg in self.logits]
