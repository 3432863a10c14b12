"""Capacity-limited upper bound on end-to-end task information."""
from __future__ import annotations

import numpy as np

from ..channel import channel_capacity
from ..errors import ConfigError

LN2 = np.log(2.0)


def mi_upper_bound(i_dl_bits, snr_linear, h_draws, g_max):
    """``min(I_DL, G_max * mean C)`` in bits.

    ``h_draws`` is (draws, B) complex; each row is one transmission's fading
    vector and C = log2(1 + SNR ||h||^2) is averaged over rows.
    """
    if i_dl_bits < 0:
        raise ConfigError("I_DL must be non-negative", "bounds.i_dl")
    if g_max < 1:
        raise ConfigError("G_max must be at least 1", "bounds.g_max")
    if np.isinf(snr_linear):
        return float(i_dl_bits)
    h = np.atleast_2d(np.asarray(h_draws))
    gains = np.sum(np.abs(h) ** 2, axis=1)
    cap = float(np.mean([channel_capacity(snr_linear, float(g)) for g in gains]))
    return float(min(i_dl_bits, g_max * cap))


def label_entropy(labels, m):
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=m).astype(float)
    p = counts / counts.sum()
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def task_information(probs, labels, counts):
    """Variational lower bound on the label information carried by the posteriors, in nats.

    Per task ``H(Y_k) - CE(Y_k, c_k)`` clipped at zero, summed over tasks. The
    network's own posterior serves as the variational decoder, so the
    estimate never relies on binning and carries no plug-in bias.
    """
    labels = np.atleast_2d(np.asarray(labels, dtype=int))
    total = 0.0
    for k, (c, m) in enumerate(zip(probs, counts)):
        y = labels[:, k]
        picked = np.maximum(np.asarray(c)[np.arange(y.size), y], 1e-12)
        total += max(0.0, label_entropy(y, m) + float(np.mean(np.log(picked))))
    return total


def gamma_margin(i_upper_bits, mi_nats):
    """Margin ``I_U - I_semharq`` in nats."""
    return float(i_upper_bits * LN2 - mi_nats)
