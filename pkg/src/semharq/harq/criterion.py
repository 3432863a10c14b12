"""Retransmission identification: posterior uncertainty against accumulated receive SNR."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvariantError


@dataclass(frozen=True)
class RetxCriterion:
    """Stop once ``SNR_dB > min(theta0 * (1 + U), theta_snr)``.

    Thresholds are in dB and the reshaping function is fixed to ``1 + x``.
    """

    theta0_db: float = 1.0
    theta_snr_db: float = 1.0 * (1.0 + np.log(32))

    @classmethod
    def for_counts(cls, theta0_db, counts):
        """``theta_snr = theta0 * (1 + ln M)`` with M the largest class count."""
        return cls(theta0_db, theta0_db * (1.0 + np.log(max(counts))))

    def threshold_db(self, u):
        return np.minimum(self.theta0_db * (1.0 + np.asarray(u, dtype=float)), self.theta_snr_db)


def entropy(probs, axis=-1):
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


def uncertainty(predictions, tol=1e-6):
    """Mean per-task entropy of the posteriors.

    ``predictions`` is a list of K probability arrays, each (M_k,) or (n, M_k);
    the result is a float or an (n,) array accordingly.
    """
    total = 0.0
    for c in predictions:
        c = np.asarray(c, dtype=float)
        if np.any(c < -tol) or np.any(np.abs(c.sum(axis=-1) - 1.0) > tol):
            raise InvariantError("posterior is not a probability vector")
        total = total + entropy(c)
    u = total / len(predictions)
    return float(u) if np.ndim(u) == 0 else u


def should_retransmit(snr_linear, u, criterion: RetxCriterion):
    """True while the accumulated SNR (linear) has not cleared the uncertainty threshold."""
    snr = np.asarray(snr_linear, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise InvariantError("uncertainty must be non-negative")
    with np.errstate(divide="ignore"):
        snr_db = np.where(snr > 0, 10.0 * np.log10(np.where(snr > 0, snr, 1.0)), -np.inf)
    out = snr_db <= criterion.threshold_db(u)
    return bool(out) if out.ndim == 0 else out
