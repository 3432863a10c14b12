"""Transmission plans: feedback-driven retransmissions plus importance-ordered increments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvariantError, ShapeError


@dataclass
class TransmissionPlan:
    retransmit: np.ndarray
    incremental: np.ndarray

    def __post_init__(self):
        self.retransmit = np.asarray(self.retransmit, dtype=int)
        self.incremental = np.asarray(self.incremental, dtype=int)
        if np.intersect1d(self.retransmit, self.incremental).size:
            raise InvariantError("a position is both retransmitted and incremental")

    @property
    def positions(self):
        return np.concatenate([self.retransmit, self.incremental])

    def __len__(self):
        return self.retransmit.size + self.incremental.size


def cap_retransmissions(positions, d, capacity):
    """Keep at most ``capacity`` positions, largest distortion first (ties to lower index)."""
    positions = np.asarray(positions, dtype=int)
    d = np.asarray(d, dtype=float)
    if positions.size <= capacity:
        return positions
    order = np.lexsort((positions, -d))
    return positions[order[:capacity]]


def build_plan(feedback, last_positions, order, block_size, distortion, received=()):
    """Combine the retransmission request with increments from the importance order.

    ``feedback`` and ``distortion`` are aligned with ``last_positions`` (the
    original feature positions of the previous block). ``order`` lists all
    positions by descending importance; positions already ``received`` or
    being retransmitted are skipped when filling remaining capacity.
    """
    feedback = np.asarray(feedback).astype(bool)
    last_positions = np.asarray(last_positions, dtype=int)
    distortion = np.asarray(distortion, dtype=float)
    if feedback.shape != last_positions.shape or distortion.shape != last_positions.shape:
        raise ShapeError("feedback, distortion and previous positions must align")
    retx = cap_retransmissions(last_positions[feedback], distortion[feedback], block_size)
    taken = set(int(p) for p in received) | set(int(p) for p in retx)
    room = block_size - retx.size
    inc = []
    for pos in order:
        if room <= 0:
            break
        pos = int(pos)
        if pos not in taken:
            inc.append(pos)
            room -= 1
    return TransmissionPlan(retx, np.array(inc, dtype=int))
