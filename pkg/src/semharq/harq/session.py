"""HARQ sessions: receive-buffer combining and the batched transmission loop.

:class:`HarqSession` is the single-item state machine (buffer, received set,
log, accumulated SNR). :func:`run_batch` drives many sessions at once with
array masks over the L feature positions; in training mode it also keeps a
tape so the final task loss can be backpropagated through every
transmission, including the straight-through feedback path into the
distortion network.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..channel import ComplexSymbolBlock, accumulate_receive_snr, to_complex, to_real
from ..errors import ConfigError, InvariantError
from ..fde import inference_input, relax_backward, relax_batch, top_order
from ..nncore import SeededRng, as_rng, gumbel_from_uniform
from .criterion import RetxCriterion, should_retransmit, uncertainty

MODES = ("semharq", "ik-only", "rt-only", "no-retx", "semharq-random-fde")
COMBINING = ("replace", "chase")


@dataclass
class HarqConfig:
    power: float = 1.0
    rician_factor: float = 2.0
    block_size: int = 16
    j_max: int = 3
    threshold: float = 0.5
    criterion: RetxCriterion = field(default_factory=RetxCriterion)
    combining: str = "replace"
    snr_per_symbol: bool = True
    mode: str = "semharq"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}", "harq.mode")
        if self.combining not in COMBINING:
            raise ConfigError(f"unknown combining rule {self.combining!r}", "harq.combining")
        if self.j_max < 0:
            raise ConfigError("j_max must be non-negative", "harq.j_max")
        if self.block_size < 1:
            raise ConfigError("block size must be at least 1", "channel.block_size")

    @property
    def effective_j_max(self):
        return 0 if self.mode == "no-retx" else self.j_max


# ---------------------------------------------------------------------------
# single-item state


@dataclass
class TransmissionRecord:
    positions: np.ndarray
    kinds: list          # "new" or "retx" per position
    h: np.ndarray        # fading at those positions
    snr_bar: float = float("nan")
    uncertainty: float = float("nan")


class HarqSession:
    """Position-aligned receive buffer for one item."""

    def __init__(self, n_symbols, power=1.0, sigma2=1.0, j_max=3, combining="replace", per_symbol=True):
        if combining not in COMBINING:
            raise ConfigError(f"unknown combining rule {combining!r}", "harq.combining")
        self.n_symbols = n_symbols
        self.power = power
        self.sigma2 = sigma2
        self.j_max = j_max
        self.combining = combining
        self.per_symbol = per_symbol
        self.buffer = np.zeros(n_symbols, dtype=complex)
        self.copies = np.zeros(n_symbols, dtype=int)
        self.log: list[TransmissionRecord] = []
        self._gain = 0.0

    @property
    def received(self):
        return set(np.flatnonzero(self.copies > 0).tolist())

    @property
    def j(self):
        """Retransmissions so far (the first transmission is j = 0)."""
        return max(len(self.log) - 1, 0)

    @property
    def buffer_real(self):
        return to_real(self.buffer)

    @property
    def snr_bar(self):
        if not self.log:
            return 0.0
        if self.sigma2 == 0:
            return np.inf
        return 2.0 * self.power / self.sigma2 * self._gain

    def replay_snr(self):
        return accumulate_receive_snr([r.h for r in self.log], self.power, self.sigma2, self.per_symbol)

    def combine_received(self, block: ComplexSymbolBlock, h):
        """Write a received block into the buffer and log it."""
        pos = block.positions
        if np.any(pos >= self.n_symbols):
            raise InvariantError("block position beyond buffer length")
        h = np.asarray(h, dtype=complex)
        kinds = ["retx" if self.copies[p] else "new" for p in pos]
        if self.combining == "replace":
            self.buffer[pos] = block.symbols
        else:
            k = self.copies[pos]
            self.buffer[pos] = (self.buffer[pos] * k + block.symbols) / (k + 1)
        self.copies[pos] += 1
        energy = float(np.sum(np.abs(h) ** 2))
        self._gain += energy / h.size if self.per_symbol else energy
        self.log.append(TransmissionRecord(pos.copy(), kinds, h.copy()))
        return self


def combine_received(session: HarqSession, block, h):
    return session.combine_received(block, h)


# ---------------------------------------------------------------------------
# noise sources


class PerItemNoise:
    """One independent stream per item, so a session's noise never depends on its batch."""

    def __init__(self, rng: SeededRng, item_ids, rician_factor=2.0):
        self.rngs = [rng.child("item", int(i)) for i in item_ids]
        self.r = rician_factor

    def draw(self, rows, width):
        h = np.empty((len(rows), width), dtype=complex)
        u = np.empty((len(rows), width), dtype=complex)
        los = np.sqrt(self.r / (self.r + 1.0))
        sd = np.sqrt(1.0 / (2.0 * (self.r + 1.0)))
        for i, row in enumerate(rows):
            g = self.rngs[row].generator
            a = g.standard_normal((4, width))
            h[i] = los + sd * (a[0] + 1j * a[1])
            u[i] = (a[2] + 1j * a[3]) / np.sqrt(2.0)
        return h, u


class SharedNoise:
    """Single stream for a whole batch (training)."""

    def __init__(self, rng: SeededRng, rician_factor=2.0):
        self.rng = as_rng(rng)
        self.r = rician_factor

    def draw(self, rows, width):
        los = np.sqrt(self.r / (self.r + 1.0))
        sd = np.sqrt(1.0 / (2.0 * (self.r + 1.0)))
        a = self.rng.generator.standard_normal((4, len(rows), width))
        return los + sd * (a[0] + 1j * a[1]), (a[2] + 1j * a[3]) / np.sqrt(2.0)


class IdealChannel:
    """Unit gain, no noise."""

    def draw(self, rows, width):
        return np.ones((len(rows), width), dtype=complex), np.zeros((len(rows), width), dtype=complex)


# ---------------------------------------------------------------------------
# batched engine


@dataclass
class TrainOptions:
    tau: float
    gumbel_rng: SeededRng


@dataclass
class _Round:
    rows_mask: np.ndarray
    mask: np.ndarray
    inc: np.ndarray
    ret: np.ndarray
    alpha: np.ndarray
    cand: np.ndarray
    h: np.ndarray
    scale: np.ndarray
    norm2: np.ndarray
    buf_prev: np.ndarray
    st: tuple | None = None   # (prev block mask, relax cache, similarity cache, F input, R, gumbel)


@dataclass
class BatchOutcome:
    s: np.ndarray
    f: np.ndarray
    receiver: object
    buffer: np.ndarray
    j: np.ndarray
    snr_bar: np.ndarray
    uncertainty: np.ndarray
    logs: list
    sigma2: float
    config: HarqConfig
    _tape: dict | None = None

    @property
    def probs(self):
        return self.receiver.probs

    @property
    def buffer_real(self):
        return to_real(self.buffer)

    def retx_counts(self):
        """Per item: (retransmitted symbols, all symbols) over rounds after the first."""
        out = []
        for log in self.logs:
            r = sum(k.count("retx") for k in (rec.kinds for rec in log[1:]))
            total = sum(len(rec.kinds) for rec in log[1:])
            out.append((r, total))
        return out

    def backward(self, grad_buffer_real, grad_s=None):
        """Backprop from the final buffer through every transmission into the transmitter.

        Gradients accumulate into the codec transmitter networks and, through
        the straight-through feedback, into the distortion network. Returns the
        norm of the gradient that reached the distortion network.
        """
        if self._tape is None:
            raise RuntimeError("outcome was not produced in training mode")
        tape = self._tape
        fde = tape["fde"]
        f = self.f
        g = to_complex(grad_buffer_real)
        g_f = np.zeros_like(f)
        fde_before = [x.copy() for x in fde.net.grads()] if fde is not None else []
        self.st_grads = []
        for rd in reversed(tape["rounds"]):
            coef = rd.inc + rd.ret * rd.alpha
            g_cand = g * coef
            if rd.st is not None and fde is not None:
                prev_mask, rcache, scache = rd.st[:3]
                delta = rd.alpha * (rd.cand - rd.buf_prev)
                g_q = np.real(np.conj(g) * delta) * prev_mask
                self.st_grads.insert(0, g_q)
                g_d = relax_backward(rcache, g_q)
                fde.similarity_backward(scache, -g_d)
            g = np.where(rd.rows_mask[:, None], g * (1.0 - rd.ret * rd.alpha), g)
            hs = rd.h * rd.scale[:, None]
            g_f += np.conj(hs) * g_cand
            g_c = np.real(np.sum(np.conj(g_cand) * rd.h * f, axis=1))
            with np.errstate(divide="ignore", invalid="ignore"):
                k = np.where(rd.norm2 > 0, -rd.scale / rd.norm2, 0.0)
            g_f += (g_c * k)[:, None] * f * rd.mask
        g_s = tape["codec"].jsc_encoder.backward(to_real(g_f), tape["jsc_cache"])
        if grad_s is not None:
            g_s = g_s + grad_s
        tape["codec"].encoder.backward(g_s, tape["enc_cache"])
        if fde is None:
            return 0.0
        return float(np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(fde.net.grads(), fde_before))))


def first_block_mask(order, n_symbols, block_size):
    m = np.zeros(n_symbols, dtype=bool)
    m[np.asarray(order)[:block_size]] = True
    return m


def _fill_incremental(order, blocked, room):
    """Per row, the first ``room`` positions in ``order`` not ``blocked``."""
    pool = ~blocked[:, order]
    take = pool & (np.cumsum(pool, axis=1) <= room[:, None])
    out = np.zeros_like(blocked)
    out[:, order] = take
    return out


def _top_k_mask(values, allowed, k):
    """Per row keep the ``k`` largest allowed entries (ties to the lower index)."""
    order = top_order(values, allowed)
    ranks = np.empty_like(order)
    rows = np.arange(values.shape[0])[:, None]
    ranks[rows, order] = np.arange(values.shape[1])[None, :]
    return allowed & (ranks < np.asarray(k)[:, None])


def run_batch(codec, fde, order, x, sigma2, cfg: HarqConfig, noise, train: TrainOptions | None = None,
              random_fde=None) -> BatchOutcome:
    """Run one HARQ session per row of ``x`` and decode the final buffers.

    ``sigma2`` is a scalar or one noise variance per row.
    """
    x = np.atleast_2d(x)
    order = np.asarray(order, dtype=int)
    s, enc_cache = codec.encoder.run(x)
    fr, jsc_cache = codec.jsc_encoder.run(s)
    f = to_complex(fr)
    n, width = f.shape
    block = min(cfg.block_size, width)
    j_max = cfg.effective_j_max
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (n,))
    noise_sd = np.sqrt(s2)[:, None]
    mode = cfg.mode

    buf = np.zeros((n, width), dtype=complex)
    copies = np.zeros((n, width), dtype=int)
    active = np.ones(n, dtype=bool)
    j = np.zeros(n, dtype=int)
    gain = np.zeros(n)
    first = first_block_mask(order, width, block)
    mask = np.tile(first, (n, 1))
    st_pending = None
    rounds = []
    logs = [[] for _ in range(n)]
    snr_bar = np.zeros(n)
    u = np.zeros(n)

    while True:
        sending = active & mask.any(axis=1)
        rows = np.flatnonzero(sending)
        h = np.zeros((n, width), dtype=complex)
        un = np.zeros((n, width), dtype=complex)
        if rows.size:
            h[rows], un[rows] = noise.draw(rows, width)
        mask = mask & sending[:, None]
        received = copies > 0
        inc = mask & ~received
        ret = mask & received
        if cfg.combining == "replace":
            alpha = np.ones((n, width))
        else:
            alpha = 1.0 / (copies + 1.0)
        norm2 = np.sum(np.abs(f) ** 2 * mask, axis=1)
        b_row = mask.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norm2 > 0, np.sqrt(cfg.power * b_row / np.where(norm2 > 0, norm2, 1.0)), 0.0)
        cand = h * scale[:, None] * f + noise_sd * un
        cand = np.where(sending[:, None], cand, 0.0)
        buf_prev = buf
        buf = buf + ret * alpha * (cand - buf) + inc * cand
        copies = copies + mask
        energy = np.sum(np.abs(h) ** 2 * mask, axis=1)
        if cfg.snr_per_symbol:
            energy = np.where(b_row > 0, energy / np.maximum(b_row, 1), 0.0)
        gain += energy
        if train is not None:
            rounds.append(_Round(sending, mask, inc, ret, alpha, cand, h, scale, norm2, buf_prev, st_pending))
        for r in rows:
            pos = np.flatnonzero(mask[r])
            logs[r].append(TransmissionRecord(pos, ["retx" if ret[r, p] else "new" for p in pos], h[r, pos]))
        st_pending = None

        # decode and test the stopping rule
        logits = codec.predict(to_real(buf))
        probs = [p.probs for p in logits]
        u = uncertainty(probs)
        with np.errstate(divide="ignore"):
            snr_bar = np.where(gain > 0, np.where(s2 > 0, 2.0 * cfg.power * gain / np.where(s2 > 0, s2, 1.0),
                                                  np.inf), 0.0)
        for r in rows:
            logs[r][-1].snr_bar = float(snr_bar[r])
            logs[r][-1].uncertainty = float(u[r])
        want = sending & (j < j_max) & should_retransmit(snr_bar, u, cfg.criterion)
        if not want.any():
            break

        last = mask
        retx = np.zeros_like(mask)
        if mode in ("semharq", "semharq-random-fde"):
            f_in = inference_input(to_real(buf_zero_except(cand, last)))
            sim, scache = fde.similarity_forward(f_in)
            d = 1.0 - sim
            p = (d >= cfg.threshold) & last & want[:, None]
            count = np.minimum(p.sum(axis=1), block)
            if mode == "semharq":
                retx = _top_k_mask(np.where(p, d, -np.inf), p, count)
                if train is not None:
                    maxr = int(count.max(initial=0))
                    if maxr:
                        gum = gumbel_from_uniform(train.gumbel_rng.open_uniform((maxr, n, width)))
                        _, rcache = relax_batch(d, last, count, train.tau, gum)
                        st_pending = (last, rcache, scache, f_in, count, gum)
            else:
                d_rand = 1.0 - random_fde.similarity_forward(
                    inference_input(to_real(buf_zero_except(cand, last))))[0]
                retx = _top_k_mask(d_rand, last & want[:, None], count)
        elif mode == "rt-only":
            retx = np.tile(first, (n, 1)) & want[:, None]
        room = np.where(want, block - retx.sum(axis=1), 0)
        if mode == "rt-only":
            room = np.zeros(n, dtype=int)
        inc_next = _fill_incremental(order, (copies > 0) | retx, room)
        mask = (retx | inc_next) & want[:, None]
        moving = mask.any(axis=1)
        active = want & moving
        j = j + active
        if not active.any():
            break

    rp = codec.receiver_forward(to_real(buf))
    tape = None
    if train is not None:
        tape = {"rounds": rounds, "codec": codec, "fde": fde, "enc_cache": enc_cache, "jsc_cache": jsc_cache}
    return BatchOutcome(s, f, rp, buf, j, snr_bar, u, logs, sigma2, cfg, tape)


def buf_zero_except(values, mask):
    return np.where(mask, values, 0.0)


# ---------------------------------------------------------------------------
# per-item API


@dataclass
class SessionResult:
    labels: list
    probs: list
    j_used: int
    snr_trace_db: list
    plan_sizes: list           # (retransmitted, incremental) per transmission
    uncertainty_trace: list

    @property
    def predicted(self):
        return [int(np.argmax(p)) for p in self.probs]

    def to_json(self):
        return json.dumps({
            "labels": [int(v) for v in self.labels],
            "predicted": self.predicted,
            "j_used": int(self.j_used),
            "snr_trace_db": [round_float(v) for v in self.snr_trace_db],
            "uncertainty_trace": [round_float(v) for v in self.uncertainty_trace],
            "plan_sizes": [[int(a), int(b)] for a, b in self.plan_sizes],
        }, sort_keys=True)


def round_float(v):
    if not np.isfinite(v):
        return None if np.isnan(v) else ("inf" if v > 0 else "-inf")
    return float(f"{v:.12g}")


def session_results(outcome: BatchOutcome, labels=None):
    out = []
    probs = outcome.probs
    for i, log in enumerate(outcome.logs):
        with np.errstate(divide="ignore"):
            trace = [10.0 * np.log10(r.snr_bar) if r.snr_bar > 0 else -np.inf for r in log]
        sizes = [(k.count("retx"), k.count("new")) for k in (r.kinds for r in log)]
        out.append(SessionResult(
            [] if labels is None else list(np.atleast_2d(labels)[i]),
            [p[i] for p in probs],
            int(outcome.j[i]),
            trace,
            sizes,
            [r.uncertainty for r in log],
        ))
    return out


def run_session(item, pipeline, cfg: HarqConfig, snr_db, seed=0, item_id=0, sigma2=None):
    """Run a single item through the full SemHARQ loop."""
    from ..channel import snr_db_to_sigma2

    s2 = snr_db_to_sigma2(snr_db, cfg.power) if sigma2 is None else sigma2
    noise = PerItemNoise(SeededRng(seed).child("session", float(snr_db)), [item_id], cfg.rician_factor)
    outcome = run_batch(pipeline.codec, pipeline.fde, pipeline.order, item.x[None], s2, cfg, noise,
                        random_fde=getattr(pipeline, "random_fde", None))
    return session_results(outcome, [item.labels])[0]
