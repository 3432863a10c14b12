"""Complex-baseband link: power normalisation, Rician fading, noise, SNR bookkeeping.

Real network outputs of width 2L map to L complex symbols as
``real = v[:L]``, ``imag = v[L:]``; :func:`to_complex` / :func:`to_real`
implement that bijection and every buffer in the package uses it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, InvariantError, ShapeError, StateError
from .nncore import as_rng


def to_complex(v):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] % 2:
        raise ShapeError("real layout must have even width")
    half = v.shape[-1] // 2
    return v[..., :half] + 1j * v[..., half:]


def to_real(z):
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag], axis=-1).astype(float)


@dataclass
class ComplexSymbolBlock:
    """Symbols of one transmission together with their feature positions."""

    symbols: np.ndarray
    positions: np.ndarray
    index: int = 0
    length: int | None = None

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=complex).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=int).reshape(-1)
        if self.symbols.size < 1:
            raise InvariantError("a block carries at least one symbol")
        if self.symbols.size != self.positions.size:
            raise ShapeError("symbols and positions differ in length")
        if np.unique(self.positions).size != self.positions.size:
            raise InvariantError("block positions must be distinct")
        if np.any(self.positions < 0):
            raise InvariantError("negative position")
        if self.length is not None and np.any(self.positions >= self.length):
            raise InvariantError(f"position outside 0..{self.length - 1}")

    def __len__(self):
        return self.symbols.size

    def with_symbols(self, symbols) -> "ComplexSymbolBlock":
        return ComplexSymbolBlock(symbols, self.positions.copy(), self.index, self.length)


@dataclass
class ChannelConfig:
    snr_db: float = 0.0
    power: float = 1.0
    rician_factor: float = 2.0
    block_size: int = 16
    # (snr threshold in dB, B) pairs; the entry with the largest threshold <= snr wins
    block_table: list = field(default_factory=list)

    def __post_init__(self):
        if self.power <= 0:
            raise ValueError("average power must be positive")
        if self.rician_factor < 0:
            raise ValueError("Rician factor must be non-negative")
        if self.block_size < 1:
            raise ValueError("block size must be at least 1")

    @property
    def sigma2(self):
        return snr_db_to_sigma2(self.snr_db, self.power)

    def block_size_for(self, snr_db=None) -> int:
        return block_size_for(snr_db if snr_db is not None else self.snr_db,
                              self.block_size, self.block_table)


def block_size_for(snr_db, default, table) -> int:
    chosen = default
    best = -np.inf
    for threshold, b in table:
        if threshold <= snr_db and threshold > best:
            best, chosen = threshold, int(b)
    return chosen


@dataclass
class ChannelRealization:
    h: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=complex)
        if self.sigma2 < 0:
            raise ValueError("noise variance must be non-negative")
        if not np.all(np.isfinite(self.h)):
            raise ValueError("fading vector must be finite")


def normalize_power(block, power=1.0, block_size=None):
    """Scale a block to squared norm ``power * B``.

    Accepts a :class:`ComplexSymbolBlock` or a bare complex array and returns
    the same kind. ``block_size`` defaults to the number of symbols.
    """
    symbols = block.symbols if isinstance(block, ComplexSymbolBlock) else np.asarray(block, dtype=complex)
    b = symbols.size if block_size is None else block_size
    norm = np.linalg.norm(symbols)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalise a zero-norm block")
    out = np.sqrt(power * b) * symbols / norm
    if isinstance(block, ComplexSymbolBlock):
        return block.with_symbols(out)
    return out


def normalize_power_backward(symbols, grad_out, power=1.0, block_size=None):
    """Gradient w.r.t. the unnormalised symbols.

    Complex gradients use the ``dL/dRe + 1j * dL/dIm`` convention.
    """
    symbols = np.asarray(symbols, dtype=complex)
    b = symbols.size if block_size is None else block_size
    norm = np.linalg.norm(symbols)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalise a zero-norm block")
    u = symbols / norm
    proj = np.real(np.vdot(u, grad_out))
    return np.sqrt(power * b) / norm * (grad_out - u * proj)


def sample_rician(rng, size, rician_factor=2.0):
    """Fading coefficients drawn from CN(sqrt(r/(r+1)), 1/(r+1))."""
    r = float(rician_factor)
    if r < 0:
        raise ValueError("Rician factor must be non-negative")
    rng = as_rng(rng)
    los = np.sqrt(r / (r + 1.0))
    scale = np.sqrt(1.0 / (2.0 * (r + 1.0)))
    re = rng.normal(size, scale)
    im = rng.normal(size, scale)
    return los + re + 1j * im


def complex_noise(rng, size, sigma2):
    """Circularly-symmetric Gaussian noise with total variance ``sigma2``."""
    rng = as_rng(rng)
    scale = np.sqrt(sigma2 / 2.0)
    re = rng.normal(size, 1.0)
    im = rng.normal(size, 1.0)
    return scale * (re + 1j * im)


def apply_channel(block, realization: ChannelRealization, rng=None, noise=None):
    """``h * z + n``; positions metadata is carried over unchanged."""
    symbols = block.symbols if isinstance(block, ComplexSymbolBlock) else np.asarray(block, dtype=complex)
    h = realization.h
    if h.shape != symbols.shape:
        raise ShapeError(f"fading vector {h.shape} does not match block {symbols.shape}")
    if noise is None:
        if realization.sigma2 == 0.0:
            noise = 0.0
        else:
            noise = complex_noise(rng, symbols.shape, realization.sigma2)
    out = h * symbols + noise
    if isinstance(block, ComplexSymbolBlock):
        return block.with_symbols(out)
    return out


def snr_db_to_sigma2(snr_db, power=1.0):
    if power <= 0:
        raise ValueError("average power must be positive")
    return power / 10.0 ** (snr_db / 10.0)


def accumulate_receive_snr(history, power, sigma2, per_symbol=False):
    """Accumulated receive SNR (linear) ``2P/sigma2 * sum_j ||h^j||^2``.

    With ``per_symbol`` each ``||h^j||^2`` is divided by that block's length,
    i.e. the mean fading power per symbol is accumulated instead of the block
    total.
    """
    history = list(history)
    if not history:
        raise StateError("no transmission recorded yet")
    total = 0.0
    for h in history:
        h = np.atleast_1d(np.asarray(h, dtype=complex))
        energy = float(np.sum(np.abs(h) ** 2))
        if per_symbol:
            energy /= max(h.size, 1)
        total += energy
    if sigma2 == 0.0:
        return np.inf if total > 0 else 0.0
    return 2.0 * power / sigma2 * total


def channel_capacity(snr_linear, h):
    """``log2(1 + SNR * ||h||^2)`` in bits; ``h`` may be a vector or its squared norm."""
    if snr_linear < 0:
        raise ValueError("SNR must be non-negative")
    h = np.asarray(h)
    gain = float(np.sum(np.abs(h) ** 2)) if np.iscomplexobj(h) or h.ndim else float(h)
    return float(np.log2(1.0 + snr_linear * gain))


def linear_to_db(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(x)
