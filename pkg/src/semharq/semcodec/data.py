"""Synthetic three-attribute dataset standing in for vehicle images.

Every identity owns a prototype vector plus a fixed colour and type. An item
is ``prototype + colour_offset + type_offset + jitter``; the attribute
offsets are shared by all identities with that attribute, so the three tasks
are separable but correlated.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..nncore import as_rng

MAGIC = b"SHQD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


@dataclass(frozen=True)
class SyntheticItem:
    x: np.ndarray
    identity: int
    color: int
    vtype: int

    @property
    def labels(self):
        return (self.identity, self.color, self.vtype)


class Dataset:
    """Columnar storage: ``x`` is (n, d_obs), ``labels`` is (n, 3) ints."""

    def __init__(self, x, labels, counts):
        self.x = np.ascontiguousarray(x, dtype=float)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.counts = tuple(int(c) for c in counts)
        if self.x.shape[0] != self.labels.shape[0]:
            raise ValueError("observation and label counts differ")
        for k, m in enumerate(self.counts):
            if self.labels.size and (self.labels[:, k].min() < 0 or self.labels[:, k].max() >= m):
                raise ValueError(f"labels of task {k} outside 0..{m - 1}")

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i) -> SyntheticItem:
        y = self.labels[i]
        return SyntheticItem(self.x[i], int(y[0]), int(y[1]), int(y[2]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def d_obs(self):
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.labels[idx], self.counts)

    def split(self, test_per_identity):
        """Hold out the last ``test_per_identity`` items of every identity."""
        train, test = [], []
        for ident in np.unique(self.labels[:, 0]):
            rows = np.flatnonzero(self.labels[:, 0] == ident)
            cut = max(len(rows) - test_per_identity, 0)
            train.extend(rows[:cut])
            test.extend(rows[cut:])
        return self.subset(np.sort(train)), self.subset(np.sort(test))

    def to_bytes(self) -> bytes:
        n, d = self.x.shape
        head = _HEADER.pack(MAGIC, VERSION, n, d, *self.counts)
        return head + self.x.astype("<f8").tobytes() + self.labels.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Dataset":
        magic, version, n, d, m1, m2, m3 = _HEADER.unpack_from(raw)
        if magic != MAGIC or version != VERSION:
            raise ValueError("not a dataset file")
        off = _HEADER.size
        x = np.frombuffer(raw, "<f8", n * d, off).reshape(n, d)
        off += 8 * n * d
        labels = np.frombuffer(raw, "<i8", n * 3, off).reshape(n, 3)
        return cls(x.astype(float), labels.astype(np.int64), (m1, m2, m3))

    def save(self, path):
        path = Path(path)
        if path.suffix == ".csv":
            self.save_csv(path)
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        if path.suffix == ".csv":
            return cls.load_csv(path)
        return cls.from_bytes(path.read_bytes())

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["identity", "color", "type"] + [f"x{i}" for i in range(self.d_obs)])
            w.writerow(["#counts", *self.counts])
            for xi, yi in zip(self.x, self.labels):
                w.writerow([*map(int, yi), *(repr(float(v)) for v in xi)])

    @classmethod
    def load_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        counts = tuple(int(v) for v in rows[1][1:4])
        body = rows[2:]
        labels = np.array([[int(v) for v in r[:3]] for r in body], dtype=np.int64).reshape(-1, 3)
        x = np.array([[float(v) for v in r[3:]] for r in body], dtype=float)
        return cls(x.reshape(len(body), -1), labels, counts)


def generate_dataset(seed, counts=(32, 6, 4), items_per_identity=24, noise_scale=0.5,
                     d_obs=64, attribute_scale=1.0) -> Dataset:
    m1, m2, m3 = counts
    if min(counts) < 2:
        raise ConfigError("every task needs at least two classes", "dataset.counts")
    rng = as_rng(seed).child("dataset")
    protos = rng.child("prototypes").normal((m1, d_obs))
    color_off = attribute_scale * rng.child("colors").normal((m2, d_obs))
    type_off = attribute_scale * rng.child("types").normal((m3, d_obs))
    attr = rng.child("attributes")
    # cycle attributes so every colour and type occurs when m1 allows it
    colors = attr.permutation(np.arange(m1) % m2)
    vtypes = attr.permutation(np.arange(m1) % m3)
    ident = np.repeat(np.arange(m1), items_per_identity)
    jitter = rng.child("jitter").normal((ident.size, d_obs))
    x = protos[ident] + color_off[colors[ident]] + type_off[vtypes[ident]] + noise_scale * jitter
    labels = np.stack([ident, colors[ident], vtypes[ident]], axis=1)
    return Dataset(x, labels, counts)
