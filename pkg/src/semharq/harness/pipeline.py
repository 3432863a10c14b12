"""Trained-system container and its on-disk checkpoint format."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from ..channel import snr_db_to_sigma2
from ..errors import ConfigError, ShapeError
from ..fde import DistortionNet
from ..fir import ImportancePlan
from ..harq import HarqConfig, RetxCriterion
from ..nncore import DenseLayer, Mlp, SeededRng
from ..semcodec import CodecDims, Dataset, LossWeights, SemanticCodec, generate_dataset
from .config import ExperimentConfig

CKPT_MAGIC = b"SHQC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI32sI")     # magic, version, module name, layer count
_LAYER = struct.Struct("<II16s")              # out, in, activation


def mlp_to_bytes(name: str, net: Mlp) -> bytes:
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, name.encode()[:32].ljust(32, b"\0"), len(net.layers))]
    for layer in net.layers:
        parts.append(_LAYER.pack(layer.n_out, layer.n_in, layer.activation.encode().ljust(16, b"\0")))
    for layer in net.layers:
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def mlp_from_bytes(raw: bytes):
    magic, version, name, count = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ShapeError("not a network checkpoint")
    off = _CKPT_HEADER.size
    dims = []
    for _ in range(count):
        out, inp, act = _LAYER.unpack_from(raw, off)
        off += _LAYER.size
        dims.append((out, inp, act.rstrip(b"\0").decode()))
    layers = []
    for out, inp, act in dims:
        layer = DenseLayer(inp, out, act)
        layer.weight[...] = np.frombuffer(raw, "<f8", out * inp, off).reshape(out, inp)
        off += 8 * out * inp
        layer.bias[...] = np.frombuffer(raw, "<f8", out, off)
        off += 8 * out
        layers.append(layer)
    if off != len(raw):
        raise ShapeError("trailing bytes in checkpoint")
    return name.rstrip(b"\0").decode(), Mlp(layers)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    return generate_dataset(cfg.run.seed, d.counts, d.items_per_identity, d.noise_scale, d.d_obs,
                            d.attribute_scale)


def harq_config(cfg: ExperimentConfig, mode=None, threshold=None, j_max=None, block_size=None) -> HarqConfig:
    h = cfg.harq
    return HarqConfig(
        power=cfg.channel.power,
        rician_factor=cfg.channel.rician_factor,
        block_size=cfg.model.block_size if block_size is None else block_size,
        j_max=h.j_max if j_max is None else j_max,
        threshold=h.threshold if threshold is None else threshold,
        criterion=RetxCriterion.for_counts(h.theta0_db, cfg.data.counts),
        combining=h.combining,
        snr_per_symbol=h.snr_per_symbol,
        mode=h.mode if mode is None else mode,
    )


@dataclass
class Pipeline:
    config: ExperimentConfig
    codec: SemanticCodec
    fde: DistortionNet
    random_fde: DistortionNet
    importance: ImportancePlan
    threshold: float

    @classmethod
    def fresh(cls, cfg: ExperimentConfig) -> "Pipeline":
        rng = SeededRng(cfg.run.seed).child("init")
        dims = CodecDims(cfg.data.d_obs, cfg.model.n_features, cfg.model.n_symbols, cfg.data.counts)
        codec = SemanticCodec(dims, rng)
        fde = DistortionNet(cfg.model.n_features, rng.child("fde"))
        random_fde = DistortionNet(cfg.model.n_features, rng.child("random_fde"))
        plan = ImportancePlan(np.linspace(1.0, 0.0, cfg.model.n_symbols, endpoint=False))
        return cls(cfg, codec, fde, random_fde, plan, cfg.harq.threshold)

    @property
    def order(self):
        return self.importance.order

    @property
    def weights(self):
        lw = self.config.loss
        return LossWeights(lw.reid, lw.color, lw.type)

    def block_size_for(self, snr_db):
        size = self.config.model.block_size
        for limit, b in sorted(self.config.model.block_table):
            if snr_db >= limit:
                size = b
        return size

    def harq(self, snr_db=None, **kw) -> HarqConfig:
        kw.setdefault("threshold", self.threshold)
        if snr_db is not None:
            kw.setdefault("block_size", self.block_size_for(snr_db))
        return harq_config(self.config, **kw)

    def sigma2(self, snr_db):
        return snr_db_to_sigma2(snr_db, self.config.channel.power)

    # --- persistence

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for name, net in self.codec.named_nets().items():
            with open(os.path.join(directory, f"{name}.bin"), "wb") as fh:
                fh.write(mlp_to_bytes(name, net))
        with open(os.path.join(directory, "fde.bin"), "wb") as fh:
            fh.write(self.fde.to_bytes())
        self.importance.to_csv(os.path.join(directory, "ind.csv"))
        with open(os.path.join(directory, "threshold.txt"), "w") as fh:
            fh.write(repr(float(self.threshold)) + "\n")

    @classmethod
    def load(cls, cfg: ExperimentConfig, directory) -> "Pipeline":
        pipe = cls.fresh(cfg)
        for name, net in pipe.codec.named_nets().items():
            path = os.path.join(directory, f"{name}.bin")
            if not os.path.exists(path):
                raise ConfigError(f"missing checkpoint {path}", "checkpoint")
            with open(path, "rb") as fh:
                stored_name, stored = mlp_from_bytes(fh.read())
            if stored_name != name or [p.shape for p in stored.params()] != [p.shape for p in net.params()]:
                raise ConfigError(f"checkpoint {name} does not match the configured dimensions", "checkpoint")
            for dst, src in zip(net.params(), stored.params()):
                dst[...] = src
        with open(os.path.join(directory, "fde.bin"), "rb") as fh:
            pipe.fde = DistortionNet.from_bytes(fh.read())
        pipe.importance = ImportancePlan.from_csv(os.path.join(directory, "ind.csv"))
        with open(os.path.join(directory, "threshold.txt")) as fh:
            pipe.threshold = float(fh.read())
        return pipe
