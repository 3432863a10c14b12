"""Typed INI configuration.

Every section maps to a dataclass; unknown sections or keys and values of
the wrong type raise :class:`ConfigError` naming the offending field.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from ..errors import ConfigError


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _table(text):
    """``snr_db:B`` pairs, e.g. ``"-6:8, 2:16"``."""
    out = []
    for item in text.replace(",", " ").split():
        snr, b = item.split(":")
        out.append((float(snr), int(b)))
    return tuple(out)


@dataclass
class RunSection:
    name: str = "default"
    seed: int = 0


@dataclass
class DataSection:
    identities: int = 32
    colors: int = 6
    types: int = 4
    items_per_identity: int = 24
    test_per_identity: int = 6
    noise_scale: float = 0.5
    attribute_scale: float = 1.0
    d_obs: int = 64

    @property
    def counts(self):
        return (self.identities, self.colors, self.types)


@dataclass
class ModelSection:
    n_features: int = 64
    n_symbols: int = 64
    block_size: int = 16
    block_table: tuple = ()


@dataclass
class ChannelSection:
    snr_grid: tuple = (-6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0, 8.0)
    rician_factor: float = 2.0
    power: float = 1.0


@dataclass
class HarqSection:
    theta0_db: float = 1.0
    j_max: int = 3
    threshold: float = 0.5
    target_ratio: float = 0.5
    calibrate: bool = True
    tau0: float = 1.0
    tau_rate: float = 0.95
    tau_min: float = 0.1
    combining: str = "replace"
    snr_per_symbol: bool = True
    mode: str = "semharq"


@dataclass
class LossSection:
    reid: float = 1.0
    color: float = 0.125
    type: float = 0.125
    margin: float = 0.3


@dataclass
class TrainSection:
    epochs_warmup: int = 90
    epochs_stage1: int = 15
    epochs_stage2: int = 20
    epochs_stage3: int = 25
    lr: float = 1e-3
    lr_warmup: float = 2e-3
    ids_per_batch: int = 16
    items_per_id: int = 4
    calibration_items: int = 256
    mine_shuffles: int = 8


@dataclass
class EvalSection:
    bound_draws: int = 2000
    calibration_items: int = 192


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "model": ModelSection,
    "channel": ChannelSection,
    "harq": HarqSection,
    "loss": LossSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    harq: HarqSection = field(default_factory=HarqSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        d, m, h = self.data, self.model, self.harq
        if min(d.counts) < 2:
            raise ConfigError("every task needs at least two classes", "data")
        if not 0 < d.test_per_identity < d.items_per_identity - 1:
            raise ConfigError("test split must leave at least two training items per identity",
                              "data.test_per_identity")
        if m.n_symbols < 1 or m.n_features < 1:
            raise ConfigError("dimensions must be positive", "model")
        if not 1 <= m.block_size <= m.n_symbols:
            raise ConfigError("block size must lie in 1..n_symbols", "model.block_size")
        if m.n_symbols != m.n_features:
            raise ConfigError("per-feature distortion scoring needs n_symbols == n_features",
                              "model.n_symbols")
        if self.channel.power <= 0:
            raise ConfigError("power must be positive", "channel.power")
        if self.channel.rician_factor < 0:
            raise ConfigError("Rician factor must be non-negative", "channel.rician_factor")
        if not self.channel.snr_grid:
            raise ConfigError("SNR grid is empty", "channel.snr_grid")
        if h.j_max < 0:
            raise ConfigError("j_max must be non-negative", "harq.j_max")
        if not 0 <= h.threshold <= 1:
            raise ConfigError("threshold must lie in [0, 1]", "harq.threshold")
        if not 0 < h.target_ratio < 1:
            raise ConfigError("target ratio must lie in (0, 1)", "harq.target_ratio")
        if h.combining not in ("replace", "chase"):
            raise ConfigError("combining must be replace or chase", "harq.combining")
        from ..harq.session import MODES

        if h.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}", "harq.mode")
        if h.tau0 <= 0 or not 0 < h.tau_rate <= 1 or h.tau_min <= 0:
            raise ConfigError("temperature schedule out of range", "harq.tau0")
        if min(self.loss.reid, self.loss.color, self.loss.type) < 0:
            raise ConfigError("loss weights must be non-negative", "loss")
        t = self.train
        if min(t.epochs_warmup, t.epochs_stage1, t.epochs_stage2, t.epochs_stage3) < 0:
            raise ConfigError("epoch counts must be non-negative", "train")
        if t.lr <= 0 or t.lr_warmup <= 0:
            raise ConfigError("learning rates must be positive", "train.lr")
        if t.mine_shuffles < 1:
            raise ConfigError("need at least one shuffle", "train.mine_shuffles")
        if t.ids_per_batch < 2 or t.items_per_id < 2:
            raise ConfigError("batches need two identities with two items each", "train.ids_per_batch")
        return self

    def replace(self, **changes):
        """Copy with ``section__key=value`` overrides."""
        out = copy_config(self)
        for key, value in changes.items():
            sec, name = key.split("__")
            setattr(getattr(out, sec), name, value)
        return out.validate()

    def to_ini(self):
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            sec = getattr(self, name)
            parser[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def copy_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return ExperimentConfig(**{n: dataclasses.replace(getattr(cfg, n)) for n in SECTIONS})


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join(f"{a:g}:{b}" for a, b in v)
        return ", ".join(f"{x:g}" for x in v)
    return str(v)


def _parse(raw: str, default, where):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return _table(raw) if ":" in raw else _floats(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}", where) from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", "file") from None
    cfg = ExperimentConfig()
    for sec_name in parser.sections():
        if sec_name not in SECTIONS:
            raise ConfigError(f"unknown section [{sec_name}]", sec_name)
        sec = getattr(cfg, sec_name)
        known = {f.name for f in fields(sec)}
        for key, raw in parser[sec_name].items():
            where = f"{sec_name}.{key}"
            if key not in known:
                raise ConfigError(f"unknown key {key!r}", where)
            setattr(sec, key, _parse(raw, getattr(sec, key), where))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", "file") from None
    return parse_config(text)
