"""Shared fixtures: small configs for unit tests and cached trained pipelines."""
from __future__ import annotations

import copy

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from semharq.harness.config import ExperimentConfig
from semharq.harness.train import Trainer
from semharq.harq import PerItemNoise, run_batch
from semharq.nncore import SeededRng

ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)

_blas = threadpool_limits(1)


def tiny_config(seed=0, **overrides) -> ExperimentConfig:
    """A few-second configuration exercising every stage."""
    cfg = ExperimentConfig()
    cfg.run.seed = seed
    d = cfg.data
    d.identities, d.colors, d.types = 8, 3, 2
    d.items_per_identity, d.test_per_identity, d.d_obs = 12, 4, 16
    m = cfg.model
    m.n_features = m.n_symbols = 16
    m.block_size = 4
    cfg.channel.snr_grid = (-6.0, 0.0, 8.0)
    t = cfg.train
    t.epochs_warmup = t.epochs_stage1 = t.epochs_stage2 = t.epochs_stage3 = 3
    t.ids_per_batch, t.items_per_id = 4, 4
    t.calibration_items = 32
    cfg.eval.calibration_items = 32
    cfg.eval.bound_draws = 200
    for key, value in overrides.items():
        sec, name = key.split("__")
        setattr(getattr(cfg, sec), name, value)
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_trained():
    trainer = Trainer(tiny_config())
    pipe, report = trainer.run()
    return pipe, report, trainer


_DEFAULT_RUNS: dict = {}
# per-seed observations taken between stages
STAGE_SNAPSHOTS: dict = {}


def _stage2_accuracy(trainer, snr_db=0.0, n_items=256):
    """Per-head training accuracy of the full-width pipeline at ``snr_db``."""
    pipe, data = trainer.pipe, trainer.train_set
    x, y = data.x[:n_items], data.labels[:n_items]
    hc = pipe.harq(snr_db=snr_db, block_size=pipe.config.model.n_symbols)
    noise = PerItemNoise(SeededRng(pipe.config.run.seed).child("stage2-probe"), range(len(x)),
                         pipe.config.channel.rician_factor)
    out = run_batch(pipe.codec, pipe.fde, pipe.order, x, pipe.sigma2(snr_db), hc, noise)
    return [float(np.mean(np.argmax(p, axis=1) == y[:, k])) for k, p in enumerate(out.probs)]


def default_trained(seed):
    """Default-config pipeline for ``seed``, trained once per test session."""
    if seed not in _DEFAULT_RUNS:
        cfg = ExperimentConfig()
        cfg.run.seed = seed
        trainer = Trainer(cfg.validate())
        trainer.stage0()
        trainer.stage1()
        snap = STAGE_SNAPSHOTS[seed] = {"stage1_codec": copy.deepcopy(trainer.pipe.codec)}
        trainer.stage2()
        snap.update({
            "accuracy": _stage2_accuracy(trainer),
            "ind": trainer.pipe.importance.ind.copy(),
            "probe": trainer.report.probes["st_grad_norm_stage2"],
        })
        trainer.stage3()
        _DEFAULT_RUNS[seed] = (trainer.pipe, trainer.report, trainer.test_set, trainer.train_set)
    return _DEFAULT_RUNS[seed]


@pytest.fixture(scope="session")
def default_pipelines():
    return [default_trained(s) for s in ACCEPTANCE_SEEDS]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
