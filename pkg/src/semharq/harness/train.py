"""Staged training.

Stage 0 warms the codec up on a noiseless channel. Stage 1 trains the
distortion network as a mutual-information critic with everything else
frozen. Stage 2 trains the whole system end to end with full-width
transmissions and the HARQ loop active, then ranks features by importance.
Stage 3 retrains with top-B selection and plan-based retransmission.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError
from ..fde import anneal_temperature, make_mine_batch, mine_loss_backward
from ..fir import compute_importance
from ..harq import IdealChannel, PerItemNoise, SharedNoise, TrainOptions, run_batch
from ..nncore import Adam, SeededRng, step_decay_lr
from ..semcodec import Dataset, loss_channel_mse, loss_multitask
from .config import ExperimentConfig
from .pipeline import Pipeline, build_dataset

log = logging.getLogger(__name__)


@dataclass
class LossRow:
    stage: int
    epoch: int
    total: float
    task: float
    channel: float
    mi: float


@dataclass
class CalibrationResult:
    threshold: float
    ratio: float
    target: float
    reachable: bool


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    probes: dict = field(default_factory=dict)
    calibrations: list = field(default_factory=list)

    def write_losses(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "epoch", "total", "task", "channel", "mi"])
            for r in self.losses:
                w.writerow([r.stage, r.epoch, f"{r.total:.10g}", f"{r.task:.10g}", f"{r.channel:.10g}",
                            f"{r.mi:.10g}"])

    def stage_losses(self, stage):
        return [r for r in self.losses if r.stage == stage]


def pk_batches(labels, ids_per_batch, items_per_id, rng: SeededRng):
    """Identity-balanced batches: P identities with K items each, no repeats inside a batch."""
    ids = np.unique(labels)
    rows_by_id = {i: np.flatnonzero(labels == i) for i in ids}
    n_batches = max(1, len(labels) // (ids_per_batch * items_per_id))
    p = min(ids_per_batch, ids.size)
    out = []
    for _ in range(n_batches):
        chosen = rng.generator.choice(ids, size=p, replace=False)
        rows = []
        for i in chosen:
            pool = rows_by_id[i]
            rows.extend(rng.generator.choice(pool, size=min(items_per_id, pool.size), replace=False))
        out.append(np.asarray(rows))
    return out


def retransmission_ratio(outcomes):
    """Retransmitted symbols over all symbols sent in rounds after the first."""
    retx = total = 0
    for out in outcomes:
        for r, t in out.retx_counts():
            retx += r
            total += t
    return retx / total if total else 0.0


class Trainer:
    def __init__(self, cfg: ExperimentConfig, pipeline: Pipeline | None = None, dataset: Dataset | None = None):
        self.cfg = cfg
        self.pipe = pipeline or Pipeline.fresh(cfg)
        data = dataset if dataset is not None else build_dataset(cfg)
        self.train_set, self.test_set = data.split(cfg.data.test_per_identity)
        self.rng = SeededRng(cfg.run.seed).child("train")
        self.report = TrainReport()

    # --- helpers

    def _batches(self, stage, epoch):
        t = self.cfg.train
        return pk_batches(self.train_set.labels[:, 0], t.ids_per_batch, t.items_per_id,
                          self.rng.child("batches", stage, epoch))

    def _item_sigma2(self, stage, epoch, batch, n):
        """Per-item noise variances: every batch holds the SNR grid in equal shares, shuffled."""
        grid = np.asarray(self.cfg.channel.snr_grid, dtype=float)
        rng = self.rng.child("snr", stage, epoch, batch)
        snr = np.resize(grid, n)[rng.permutation(n)]
        return self.pipe.sigma2(snr)

    def _log(self, stage, epoch, rows):
        arr = np.asarray(rows, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite loss in stage {stage}, epoch {epoch}")
        m = arr.mean(axis=0)
        self.report.losses.append(LossRow(stage, epoch, *map(float, m)))
        log.info("stage %d epoch %d loss %.4f", stage, epoch, m[0])

    def _task_and_channel(self, out, labels):
        """Task and channel losses at the final buffer; returns (terms, buffer gradient)."""
        rp = out.receiver
        mt = loss_multitask(rp.logits, rp.embeddings[0], labels, self.pipe.weights, self.cfg.loss.margin)
        # the transmitted features serve as a fixed target for the reconstruction
        l_ch, g_shat = loss_channel_mse(out.s, rp.s_hat)
        g_buf = self.pipe.codec.receiver_backward(rp, mt.grad_logits, mt.grad_embedding, g_shat)
        return mt.total, l_ch, g_buf

    # --- stages

    def stage0(self):
        """Noiseless warmup of the codec on channel plus task loss."""
        p, cfg = self.pipe, self.cfg
        epochs, lr = cfg.train.epochs_warmup, cfg.train.lr_warmup
        opt = Adam(p.codec.nets(), lr)
        hcfg = p.harq(mode="no-retx", block_size=cfg.model.n_symbols)
        for epoch in range(epochs):
            opt.state.lr = step_decay_lr(lr, epoch, epochs)
            rows = []
            for rows_idx in self._batches(0, epoch):
                xb, yb = self.train_set.x[rows_idx], self.train_set.labels[rows_idx]
                opt.zero_grad()
                out = run_batch(p.codec, None, p.order, xb, 0.0, hcfg, IdealChannel(),
                                train=TrainOptions(1.0, self.rng))
                task, l_ch, g_buf = self._task_and_channel(out, yb)
                out.backward(g_buf)
                opt.step()
                rows.append((task + l_ch, task, l_ch, 0.0))
            self._log(0, epoch, rows)

    def stage1(self):
        """MI training of the distortion network; all codec parameters stay fixed."""
        p, cfg = self.pipe, self.cfg
        epochs = cfg.train.epochs_stage1
        opt = Adam([p.fde.net], cfg.train.lr)
        hcfg = p.harq(mode="no-retx", block_size=cfg.model.n_symbols)
        for epoch in range(epochs):
            opt.state.lr = step_decay_lr(cfg.train.lr, epoch, epochs)
            rows = []
            for b, rows_idx in enumerate(self._batches(1, epoch)):
                xb = self.train_set.x[rows_idx]
                noise = SharedNoise(self.rng.child("noise", 1, epoch, b), cfg.channel.rician_factor)
                out = run_batch(p.codec, None, p.order, xb, self._item_sigma2(1, epoch, b, len(xb)), hcfg, noise)
                l_ch, _ = loss_channel_mse(out.s, out.receiver.s_hat)
                opt.zero_grad()
                batch = make_mine_batch(out.s, out.receiver.s_hat, self.rng.child("mine", epoch, b),
                                        cfg.train.mine_shuffles)
                mi = mine_loss_backward(p.fde, batch)
                opt.step()
                rows.append((l_ch - mi, 0.0, l_ch, mi))
            self._log(1, epoch, rows)
        p.fde.trained = True

    def _e2e_epochs(self, stage, epochs, block_size):
        p, cfg = self.pipe, self.cfg
        opt = Adam(p.codec.nets() + [p.fde.net], cfg.train.lr)
        hcfg = p.harq(mode="semharq", block_size=block_size)
        probes = []
        for epoch in range(epochs):
            opt.state.lr = step_decay_lr(cfg.train.lr, epoch, epochs)
            tau = anneal_temperature(epoch, cfg.harq.tau0, cfg.harq.tau_rate, cfg.harq.tau_min)
            hcfg.threshold = p.threshold
            rows = []
            for b, rows_idx in enumerate(self._batches(stage, epoch)):
                xb, yb = self.train_set.x[rows_idx], self.train_set.labels[rows_idx]
                noise = SharedNoise(self.rng.child("noise", stage, epoch, b), cfg.channel.rician_factor)
                sigma2 = self._item_sigma2(stage, epoch, b, len(xb))
                opt.zero_grad()
                out = run_batch(p.codec, p.fde, p.order, xb, sigma2, hcfg, noise,
                                train=TrainOptions(tau, self.rng.child("gumbel", stage, epoch, b)))
                task, l_ch, g_buf = self._task_and_channel(out, yb)
                probes.append(out.backward(g_buf))
                # MI term: the critic sees detached features, so its gradient reaches F only
                batch = make_mine_batch(out.s, out.receiver.s_hat, self.rng.child("mine", stage, epoch, b),
                                        cfg.train.mine_shuffles)
                mi = mine_loss_backward(p.fde, batch)
                opt.step()
                rows.append((task + l_ch - mi, task, l_ch, mi))
            self._log(stage, epoch, rows)
        return probes

    def stage2(self):
        """End-to-end training with full-width blocks, then importance ranking."""
        cfg = self.cfg
        if cfg.harq.calibrate:
            # full-width blocks leave no room for increments, so t is set against the deployed B
            self.calibrate()
        probes = self._e2e_epochs(2, cfg.train.epochs_stage2, cfg.model.n_symbols)
        self.report.probes["st_grad_norm_stage2"] = float(np.mean(probes)) if probes else 0.0
        n_cal = min(cfg.train.calibration_items, len(self.train_set))
        rows = self.rng.child("importance").permutation(len(self.train_set))[:n_cal]
        self.pipe.importance = compute_importance(self.pipe.codec, self.train_set.x[np.sort(rows)],
                                                  self.pipe.weights.as_tuple(), cfg.channel.power)

    def stage3(self):
        """Retraining with top-B selection and plan-based retransmission."""
        cfg = self.cfg
        if cfg.harq.calibrate:
            self.calibrate()
        probes = self._e2e_epochs(3, cfg.train.epochs_stage3, cfg.model.block_size)
        self.report.probes["st_grad_norm_stage3"] = float(np.mean(probes)) if probes else 0.0
        if cfg.harq.calibrate:
            self.calibrate()

    def run(self):
        self.stage0()
        self.stage1()
        self.stage2()
        self.stage3()
        return self.pipe, self.report

    # --- threshold calibration

    def calibrate(self, target=None, block_size=None, iterations=12, tol=0.05):
        res = calibrate_threshold(self.pipe, self.train_set, target or self.cfg.harq.target_ratio,
                                  block_size=block_size, n_items=self.cfg.eval.calibration_items,
                                  iterations=iterations, tol=tol)
        self.pipe.threshold = res.threshold
        self.report.calibrations.append(res)
        return res


def measure_ratio(pipe: Pipeline, x, threshold, block_size=None, key="calibration"):
    cfg = pipe.config
    outs = []
    for snr in cfg.channel.snr_grid:
        hc = pipe.harq(snr_db=snr, mode="semharq", threshold=threshold)
        if block_size is not None:
            hc.block_size = block_size
        noise = PerItemNoise(SeededRng(cfg.run.seed).child(key, float(snr)), range(len(x)),
                             cfg.channel.rician_factor)
        outs.append(run_batch(pipe.codec, pipe.fde, pipe.order, x, pipe.sigma2(snr), hc, noise))
    return retransmission_ratio(outs)


def calibrate_threshold(pipe: Pipeline, dataset: Dataset, target, block_size=None, n_items=192,
                        iterations=12, tol=0.05) -> CalibrationResult:
    """Bisection on t so that the retransmission ratio over the SNR grid meets ``target``.

    The ratio falls as t rises. An unreachable target returns the closest end
    of the interval with ``reachable`` False.
    """
    x = dataset.x[: min(n_items, len(dataset))]
    lo, hi = 0.0, 1.0
    best_t, best_r = None, None
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        r = measure_ratio(pipe, x, mid, block_size)
        if best_r is None or abs(r - target) < abs(best_r - target):
            best_t, best_r = mid, r
        if abs(r - target) <= 0.01:
            break
        if r > target:
            lo = mid
        else:
            hi = mid
    return CalibrationResult(best_t, best_r, target, abs(best_r - target) <= tol)
