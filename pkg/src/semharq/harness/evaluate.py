"""Evaluation: retrieval metrics, attribute accuracy, retransmission statistics and bounds."""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields

import numpy as np

from ..channel import sample_rician
from ..errors import ConfigError
from ..harq import (
    IdealChannel,
    PerItemNoise,
    gamma_margin,
    mi_upper_bound,
    run_batch,
    session_results,
    task_information,
)
from ..nncore import SeededRng
from ..semcodec import Dataset
from .pipeline import Pipeline

LN2 = np.log(2.0)


@dataclass
class MetricsRecord:
    snr_db: float
    mode: str
    rank1_pct: float
    map_pct: float
    color_acc_pct: float
    type_acc_pct: float
    mean_retx: float
    mean_retx_ratio: float
    mi_estimate_nats: float
    i_upper_bits: float
    gamma: float

    @property
    def multitask_pct(self):
        return (self.rank1_pct + self.color_acc_pct + self.type_acc_pct) / 3.0

    def row(self):
        out = []
        for v in astuple(self):
            out.append(v if isinstance(v, str) else f"{v:.6f}")
        return out


METRIC_COLUMNS = [f.name for f in fields(MetricsRecord)]


def write_metrics(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(**{k: (v if k == "mode" else float(v)) for k, v in r.items()}) for r in rows]


# ---------------------------------------------------------------------------
# retrieval


def average_precision(relevant_sorted):
    """AP of a ranked list given its boolean relevance flags."""
    rel = np.asarray(relevant_sorted, dtype=bool)
    if not rel.any():
        return np.nan
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(hits[rel] / ranks))


def retrieval_metrics(query_emb, query_ids, gallery_emb=None, gallery_ids=None, exclude_self=True):
    """Rank-1 and mAP (both in [0, 1]) under Euclidean distance.

    Without an explicit gallery every query is matched against the query set
    itself; ``exclude_self`` drops the query's own entry. Queries with no
    relevant gallery item are skipped.
    """
    q = np.asarray(query_emb, dtype=float)
    qi = np.asarray(query_ids)
    same = gallery_emb is None
    g = q if same else np.asarray(gallery_emb, dtype=float)
    gi = qi if same else np.asarray(gallery_ids)
    if g.shape[0] == 0 or (same and exclude_self and g.shape[0] < 2):
        raise ConfigError("gallery is empty", "eval.gallery")
    d = np.sqrt(np.maximum(np.sum(q**2, 1)[:, None] + np.sum(g**2, 1)[None, :] - 2 * q @ g.T, 0.0))
    hits, aps = [], []
    for a in range(q.shape[0]):
        keep = np.ones(g.shape[0], dtype=bool)
        if same and exclude_self:
            keep[a] = False
        cand = np.flatnonzero(keep)
        order = cand[np.argsort(d[a, cand], kind="stable")]
        rel = gi[order] == qi[a]
        if not rel.any():
            continue
        hits.append(bool(rel[0]))
        aps.append(average_precision(rel))
    if not hits:
        raise ConfigError("no query has a relevant gallery item", "eval.gallery")
    return float(np.mean(hits)), float(np.mean(aps))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRun:
    records: list
    sessions: dict       # snr -> list of SessionResult


def clean_information(pipe: Pipeline, data: Dataset):
    """Task information of a noiseless full transmission, in nats."""
    hc = pipe.harq(mode="no-retx", block_size=pipe.config.model.n_symbols)
    out = run_batch(pipe.codec, pipe.fde, pipe.order, data.x, 0.0, hc, IdealChannel())
    return task_information(out.probs, data.labels, data.counts)


def bound_draws(pipe: Pipeline, block_size):
    cfg = pipe.config
    rng = SeededRng(cfg.run.seed).child("bounds")
    return sample_rician(rng, (cfg.eval.bound_draws, block_size), cfg.channel.rician_factor)


def evaluate(pipe: Pipeline, data: Dataset, snr_grid=None, mode=None, j_max=None, threshold=None,
             with_sessions=False) -> EvalRun:
    cfg = pipe.config
    grid = cfg.channel.snr_grid if snr_grid is None else snr_grid
    mode = cfg.harq.mode if mode is None else mode
    if len(data) < 2:
        raise ConfigError("gallery is empty", "eval.gallery")
    i_dl = clean_information(pipe, data)
    records, sessions = [], {}
    for snr in grid:
        hc = pipe.harq(snr_db=snr, mode=mode, j_max=j_max, threshold=threshold)
        noise = PerItemNoise(SeededRng(cfg.run.seed).child("eval", float(snr)), range(len(data)),
                             cfg.channel.rician_factor)
        out = run_batch(pipe.codec, pipe.fde, pipe.order, data.x, pipe.sigma2(snr), hc, noise,
                        random_fde=pipe.random_fde)
        probs = out.probs
        rank1, mean_ap = retrieval_metrics(out.receiver.embeddings[0], data.labels[:, 0])
        color = float(np.mean(np.argmax(probs[1], axis=1) == data.labels[:, 1]))
        vtype = float(np.mean(np.argmax(probs[2], axis=1) == data.labels[:, 2]))
        counts = out.retx_counts()
        retx = sum(r for r, _ in counts)
        total = sum(t for _, t in counts)
        mi = task_information(probs, data.labels, data.counts)
        snr_lin = 10.0 ** (snr / 10.0)
        i_u = mi_upper_bound(i_dl / LN2, snr_lin, bound_draws(pipe, hc.block_size),
                             hc.effective_j_max + 1)
        records.append(MetricsRecord(
            float(snr), mode, 100 * rank1, 100 * mean_ap, 100 * color, 100 * vtype,
            float(np.mean(out.j)), retx / total if total else 0.0, mi, i_u, gamma_margin(i_u, mi),
        ))
        if with_sessions:
            sessions[float(snr)] = session_results(out, data.labels)
    return EvalRun(records, sessions)


def write_sessions(sessions, path):
    with open(path, "w") as fh:
        for snr in sorted(sessions):
            for res in sessions[snr]:
                fh.write(res.to_json() + "\n")


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class ThresholdRow:
    snr_db: float
    ratio_target: float
    threshold: float
    ratio_measured: float
    multitask_pct: float
    reachable: bool


def sweep_threshold(pipe: Pipeline, calib: Dataset, test: Dataset, ratios=(0.25, 0.5, 0.75)):
    """Calibrate t for each target ratio and evaluate SemHARQ across the SNR grid."""
    from .train import calibrate_threshold

    rows = []
    saved = pipe.threshold
    try:
        for target in ratios:
            cal = calibrate_threshold(pipe, calib, target, n_items=pipe.config.eval.calibration_items)
            run = evaluate(pipe, test, mode="semharq", threshold=cal.threshold)
            for rec in run.records:
                rows.append(ThresholdRow(rec.snr_db, target, cal.threshold, cal.ratio, rec.multitask_pct,
                                         cal.reachable))
    finally:
        pipe.threshold = saved
    return rows


def write_threshold_table(rows, path):
    """Rows are SNR points, one multi-task accuracy column per target ratio."""
    ratios = sorted({r.ratio_target for r in rows})
    snrs = sorted({r.snr_db for r in rows})
    cell = {(r.snr_db, r.ratio_target): r for r in rows}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr_db"] + [f"ratio_{t:g}" for t in ratios])
        for s in snrs:
            w.writerow([f"{s:g}"] + [f"{cell[(s, t)].multitask_pct:.6f}" for t in ratios])
        w.writerow(["threshold"] + [f"{cell[(snrs[0], t)].threshold:.6f}" for t in ratios])
        w.writerow(["calibrated_ratio"] + [f"{cell[(snrs[0], t)].ratio_measured:.6f}" for t in ratios])
        w.writerow(["reachable"] + [str(cell[(snrs[0], t)].reachable).lower() for t in ratios])
