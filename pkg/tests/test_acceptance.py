"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``; the verdicts are also
collected into the terminal summary.
"""
import itertools
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, ACCEPTANCE_SEEDS

from semharq.channel import normalize_power, normalize_power_backward, sample_rician
from semharq.fde import (
    DistortionNet,
    estimate_mi,
    make_mine_batch,
    mine_loss_backward,
    multi_gumbel_relax,
    quantize_feedback,
    relax_batch,
    train_mine,
)
from semharq.harness import evaluate
from semharq.harq import (
    HarqConfig,
    RetxCriterion,
    SharedNoise,
    TrainOptions,
    run_batch,
    should_retransmit,
)
from semharq.nncore import ACTIVATIONS, Mlp, SeededRng, backward, forward, numeric_grad, relative_error
from semharq.semcodec import (
    CodecDims,
    SemanticCodec,
    loss_channel_mse,
    loss_cross_entropy,
    loss_triplet_hard,
    softmax_cross_entropy,
)

LOW_SNR = (-6.0, -4.0, -2.0)


def report(n, ok, detail, started):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.perf_counter() - started:.1f} s)"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return ok


def seed_mean(pipelines, fn):
    return float(np.mean([fn(p) for p in pipelines]))


def multitask_at(entry, snr, mode="semharq", **kw):
    pipe, _, test, _ = entry
    return evaluate(pipe, test, snr_grid=(snr,), mode=mode, **kw).records[0]


# ---------------------------------------------------------------------------


def test_c01_power_normalization():
    t0 = time.perf_counter()
    rng = SeededRng(0)
    worst = 0.0
    for i in range(1000):
        b = int(rng.integers(1, 65))
        power = float(rng.uniform(0.1, 5.0))
        block = rng.normal(b, scale=float(rng.uniform(0.01, 100))) + 1j * rng.normal(b)
        out = normalize_power(block, power)
        worst = max(worst, abs(np.sum(np.abs(out) ** 2) - power * b))
    ok = worst <= 1e-12
    assert report(1, ok, f"max |norm^2 - P B| = {worst:.2e} over 1000 blocks", t0)


def test_c02_rician_statistics():
    t0 = time.perf_counter()
    h = sample_rician(SeededRng(2024), 10**6, 2.0)
    mean_re = float(np.mean(h.real))
    var = float(np.mean(np.abs(h - np.mean(h)) ** 2))
    ok = abs(mean_re - math.sqrt(2 / 3)) <= 0.002 and abs(var - 1 / 3) <= 0.003
    assert report(2, ok, f"mean Re h = {mean_re:.5f} (target {math.sqrt(2 / 3):.5f}), "
                         f"variance = {var:.5f} (target 0.33333)", t0)


# ---------------------------------------------------------------------------
# criterion 3: every gradient against central differences


def _layer_errors():
    errs = {}
    rng = SeededRng(3)
    for act in ACTIVATIONS:
        net = Mlp.build([16, 64, 8], ["leaky_relu", act], rng.child(act))
        x = rng.child("x", act).normal((5, 16))
        up = rng.child("up", act).normal((5, 8))

        def loss():
            return float(np.sum(net(x) * up))

        forward(net, x)
        grads, gx = backward(net, up)
        e = max(relative_error(g, numeric_grad(loss, p)) for p, g in zip(net.params(), grads))
        errs[f"dense/{act}"] = max(e, relative_error(gx, numeric_grad(loss, x)))
    z = rng.normal(6) + 1j * rng.normal(6)
    up = rng.normal(6) + 1j * rng.normal(6)
    g = normalize_power_backward(z, up, 1.5)
    re, im = z.real.copy(), z.imag.copy()

    def pl():
        return float(np.real(np.vdot(up, normalize_power(re + 1j * im, 1.5))))

    errs["power-normalization"] = relative_error(np.concatenate([g.real, g.imag]),
                                                 np.concatenate([numeric_grad(pl, re), numeric_grad(pl, im)]))
    return errs


def _loss_errors():
    errs = {}
    rng = SeededRng(4)
    logits = rng.normal((6, 5))
    labels = np.array([0, 3, 1, 4, 2, 3])
    _, g = softmax_cross_entropy(logits, labels)
    errs["cross-entropy/logits"] = relative_error(
        g, numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits))
    probs = rng.uniform(0.1, 1.0, size=5)
    y = np.eye(5)[2]
    _, g = loss_cross_entropy(y, probs)
    errs["cross-entropy/probs"] = relative_error(g, numeric_grad(lambda: loss_cross_entropy(y, probs)[0], probs))
    s, s_hat = rng.normal((4, 8)), rng.normal((4, 8))
    _, g = loss_channel_mse(s, s_hat)
    errs["mse"] = relative_error(g, numeric_grad(lambda: loss_channel_mse(s, s_hat)[0], s_hat))
    emb = rng.normal((8, 6))
    ids = np.repeat(np.arange(4), 2)
    res = loss_triplet_hard(emb, ids, margin=2.0)
    errs["hard-triplet"] = relative_error(res.grad, numeric_grad(lambda: loss_triplet_hard(emb, ids, 2.0).loss, emb))
    f = DistortionNet(8, 5, hidden=16, bottleneck=4)
    s = rng.normal((10, 8))
    batch = make_mine_batch(s, 0.6 * s + rng.normal((10, 8)), 6, shuffles=3)
    f.net.zero_grad()
    mine_loss_backward(f, batch)
    analytic = np.concatenate([g.ravel() for g in f.net.grads()])
    numeric = np.concatenate([numeric_grad(lambda: -estimate_mi(f, batch), p).ravel() for p in f.net.params()])
    errs["mine"] = relative_error(analytic, numeric)
    return errs


def _straight_through_errors():
    """Whole HARQ engine: transmitter gradients and the straight-through path into F."""
    errs = {}
    dims = CodecDims(d_obs=6, n_features=8, n_symbols=8, counts=(4, 3, 2))
    for combining in ("replace", "chase"):
        codec = SemanticCodec(dims, 11)
        fde = DistortionNet(8, 12)
        fde.trained = True
        x = SeededRng(13).normal((5, 6))
        order = SeededRng(14).permutation(8)
        cfg = HarqConfig(block_size=3, j_max=3, threshold=0.0, combining=combining,
                         criterion=RetxCriterion.for_counts(1.0, (4, 3, 2)))
        up = SeededRng(15).normal((5, 16))

        def run():
            return run_batch(codec, fde, order, x, 2.0, cfg, SharedNoise(SeededRng(16)),
                             train=TrainOptions(0.5, SeededRng(17)))

        for net in codec.nets() + [fde.net]:
            net.zero_grad()
        out = run()
        out.backward(up)
        tx = max(relative_error(g, numeric_grad(lambda: float(np.sum(run().buffer_real * up)), p))
                 for net in codec.transmitter_nets() for p, g in zip(net.params(), net.grads()))
        rounds = [rd for rd in out._tape["rounds"] if rd.st is not None]

        def surrogate():
            total = 0.0
            for rd, gq in zip(rounds, out.st_grads):
                last, _, _, f_in, count, gum = rd.st
                d = 1.0 - fde.similarity_forward(f_in)[0]
                total += float(np.sum(gq * relax_batch(d, last, count, 0.5, gum)[0]))
            return total

        st = max(relative_error(g, numeric_grad(surrogate, p)) for p, g in zip(fde.net.params(), fde.net.grads()))
        errs[f"engine/{combining}"] = tx
        errs[f"straight-through/{combining}"] = st if rounds else np.inf
    return errs


def test_c03_gradient_correctness():
    t0 = time.perf_counter()
    errs = {**_layer_errors(), **_loss_errors(), **_straight_through_errors()}
    worst = max(errs, key=errs.get)
    ok = all(e <= 1e-4 for e in errs.values())
    assert report(3, ok, f"{len(errs)} checks, worst {worst} rel. err {errs[worst]:.1e}", t0)


# ---------------------------------------------------------------------------


def _gaussian_pairs(rho, dim=4):
    def sample(rng, n):
        s = rng.normal((n, dim))
        return s, rho * s + math.sqrt(1 - rho**2) * rng.child("e").normal((n, dim))

    return sample


def test_c04_mine_oracle():
    t0 = time.perf_counter()
    parts, ok = [], True
    for rho in (0.0, 0.5, 0.9):
        truth = -2.0 * math.log(1 - rho**2) + 0.0
        est = []
        for seed in range(5):
            f = DistortionNet(4, seed, hidden=64, bottleneck=64)
            sample = _gaussian_pairs(rho)
            train_mine(f, sample, 2000, batch_size=256, lr=1e-3, rng=SeededRng(seed).child("train"))
            s, s_hat = sample(SeededRng(seed).child("eval"), 20000)
            est.append(estimate_mi(f, make_mine_batch(s, s_hat, SeededRng(seed).child("shuffle"))))
        mean = float(np.mean(est))
        good = mean <= 0.05 if rho == 0 else abs(mean - truth) <= 0.15 * truth
        ok &= good
        parts.append(f"rho={rho}: {mean:.3f} vs {truth:.3f}")
    assert report(4, ok, "; ".join(parts), t0)


def _top_set_probability(d, r):
    """Exact chance that the r relaxed draws land on the r largest entries, one each.

    Draw k is categorical on softmax(d with its k-1 largest entries set to zero)
    and the draws are independent, so the chance is the permanent of the
    r x r matrix of per-draw probabilities of the top entries.
    """
    top = np.argsort(-d, kind="stable")[:r]
    probs = []
    for k in range(r):
        dk = d.copy()
        dk[top[:k]] = 0.0
        z = np.exp(dk - dk.max())
        probs.append(z[top] / z.sum())
    return sum(np.prod([probs[k][perm[k]] for k in range(r)]) for perm in itertools.permutations(range(r)))


def test_c05_quantizer_and_gumbel():
    t0 = time.perf_counter()
    grid = np.round(np.arange(11) * 0.1, 1)
    mismatches = cases = 0
    rng = SeededRng(5)
    for b in range(1, 9):
        # B <= 4 enumerates the whole grid; larger blocks draw 20000 grid vectors each
        vectors = itertools.product(grid, repeat=b) if b <= 4 else (grid[rng.integers(0, 11, b)] for _ in range(20000))
        for d in vectors:
            d = np.asarray(d, dtype=float)
            for t in (0.0, 0.25, 0.5, 0.75, 1.0):
                p, r = quantize_feedback(d, t)
                brute = [1 if d[i] >= t else 0 for i in range(b)]
                mismatches += list(p) != brute or r != sum(brute)
                cases += 1
    # Gumbel: entries one apart, tau = 0.01, all R from 1 to 4
    d = np.arange(8.0)
    rates = {}
    for r in (1, 2, 3, 4):
        hits = 0
        for k in range(10**4):
            samples, _ = multi_gumbel_relax(d, r, 0.01, SeededRng(50).child(r, k))
            chosen = np.argmax(samples, axis=1)
            hits += len(set(chosen)) == r and set(chosen) == set(range(8 - r, 8))
        rates[r] = hits / 10**4
    worst = min(rates.values())
    ok = mismatches == 0 and worst >= 0.99
    detail = (f"quantizer {mismatches} mismatches in {cases} cases; Gumbel top-R rate "
              + ", ".join(f"R={r}: {v:.4f} (exact {_top_set_probability(d, r):.4f})" for r, v in rates.items())
              + ", threshold 0.99")
    assert report(5, ok, detail, t0)


def test_c06_criterion_grid():
    t0 = time.perf_counter()
    m = 32
    theta0 = 1.0
    crit = RetxCriterion.for_counts(theta0, (m, 6, 4))
    mismatches = 0
    for u in (0.0, math.log(2), math.log(m)):
        for snr_db in range(-10, 21):
            snr = 10 ** (snr_db / 10)
            measured = 10 * math.log10(snr)
            oracle = measured <= min(theta0 * (1 + u), theta0 * (1 + math.log(m)))
            mismatches += should_retransmit(snr, u, crit) != oracle
    assert report(6, mismatches == 0, f"{mismatches} mismatches over 93 grid points", t0)


# ---------------------------------------------------------------------------
# trained pipelines, five seeds


def test_c07_end_to_end_ordering(default_pipelines):
    t0 = time.perf_counter()
    table = {mode: [seed_mean(default_pipelines, lambda e: multitask_at(e, s, mode).multitask_pct) for s in LOW_SNR]
             for mode in ("semharq", "ik-only", "rt-only")}
    sem, ik, rt = table["semharq"], table["ik-only"], table["rt-only"]
    ok = all(a >= b and a >= c for a, b, c in zip(sem, ik, rt)) and sem[0] - rt[0] >= 2.0
    detail = " | ".join(f"{s:g} dB: SemHARQ {a:.1f}, IK-only {b:.1f}, RT-only {c:.1f}"
                        for s, a, b, c in zip(LOW_SNR, sem, ik, rt))
    assert report(7, ok, detail, t0)


def test_c08_retransmission_trend(default_pipelines):
    t0 = time.perf_counter()
    low = seed_mean(default_pipelines, lambda e: multitask_at(e, -6.0, j_max=6).mean_retx)
    high = seed_mean(default_pipelines, lambda e: multitask_at(e, 8.0, j_max=6).mean_retx)
    ok = low >= 3 * high
    assert report(8, ok, f"mean retransmissions {low:.3f} at -6 dB vs {high:.3f} at 8 dB (J_max=6)", t0)


def test_c09_accuracy_grows_with_jmax(default_pipelines):
    t0 = time.perf_counter()
    acc = [seed_mean(default_pipelines, lambda e: multitask_at(e, -6.0, j_max=j).multitask_pct) for j in range(4)]
    ok = all(b >= a - 1.0 for a, b in zip(acc, acc[1:]))
    assert report(9, ok, "accuracy at -6 dB for J_max 0..3: " + ", ".join(f"{a:.1f}" for a in acc), t0)


def test_c10_fde_ablation(default_pipelines):
    t0 = time.perf_counter()
    trained = seed_mean(default_pipelines, lambda e: multitask_at(e, -6.0).multitask_pct)
    random = seed_mean(default_pipelines, lambda e: multitask_at(e, -6.0, "semharq-random-fde").multitask_pct)
    ok = trained - random >= 2.0
    assert report(10, ok, f"trained FDE {trained:.1f} vs random FDE {random:.1f} at -6 dB "
                          f"(gap {trained - random:+.1f}, need +2.0)", t0)


def test_c11_bounds(default_pipelines):
    t0 = time.perf_counter()
    worst_gap, monotone = -np.inf, True
    for pipe, _, test, _ in default_pipelines:
        rec = evaluate(pipe, test, mode="semharq").records
        i_u = np.array([r.i_upper_bits for r in rec])
        monotone &= bool(np.all(np.diff(i_u) >= 0))
        worst_gap = max(worst_gap, max(r.mi_estimate_nats - r.i_upper_bits * math.log(2) for r in rec))
    ok = monotone and worst_gap <= 0.1
    assert report(11, ok, f"I_U nondecreasing: {monotone}; max (I_hat - I_U) = {worst_gap:.3f} nats "
                          f"(limit 0.1)", t0)


def test_c12_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    blobs = []
    for run in ("first", "second"):
        runs = str(tmp_path / run)
        for cmd in ("train", "eval"):
            subprocess.run([sys.executable, "-m", "semharq", cmd, "--seed", "3", "--runs", runs, "--name", "det"],
                           check=True, capture_output=True, env=env)
        with open(os.path.join(runs, "det", "metrics.csv"), "rb") as fh:
            blobs.append(fh.read())
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0
    assert report(12, ok, f"metrics.csv identical across two train+eval runs: {ok} ({len(blobs[0])} bytes)", t0)
