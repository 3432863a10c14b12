"""Command line: ``semharq <subcommand> [--config FILE] ...``.

Every subcommand writes under ``<runs>/<name>/``. Failures print one JSON
object on stderr; configuration errors exit with status 2, other errors
with status 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from ..errors import ConfigError, SemHarqError
from ..harq import MODES
from .config import ExperimentConfig, load_config
from .evaluate import (
    evaluate,
    sweep_threshold,
    write_metrics,
    write_sessions,
    write_threshold_table,
)
from .pipeline import Pipeline, build_dataset
from .train import Trainer


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.name is not None:
        cfg.run.name = args.name
    return cfg.validate()


def run_dir(args, cfg):
    path = os.path.join(args.runs, cfg.run.name)
    os.makedirs(path, exist_ok=True)
    return path


def _splits(cfg):
    return build_dataset(cfg).split(cfg.data.test_per_identity)


def _load(cfg, path):
    ckpt = os.path.join(path, "checkpoints")
    if not os.path.isdir(ckpt):
        raise ConfigError(f"no checkpoints under {path}; run train first", "checkpoint")
    return Pipeline.load(cfg, ckpt)


def cmd_gen_data(args, cfg, path):
    data = build_dataset(cfg)
    data.save(os.path.join(path, "dataset.bin"))
    data.save(os.path.join(path, "dataset.csv"))
    return {"items": len(data), "path": path}


def cmd_train(args, cfg, path):
    with open(os.path.join(path, "config.copy"), "w") as fh:
        fh.write(cfg.to_ini())
    trainer = Trainer(cfg)
    pipe, report = trainer.run()
    pipe.save(os.path.join(path, "checkpoints"))
    report.write_losses(os.path.join(path, "loss.csv"))
    pipe.importance.to_csv(os.path.join(path, "ind.csv"))
    summary = {
        "probes": report.probes,
        "calibrations": [c.__dict__ for c in report.calibrations],
        "threshold": pipe.threshold,
    }
    with open(os.path.join(path, "train_report.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return {"threshold": pipe.threshold, "path": path}


def cmd_eval(args, cfg, path):
    pipe = _load(cfg, path)
    _, test = _splits(cfg)
    run = evaluate(pipe, test, mode=args.mode or cfg.harq.mode, with_sessions=True)
    write_metrics(run.records, os.path.join(path, args.out or "metrics.csv"))
    write_sessions(run.sessions, os.path.join(path, "sessions.jsonl"))
    return {"records": len(run.records)}


def cmd_sweep_snr(args, cfg, path):
    pipe = _load(cfg, path)
    _, test = _splits(cfg)
    records = []
    for mode in args.modes or MODES:
        records.extend(evaluate(pipe, test, mode=mode).records)
    write_metrics(records, os.path.join(path, "sweep_snr.csv"))
    return {"records": len(records)}


def cmd_sweep_threshold(args, cfg, path):
    pipe = _load(cfg, path)
    train, test = _splits(cfg)
    rows = sweep_threshold(pipe, train, test, tuple(args.ratios))
    write_threshold_table(rows, os.path.join(path, "sweep_threshold.csv"))
    flagged = sorted({r.ratio_target for r in rows if not r.reachable})
    return {"rows": len(rows), "unreachable": flagged}


def cmd_bounds(args, cfg, path):
    pipe = _load(cfg, path)
    _, test = _splits(cfg)
    run = evaluate(pipe, test, mode="semharq")
    with open(os.path.join(path, "bounds.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr_db", "i_upper_bits", "mi_estimate_nats", "gamma"])
        for r in run.records:
            w.writerow([f"{r.snr_db:g}", f"{r.i_upper_bits:.6f}", f"{r.mi_estimate_nats:.6f}", f"{r.gamma:.6f}"])
    return {"points": len(run.records)}


def cmd_export(args, cfg, path):
    pipe = _load(cfg, path)
    out = args.out or os.path.join(path, "export")
    os.makedirs(out, exist_ok=True)
    _, test = _splits(cfg)
    test.save(os.path.join(out, "test.csv"))
    pipe.importance.to_csv(os.path.join(out, "ind.csv"))
    with open(os.path.join(out, "fde.bin"), "wb") as fh:
        fh.write(pipe.fde.to_bytes())
    return {"path": out}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-snr": cmd_sweep_snr,
    "sweep-threshold": cmd_sweep_threshold,
    "bounds": cmd_bounds,
    "export": cmd_export,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="semharq", description="Semantic HARQ link simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file; defaults apply when omitted")
        p.add_argument("--seed", type=int)
        p.add_argument("--name", help="run name (overrides [run] name)")
        p.add_argument("--runs", default="runs", help="parent directory of run folders")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--mode", choices=MODES)
            p.add_argument("--out", help="metrics file name inside the run folder")
        if name == "sweep-snr":
            p.add_argument("--modes", nargs="+", choices=MODES)
        if name == "sweep-threshold":
            p.add_argument("--ratios", nargs="+", type=float, default=[0.25, 0.5, 0.75])
        if name == "export":
            p.add_argument("--out")
    return parser


def _fail(code, kind, message, field=None):
    payload = {"error": kind, "message": message}
    if field is not None:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(1):
            cfg = _config(args)
            path = run_dir(args, cfg)
            result = COMMANDS[args.command](args, cfg, path)
    except ConfigError as exc:
        return _fail(2, "config", str(exc), exc.field)
    except SemHarqError as exc:
        return _fail(1, type(exc).__name__, str(exc))
    except OSError as exc:
        return _fail(1, "io", str(exc))
    except ValueError as exc:
        return _fail(1, "value", str(exc))
    print(json.dumps({"command": args.command, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
