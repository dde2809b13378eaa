"""Command-line entry point: ``tagleak {attack,experiment,sweep,metrics}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from tagleak import harness
from tagleak.metrics import evaluate
from tagleak.model import ConfigError
from tagleak.text import detokenize, tokenize


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="experiment config (YAML or JSON)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=("tag", "dlg"))
    p.add_argument("--max-iters", type=int)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--gamma", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagleak", description="Gradient leakage attacks on transformer text classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="attack the gradient of a single sentence")
    p.add_argument("sentence")
    p.add_argument("--label", type=int, default=0)
    _common(p)

    p = sub.add_parser("experiment", help="run every sentence/seed pair of a config")
    _common(p, config_required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("sweep", help="rerun a config across values of one axis")
    _common(p, config_required=True)
    p.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("metrics", help="score a recovered token file against the truth")
    p.add_argument("recovered", help="file of whitespace-separated tokens")
    p.add_argument("truth", help="file of whitespace-separated tokens")
    return parser


def resolve_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    attack = cfg.attack
    if args.mode is not None:
        attack = replace(attack, mode=args.mode)
    if args.max_iters is not None:
        attack = replace(attack, max_iters=args.max_iters)
    if args.alpha0 is not None:
        attack = replace(attack, alpha0=args.alpha0)
    if args.gamma is not None:
        attack = replace(attack, gamma=args.gamma)
    cfg = replace(cfg, attack=attack)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _sweep_value(axis: str, text: str):
    return int(text) if axis in ("vocab-size", "sentence-length") else text


def cmd_attack(args) -> int:
    cfg = resolve_config(args)
    vocab = harness.resolve_vocab(cfg.data)
    ids = tokenize(args.sentence, vocab)
    model_cfg = cfg.model if len(ids) <= cfg.model.max_seq_len else replace(cfg.model, max_seq_len=len(ids))
    cfg = replace(cfg, model=model_cfg)
    job = harness.Job(cfg, 0, args.sentence, ids, args.label, cfg.seeds[0])
    result, trace = harness.run_job(job)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.jsonl").write_text(harness.trace_lines(trace), encoding="utf-8")
        (out / "loss_curve.csv").write_text(harness.loss_curve_csv(trace), encoding="utf-8")
    doc = result.to_dict()
    doc["recovered_text"] = detokenize(result.recovered, vocab)
    print(json.dumps(doc, indent=2))
    return 0


def cmd_experiment(args) -> int:
    cfg = resolve_config(args)
    result = harness.run_experiment(cfg, workers=args.workers)
    print(harness.to_csv(harness.SUMMARY_FIELDS, [result.summary_row()]), end="")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    values = [_sweep_value(args.axis, v.strip()) for v in args.values.split(",") if v.strip()]
    res = harness.sweep(cfg, args.axis, values, workers=args.workers, out=cfg.out)
    print(harness.to_csv([args.axis] + harness.SUMMARY_FIELDS, res.rows()), end="")
    return 0


def cmd_metrics(args) -> int:
    recovered = Path(args.recovered).read_text(encoding="utf-8").split()
    truth = Path(args.truth).read_text(encoding="utf-8").split()
    print(json.dumps(evaluate(recovered, truth).to_dict(), indent=2))
    return 0


COMMANDS = {"attack": cmd_attack, "experiment": cmd_experiment, "sweep": cmd_sweep, "metrics": cmd_metrics}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, harness.ExperimentError, OSError, ValueError) as exc:
        print(f"tagleak: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
