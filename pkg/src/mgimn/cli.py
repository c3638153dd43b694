"""Command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 failed check.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config, parse_assignments
from .errors import CheckFailure, ConfigError, MgimnError
from .runner import (append_metrics, evaluate_fsl, evaluate_gfsl, grad_check_models, load_data,
                     load_model, metric_row, run_rtc, sweep, train)

COMMANDS = ("train", "eval-fsl", "eval-gfsl", "eval-rtc", "sweep", "grad-check", "gen-synth")

# small enough for an exhaustive finite-difference check
GRADCHECK_DEFAULTS = {"hidden": 8, "heads": 2, "n_way": 2, "k_shot": 2, "n_query": 1, "dropout": 0.0}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="mgimn", description="Multi-grained interactive matching for few-shot text classification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="initialization and sampling seed")
        p.add_argument("--dataset", help="JSONL dataset (default: synthetic corpus)")
        p.add_argument("--checkpoint", help="checkpoint to write (train) or read (eval)")
        p.add_argument("--out", help="output directory (gen-synth: output file)")
        p.add_argument("--setting", help="train: fsl|gfsl; eval-fsl: fsl5|fsl10")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key; repeatable")
    return parser


def _overrides(args):
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key in ("seed", "dataset", "checkpoint", "out"):
        value = getattr(args, key)
        if value is not None:
            values[key] = value
    setting = args.setting
    if setting:
        if args.command == "train" and setting in ("fsl", "gfsl"):
            values["gfsl"] = setting == "gfsl"
        elif args.command == "eval-fsl" and setting.startswith("fsl") and setting[3:].isdigit():
            values["n_way"] = setting[3:]
        else:
            raise ConfigError(f"setting {setting!r} does not apply to {args.command}")
    return values


def _resolve(args):
    overrides = _overrides(args)
    if args.command == "grad-check":
        in_file = set()
        if args.config:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    in_file = set(parse_assignments(fh, args.config))
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        for key, value in GRADCHECK_DEFAULTS.items():
            if key not in overrides and key not in in_file:
                overrides[key] = value
    return load_config(args.config, overrides)


def _checkpoint(cfg):
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    return Path(cfg.out) / "model.ckpt"


def _eval_rows(cfg, meta, setting, accuracy, ms=None):
    return [metric_row(meta.get("best_step", 0), None, accuracy, setting, ms)]


def run(argv=None, out=print):
    args = build_parser().parse_args(argv)
    cfg = _resolve(args)
    cmd = args.command

    if cmd == "gen-synth":
        dataset = load_data(cfg.replace(dataset=""))
        target = Path(cfg.out)
        if target.suffix != ".jsonl":
            target.mkdir(parents=True, exist_ok=True)
            target = target / "synth.jsonl"
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
        dataset.save(target)
        out(f"wrote {len(dataset)} instances over {dataset.num_classes} classes to {target}")
        return 0

    if cmd == "train":
        result = train(cfg, out_dir=cfg.out, log=out)
        out(f"best step {result.best_step}, val accuracy "
            f"{'n/a' if result.best_val is None else f'{result.best_val:.4f}'}; "
            f"checkpoint {_checkpoint(cfg)}")
        return 0

    if cmd == "sweep":
        report = sweep(cfg, log=out)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        with open(Path(cfg.out) / "sweep.csv", "w", encoding="utf-8") as fh:
            fh.write("split_seed,seed,accuracy\n")
            for row in report.rows():
                fh.write(f"{row['split_seed']},{row['seed']},{row['accuracy']:.6f}\n")
        out(f"accuracy {report.mean:.4f} +- {report.std:.4f} over {len(report.members)} runs")
        return 0

    if cmd == "grad-check":
        failed = False
        for kind, report in grad_check_models(cfg).items():
            out(f"== {kind}")
            for line in report.lines():
                out(line)
            failed |= not report.passed
        if failed:
            raise CheckFailure("gradient check failed")
        return 0

    ckpt = _checkpoint(cfg)
    model, vocab, meta = load_model(ckpt, cfg)
    out(f"{cfg.model}: {model.params.count()} parameters loaded from {ckpt}")
    dataset = load_data(cfg)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    metrics = Path(cfg.out) / "metrics.csv"
    if cmd == "eval-fsl":
        acc = evaluate_fsl(model, vocab, dataset, cfg)
        setting = f"fsl{cfg.n_way}"
        append_metrics(metrics, _eval_rows(cfg, meta, setting, acc))
        summary = {"setting": setting, "accuracy": acc, "episodes": cfg.eval_episodes}
    elif cmd == "eval-gfsl":
        acc = evaluate_gfsl(model, vocab, dataset, cfg)
        append_metrics(metrics, _eval_rows(cfg, meta, "gfsl", acc))
        summary = {"setting": "gfsl", "accuracy": acc, "episodes": cfg.eval_episodes,
                   "classes": dataset.num_classes}
    else:
        rep = run_rtc(model, vocab, dataset, cfg)
        append_metrics(metrics, _eval_rows(cfg, meta, "rtc", rep.accuracy, rep.ms_rtc)
                       + _eval_rows(cfg, meta, "gfsl", rep.full_accuracy, rep.ms_full))
        summary = {"setting": "rtc", "accuracy": rep.accuracy, "full_accuracy": rep.full_accuracy,
                   "recall": rep.recall, "ms_per_query_rtc": rep.ms_rtc,
                   "ms_per_query_full": rep.ms_full, "speedup": rep.speedup,
                   "retrieve_n": cfg.retrieve_n, "retrieval": cfg.retrieval, "queries": rep.queries}
    (Path(cfg.out) / f"{summary['setting']}.json").write_text(json.dumps(summary, indent=1) + "\n",
                                                               encoding="utf-8")
    for key, value in summary.items():
        out(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")
    return 0


def main(argv=None):
    try:
        return run(argv)
    except MgimnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
