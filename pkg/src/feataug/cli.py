"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (flags, config, checkpoint files),
2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from feataug.ablate import SUITES, check_suite_config, run_suite, to_csv, to_markdown
from feataug.checkpoint import Checkpoint, CheckpointError
from feataug.config import ConfigError, RunConfig, load_config, parse_config
from feataug.evaluation import knn_probe, linear_probe
from feataug.train import TrainingError, load_dataset, metrics_to_json, parse_metrics_csv, train_pretrain

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="feataug", description="Contrastive pre-training with feature augmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pre = sub.add_parser("pretrain", help="pre-train an encoder")
    pre.add_argument("--config", required=True)
    pre.add_argument("--seed", type=int)
    pre.add_argument("--out", help="run directory (default: train.out_dir)")
    pre.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint file")

    pr = sub.add_parser("probe", help="linear and kNN probe of a checkpoint encoder")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--config", required=True)

    ab = sub.add_parser("ablate", help="run an ablation grid")
    ab.add_argument("--suite", required=True, choices=SUITES)
    ab.add_argument("--config", required=True)
    ab.add_argument("--out", help="output directory (default: <train.out_dir>/ablate-<suite>)")

    ex = sub.add_parser("export-metrics", help="print a run's metrics log")
    ex.add_argument("--run", required=True, metavar="DIR")
    ex.add_argument("--format", required=True, choices=("csv", "json"))
    return p


def _load_config(path: str) -> RunConfig:
    try:
        return load_config(path)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from None


def _load_checkpoint(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror or e}") from None


def cmd_pretrain(args) -> int:
    resume = None
    if args.resume:
        resume = _load_checkpoint(args.resume)
        try:
            cfg = parse_config(resume.descriptors["config"])
        except KeyError:
            raise CheckpointError("checkpoint lacks a run configuration") from None
    else:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg = cfg.copy({"train.seed": args.seed})
    out = args.out or cfg.train.out_dir
    cfg = cfg.copy({"train.out_dir": out})
    dataset = load_dataset(cfg)
    ckpt, rows = train_pretrain(cfg, dataset, out, resume)
    summary = {
        "out_dir": out,
        "steps": ckpt.state["step"],
        "final_loss": rows[-1].loss_total if rows else None,
        "checkpoint": os.path.join(out, "checkpoint.facn"),
    }
    print(json.dumps(summary))
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _load_config(args.config)
    ckpt = _load_checkpoint(args.checkpoint)
    dataset = load_dataset(cfg)
    try:
        res = linear_probe(ckpt, dataset, cfg.probe)
        knn = knn_probe(ckpt, dataset, cfg.probe.knn_k)
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing tensor {e}") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None
    print(json.dumps({"linear_probe": res.accuracy, "train_accuracy": res.train_accuracy, "knn": knn}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    check_suite_config(args.suite, cfg)
    out = args.out or os.path.join(cfg.train.out_dir, f"ablate-{args.suite}")
    result = run_suite(args.suite, cfg)
    md, table = to_markdown(result), to_csv(result)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, f"{args.suite}.md"), "w", encoding="utf-8") as fh:
        fh.write(md)
    with open(os.path.join(out, f"{args.suite}.csv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    sys.stdout.write(md + "\n" + table)
    return EXIT_OK


def cmd_export(args) -> int:
    path = os.path.join(args.run, "metrics.csv")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror or e}") from None
    try:
        parse_metrics_csv(text)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    sys.stdout.write(text if args.format == "csv" else metrics_to_json(text))
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "probe": cmd_probe, "ablate": cmd_ablate, "export-metrics": cmd_export}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
