"""Command line entry point: ``sdgen <subcommand> ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric abort or
unreadable checkpoint.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ck
from . import harness
from . import uncertainty as un
from .config import describe, load_config
from .errors import CheckpointError, ConfigError, NumericError, ParseError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("sdgen")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _config_args(p):
    p.add_argument("--config", action="append", default=[], metavar="FILE", help="config file (repeatable)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdgen", description="Single-source domain generalization toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write metrics.csv, summary.json, final.ckpt")
    _config_args(p)
    p.add_argument("--output-dir", help="overrides output_dir")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--force", action="store_true", help="accept a checkpoint written under another config")

    p = sub.add_parser("eval", help="per-domain accuracy table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory of .npz / IDX domains (default: the checkpoint config's targets)")
    p.add_argument("--csv", help="also write the table here")

    p = sub.add_parser("adapt", help="few-shot fine-tuning on a labelled target domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help=".npz file or directory with one target domain")
    p.add_argument("--shots", type=int, help="labelled examples per class (default adapt.shots)")
    p.add_argument("--steps", type=int, help="fine-tuning steps (default adapt.steps)")
    p.add_argument("--lr", type=float, help="learning rate (default adapt.lr)")
    p.add_argument("--output", help="write the adapted checkpoint here")

    p = sub.add_parser("uncertainty", help="domain uncertainty score per probe domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory of .npz / IDX domains (default: the checkpoint config's targets)")
    p.add_argument("--probe-size", type=int, default=256, help="examples per probe batch")
    p.add_argument("--no-baseline", action="store_true", help="skip the sampling baseline")
    p.add_argument("--json", help="write machine-readable records here")

    p = sub.add_parser("augment-preview", help="dump (x, x+) image pairs and distance stats")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help=".npz file or directory (default: the checkpoint's source data)")
    p.add_argument("--n", type=int, default=8, help="examples to preview")
    p.add_argument("--output-dir", default="preview")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="run an ablation grid")
    _config_args(p)
    p.add_argument("--suite", required=True, choices=sorted(harness.ABLATIONS))
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (0..n-1)")
    p.add_argument("--csv", help="also write the table here")

    sub.add_parser("config", help="list every config key with its default")
    return parser


def _load(path, force=False):
    return ck.load(path, force=force)


def _domains(checkpoint: ck.Checkpoint, data):
    cfg = checkpoint.config
    if data:
        return harness.load_domains(data, cfg["data.channels"], cfg["data.size"])
    return harness.resolve_data(cfg).targets


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    state, summary = harness.train(cfg, cfg["output_dir"], resume=args.resume, force=args.force)
    print(f"trained {state.iteration} iterations in {summary['wall_time_s']:.1f}s -> {summary['checkpoint']}")
    rows = [{"domain": k, "accuracy": v} for k, v in summary["target_accuracy"].items()]
    if rows:
        print(harness.format_table(rows), end="")


def cmd_eval(args):
    c = _load(args.checkpoint)
    state = c.state()
    rows = harness.evaluate_domains(state.model, _domains(c, args.data))
    print(harness.format_table(rows), end="")
    if args.csv:
        Path(args.csv).write_text(harness.to_csv(rows))


def cmd_adapt(args):
    c = _load(args.checkpoint)
    cfg = c.config
    state = c.state()
    (target, *_rest) = harness.load_domains(args.data, cfg["data.channels"], cfg["data.size"])
    shots = args.shots if args.shots is not None else cfg["adapt.shots"]
    steps = args.steps if args.steps is not None else cfg["adapt.steps"]
    lr = args.lr if args.lr is not None else cfg["adapt.lr"]
    res = harness.few_shot_adapt(state.model, target, shots, steps, lr, seed=cfg["seed"])
    print(harness.format_table([{"domain": harness.domain_name(target, 0), "shots": shots, "steps": steps,
                                 "accuracy_before": res.accuracy_before, "accuracy_after": res.accuracy_after}]),
          end="")
    if args.output:
        state.model.load_state_dict(res.model.state_dict())
        ck.save(state, args.output)


def cmd_uncertainty(args):
    c = _load(args.checkpoint)
    cfg = c.config
    state = c.state()
    if state.aux is None:
        raise ConfigError("checkpoint has no perturbation head (uncertainty mode with k_domains >= 1 required)")
    rows, records = [], []
    for i, d in enumerate(_domains(c, args.data)):
        x = d.inputs[: args.probe_size]
        r = un.uncertainty_report(state.model, state.aux, x, cfg["uncertainty.adapt_steps"],
                                  cfg["uncertainty.adapt_lr"], None if args.no_baseline else cfg["uncertainty.n_samples"],
                                  seed=cfg["seed"], adapt_batch=cfg["uncertainty.adapt_batch"])
        name = harness.domain_name(d, i)
        rows.append({"domain": name, **r.row()})
        records.append({"domain": name, **r.row(), "sigma_source": r.sigma_source.tolist(),
                        "sigma_target": r.sigma_target.tolist()})
    print(harness.format_table(rows), end="")
    if args.json:
        Path(args.json).write_text(json.dumps(records, indent=2) + "\n")


def cmd_augment_preview(args):
    from PIL import Image

    c = _load(args.checkpoint)
    cfg = c.config
    state = c.state()
    ds = harness.load_domains(args.data, cfg["data.channels"], cfg["data.size"])[0] if args.data \
        else harness.resolve_data(cfg).source
    x, labels = ds.inputs[: args.n], ds.labels[: args.n]
    pairs, rows = harness.augment_preview(state, x, labels, seed=args.seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if pairs is not None:
        for i, img in enumerate(pairs):
            Image.fromarray(np.ascontiguousarray(img)).save(out / f"pair_{i:03d}.png")
    (out / "stats.csv").write_text(harness.to_csv(rows))
    print(harness.format_table(rows), end="")
    print(f"wrote {0 if pairs is None else len(pairs)} image pairs and stats.csv to {out}")


def cmd_ablate(args):
    cfg = load_config(args.config, args.set)
    rows = harness.run_ablation(cfg, args.suite, tuple(range(args.seeds)), log=log.info)
    print(harness.format_table(rows), end="")
    if args.csv:
        Path(args.csv).write_text(harness.to_csv(rows))


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "adapt": cmd_adapt, "uncertainty": cmd_uncertainty,
            "augment-preview": cmd_augment_preview, "ablate": cmd_ablate,
            "config": lambda args: print(describe(), end="")}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args)
    except (ConfigError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
