"""Command-line entry point: ``cgidm <command> [--config PATH] [--seed N] [--out DIR] [--jobs N]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import MissingArtifact, Run, sweep

COMMANDS = ("gen-data", "pretrain", "finetune", "mask", "invert", "baseline", "evaluate", "mia",
            "sweep", "run")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cgidm", description="Desk-scale contrasting gradient inversion lab.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="experiment config file (key = value under [section] headers)")
    ap.add_argument("--seed", type=int, help="override experiment.seed")
    ap.add_argument("--out", default="runs/default", help="run directory (default: %(default)s)")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for invert/baseline")
    ap.add_argument("--force", action="store_true", help="accept artifacts made under a different config")
    ap.add_argument("--method", action="append", help="invert: method(s) to run (cgi, direct, latent)")
    ap.add_argument("--pipeline", action="append", help="baseline: pipeline(s) (text2img, img2img, inpaint)")
    ap.add_argument("--axis", help="sweep: train_steps, num_images, mask_kind or extraction_steps")
    ap.add_argument("--values", help="sweep: comma-separated values")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _print_rows(header, rows):
    print(",".join(header))
    for r in rows:
        print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_overrides(experiment__seed=args.seed)
        run = Run(args.out, cfg, args.jobs, args.force)
        cmd = args.command
        if cmd == "gen-data":
            run.gen_data()
        elif cmd == "pretrain":
            run.pretrain()
        elif cmd == "finetune":
            run.finetune()
        elif cmd == "mask":
            run.mask()
        elif cmd == "invert":
            run.invert(args.method)
        elif cmd == "baseline":
            run.baseline(args.pipeline)
        elif cmd == "evaluate":
            _print_rows(["source", "metric", "acc_universal", "acc_per_class", "auc"], run.evaluate())
        elif cmd == "mia":
            _print_rows(["method", "t", "auc"], run.mia())
        elif cmd == "sweep":
            values = args.values.split(",") if args.values else None
            _print_rows(["axis", "value", "source", "metric", "acc_universal", "acc_per_class", "auc"],
                        sweep(run, args.axis, values))
        else:
            _print_rows(["source", "metric", "acc_universal", "acc_per_class", "auc"], run.run_all())
    except (ConfigError, MissingArtifact, ValueError) as e:
        print(f"cgidm: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
