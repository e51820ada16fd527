"""Command-line entry point: ``earlybird run | distances | inspect``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 training divergence.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import OUTPUT_ROOT_ENV, load_config
from .errors import CheckpointError, ConfigError, DataFormatError, InputError, MaskError, SpecError, TrainingError
from .experiment import run_distances, run_experiment
from .model import count_flops

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _cmd_run(args):
    cfg = load_config(args.config)
    summary = run_experiment(cfg, resume=args.resume)
    for r in summary.get("results", []):
        print(f"{r['name']}: ticket epoch {r['ticket_epoch']}, final accuracy {r['final_accuracy']:.4f}, "
              f"total FLOPs {r['cost']['total_flops']:.4g}")
    print(f"artifacts: {cfg.output_path()}")


def _cmd_distances(args):
    if not 0 < args.p < 1:
        raise ConfigError(f"--p must lie in (0, 1), got {args.p}")
    out = args.out
    if out is not None and os.environ.get(OUTPUT_ROOT_ENV) and not Path(out).is_absolute():
        out = Path(os.environ[OUTPUT_ROOT_ENV]) / out
    _, summary = run_distances(args.ckpt_dir, args.p, out, args.epsilon, args.window, args.normalize)
    epochs = summary["epochs"]
    print(f"{len(epochs)} checkpoints, epochs {epochs[0]}..{epochs[-1]}")
    if summary["triggered"]:
        print(f"EB ticket at epoch {summary['ticket_epoch']}")
    else:
        print("no EB ticket within the saved epochs")


def _cmd_inspect(args):
    ckpt = load_checkpoint(args.ckpt)
    cost = count_flops(ckpt.spec)
    info = {
        "epoch": ckpt.epoch,
        "format_version": ckpt.version,
        "phase": ckpt.extra.get("phase"),
        "precision": ckpt.extra.get("precision"),
        "channels": ckpt.spec.conv_channels(),
        "params": cost.params,
        "forward_flops": cost.forward_flops,
        "tensors": {k: list(v.shape) for k, v in ckpt.params.items()},
        "optimizer": ckpt.optimizer,
        "detector": None if ckpt.detector is None else {
            k: ckpt.detector[k] for k in ("epsilon", "window", "queue", "epoch")},
        "last_metrics": (ckpt.extra.get("metrics") or [None])[-1],
    }
    print(json.dumps(info, indent=2, sort_keys=True))


def build_parser():
    parser = argparse.ArgumentParser(prog="earlybird", description="Early-bird ticket search, pruning and retraining.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the experiment described by a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="dense-phase checkpoint to continue from")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("distances", help="distance matrix and retroactive detection over saved checkpoints")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--p", type=float, required=True, help="pruning ratio")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--normalize", choices=("per-pair", "matrix-minmax"), default="per-pair")
    p.add_argument("--out", help="output directory (default: the checkpoint directory)")
    p.set_defaults(func=_cmd_distances)

    p = sub.add_parser("inspect", help="print a checkpoint's metadata")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, InputError, MaskError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
