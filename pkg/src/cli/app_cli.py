"""
Command-line front end: parse flags, resolve settings, run the matching
workflow and map errors onto exit codes (0 ok, 2 usage, 3 I/O, 4 numerical).
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Callable, Sequence

from threadpoolctl import threadpool_limits

from src.backend import workflow
from src.backend.config import (
    APP_NAME,
    DEFAULT_EVAL,
    DEFAULT_PRETRAIN,
    DEFAULT_SYNTHETIC,
    DEFAULT_TRAIN,
    get_thread_cap,
)
from src.backend.data.data_path import default_pretrained_dir, default_run_dir, describe_runs_root, get_runs_root
from src.backend.errors import EXIT_IO, EXIT_OK, TriTowerError
from src.backend.model.towers import HEAD_VARIANTS, MODALITIES, PROJECTION_KINDS
from src.backend.model.losses import DROP_TERMS
from src.cli.utility import flags_from, resolve_settings

logger = logging.getLogger(__name__)

MODE_CHOICES = ("baseline", "lit", "3t")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------

def _cmd_gen_data(args: argparse.Namespace) -> None:
    settings = resolve_settings(DEFAULT_SYNTHETIC, flags_from(args, DEFAULT_SYNTHETIC), args.config)
    workflow.run_gen_data(settings, Path(args.out), force=args.force)


def _cmd_pretrain(args: argparse.Namespace) -> None:
    settings = resolve_settings(DEFAULT_PRETRAIN, flags_from(args, DEFAULT_PRETRAIN), args.config)
    out = Path(args.out) if args.out else default_pretrained_dir(args.data)
    workflow.run_pretrain(settings, Path(args.data), out)


def _train_settings(args: argparse.Namespace) -> dict:
    return resolve_settings(DEFAULT_TRAIN, flags_from(args, DEFAULT_TRAIN), args.config)


def _cmd_train(args: argparse.Namespace) -> None:
    settings = _train_settings(args)
    out = Path(args.out) if args.out else default_run_dir("train", str(settings["mode"]), int(settings["seed"]))
    pretrained = Path(args.pretrained) if args.pretrained else None
    workflow.run_train(settings, Path(args.data), pretrained, out)


def _cmd_eval(args: argparse.Namespace) -> None:
    settings = resolve_settings(DEFAULT_EVAL, flags_from(args, DEFAULT_EVAL), args.config)
    out = Path(args.out) if args.out else None
    workflow.run_eval(settings, Path(args.checkpoint), Path(args.data), args.alpha, out)


def _cmd_report(args: argparse.Namespace) -> None:
    out = Path(args.out) if args.out else get_runs_root() / "report"
    workflow.run_report([Path(p) for p in args.runs], out)


def _cmd_sweep(args: argparse.Namespace) -> None:
    settings = _train_settings(args)
    eval_settings = resolve_settings(DEFAULT_EVAL, flags_from(args, DEFAULT_EVAL))
    out = Path(args.out) if args.out else get_runs_root() / "sweep"
    pretrained = Path(args.pretrained) if args.pretrained else None
    workflow.run_sweep(settings, eval_settings, Path(args.data), pretrained, args.modes, args.seeds, out)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file overriding defaults (explicit flags still win)")
    parser.add_argument("--seed", type=int, help="seed for every random draw (default 0)")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="dataset directory written by gen-data")
    parser.add_argument("--pretrained", help="directory written by pretrain (required for lit and 3t)")
    parser.add_argument("--frozen-modality", dest="frozen_modality", choices=MODALITIES)
    parser.add_argument("--head-variant", dest="head_variant", choices=HEAD_VARIANTS)
    parser.add_argument("--third-tower", dest="third_tower", choices=PROJECTION_KINDS)
    parser.add_argument("--loss-weight", dest="loss_weight", type=float)
    parser.add_argument("--transfer", choices=("contrastive", "l2"))
    parser.add_argument("--temps", choices=("shared", "per-term"))
    parser.add_argument("--drop-term", dest="drop_term", choices=DROP_TERMS)
    parser.add_argument(
        "--init-main-from-pretrained",
        dest="init_main_from_pretrained",
        action="store_true",
        default=None,
    )
    parser.add_argument("--embed-dim", dest="embed_dim", type=int)
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--lr", dest="peak_lr", type=float)
    parser.add_argument("--warmup", dest="warmup_steps", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--batch", dest="batch_size", type=int)
    parser.add_argument("--clip-norm", dest="clip_norm", type=float)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--beta1", type=float)
    parser.add_argument("--beta2", type=float)
    parser.add_argument("--log-every", dest="log_every", type=int)
    parser.add_argument("--out", help="run directory (default under the runs root)")
    _add_common(parser)


def _add_eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ood-split", dest="ood_split", choices=("train", "eval", "ood"))
    parser.add_argument("--shots", type=int)
    parser.add_argument("--probe-seeds", dest="probe_seeds", type=int)
    parser.add_argument("--ece-bins", dest="ece_bins", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=APP_NAME.lower(),
        description="Desk-scale lab for baseline, LiT and three-tower contrastive training.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="generate a synthetic paired dataset")
    gen.add_argument("--out", required=True, help="dataset directory")
    gen.add_argument("--force", action="store_true", help="overwrite an existing dataset directory")
    gen.add_argument("--latent-dim", dest="latent_dim", type=int)
    gen.add_argument("--img-dim", dest="img_dim", type=int)
    gen.add_argument("--txt-dim", dest="txt_dim", type=int)
    gen.add_argument("--classes", dest="num_classes", type=int)
    gen.add_argument("--pairs", dest="num_pairs", type=int)
    gen.add_argument("--noise", dest="noise_sigma", type=float)
    gen.add_argument("--visible-dims", dest="visible_dims", type=int)
    gen.add_argument("--ood-classes", dest="ood_classes", type=int)
    gen.add_argument("--eval-fraction", dest="eval_fraction", type=float)
    _add_common(gen)
    gen.set_defaults(handler=_cmd_gen_data)

    pre = commands.add_parser("pretrain", help="train the frozen classifier and write its embedding table")
    pre.add_argument("--data", required=True, help="dataset directory")
    pre.add_argument("--visible-dims", dest="visible_dims", type=int)
    pre.add_argument("--modality", choices=MODALITIES)
    pre.add_argument("--embed-dim", dest="embed_dim", type=int)
    pre.add_argument("--hidden", type=int)
    pre.add_argument("--steps", type=int)
    pre.add_argument("--batch", dest="batch_size", type=int)
    pre.add_argument("--lr", type=float)
    pre.add_argument("--out", help="output directory (default <data>/pretrained)")
    _add_common(pre)
    pre.set_defaults(handler=_cmd_pretrain)

    tr = commands.add_parser("train", help="train a baseline, lit or 3t model")
    tr.add_argument("--mode", choices=MODE_CHOICES)
    _add_train_flags(tr)
    tr.set_defaults(handler=_cmd_train)

    ev = commands.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True, help="train run directory or its checkpoint/")
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--alpha", type=float, action="append", help="convex-combination weight (repeatable)")
    ev.add_argument("--out", help="report directory (default <run>/eval)")
    ev.add_argument("--config", help="JSON file overriding defaults (explicit flags still win)")
    _add_eval_flags(ev)
    ev.set_defaults(handler=_cmd_eval)

    rep = commands.add_parser("report", help="compare evaluated runs")
    rep.add_argument("--runs", nargs="+", required=True, help="run or eval directories")
    rep.add_argument("--out", help="output directory")
    rep.set_defaults(handler=_cmd_report)

    sw = commands.add_parser("sweep", help="train and evaluate several modes and seeds")
    sw.add_argument("--modes", nargs="+", choices=MODE_CHOICES, default=list(MODE_CHOICES))
    sw.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    _add_train_flags(sw)
    _add_eval_flags(sw)
    sw.set_defaults(handler=_cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    logger.debug("Runs root:\n%s", describe_runs_root())
    handler: Callable[[argparse.Namespace], None] = args.handler
    try:
        with threadpool_limits(limits=get_thread_cap()):
            handler(args)
    except TriTowerError as err:
        logger.error("%s", err)
        return err.exit_code
    except OSError as err:
        logger.error("%s", err)
        return EXIT_IO
    return EXIT_OK
