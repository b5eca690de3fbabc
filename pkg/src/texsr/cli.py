"""Command-line interface.

Subcommands: prepare, swap, train, infer, eval, compare, scatter, match.
Run configuration comes from an optional flat key=value file (--config)
with every key overridable by a --key=value flag. Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

import numpy as np

from .errors import DataError, NumericError, TexsrError, UsageError
from .image_core import degrade, load_image, save_image, save_tensor
from .pipeline import (
    TrainConfig,
    compare_scores,
    evaluate,
    infer,
    load_config,
    precompute_swaps,
    prepare_dataset,
    read_scores_csv,
    render_verdict,
    train,
)
from .scattering import scatter
from .texture_transfer import dense_match, match_visualization, save_match_map


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", default=None,
                        help="flat key=value run configuration file")
    for f in fields(TrainConfig):
        parser.add_argument(f"--{f.name}", metavar="V", default=None,
                            help=f"override config key {f.name}")


def _config_from_args(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name) is not None}
    return load_config(args.config, overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="texsr",
                     description="Reference-based texture-transfer "
                                 "super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="crop HR/LR training pairs from slices")
    p.add_argument("hr_dir")
    p.add_argument("out_dir")
    _add_config_flags(p)

    p = sub.add_parser("swap", help="precompute swapped features for a dataset")
    p.add_argument("dataset_dir")
    p.add_argument("out_dir")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train the SR network")
    p.add_argument("dataset_dir")
    p.add_argument("out_dir")
    p.add_argument("--swaps", default=None,
                   help="swap archive directory (enables texture transfer)")
    _add_config_flags(p)

    p = sub.add_parser("infer", help="super-resolve one LR image")
    p.add_argument("checkpoint")
    p.add_argument("lr_image")
    p.add_argument("out_image")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score two methods on a test directory")
    p.add_argument("method_a", help="'bicubic' or a checkpoint path")
    p.add_argument("method_b", help="'bicubic' or a checkpoint path")
    p.add_argument("test_dir")
    p.add_argument("out_csv")
    _add_config_flags(p)

    p = sub.add_parser("compare", help="significance verdict from a score CSV")
    p.add_argument("csv_path")

    p = sub.add_parser("scatter", help="dump scattering features of an image")
    p.add_argument("image")
    p.add_argument("out_tensor")
    _add_config_flags(p)

    p = sub.add_parser("match", help="dense-match an image against a reference")
    p.add_argument("input_image", help="input at reference resolution (LR upsampled)")
    p.add_argument("ref_image")
    p.add_argument("out_map")
    p.add_argument("--viz", default=None, metavar="PGM",
                   help="also write a PGM visualization of matched indices")
    _add_config_flags(p)

    return parser


def _cmd_prepare(args) -> None:
    cfg = _config_from_args(args)
    n = prepare_dataset(args.hr_dir, args.out_dir, cfg)
    print(f"wrote {n} patch pairs to {args.out_dir}")


def _cmd_swap(args) -> None:
    cfg = _config_from_args(args)
    n = precompute_swaps(args.dataset_dir, args.out_dir, cfg)
    print(f"wrote {n} swapped feature maps to {args.out_dir}")


def _cmd_train(args) -> None:
    cfg = _config_from_args(args)
    ckpt, manifest = train(cfg, args.dataset_dir, args.swaps, args.out_dir)
    print(f"checkpoint: {ckpt}")
    print(f"manifest: {manifest}")


def _cmd_infer(args) -> None:
    cfg = _config_from_args(args)
    sr = infer(args.checkpoint, args.lr_image, cfg)
    save_image(sr, args.out_image, bit_depth=16)
    print(f"wrote {args.out_image}")


def _cmd_eval(args) -> None:
    cfg = _config_from_args(args)
    _, verdict = evaluate(args.method_a, args.method_b, args.test_dir, cfg,
                          out_csv=args.out_csv)
    print(f"wrote {args.out_csv}")
    print(render_verdict(verdict))


def _cmd_compare(args) -> None:
    rows = read_scores_csv(args.csv_path)
    print(render_verdict(compare_scores(rows)))


def _cmd_scatter(args) -> None:
    cfg = _config_from_args(args)
    img = load_image(args.image)
    save_tensor(scatter(img, cfg.scatter_config()), args.out_tensor)
    print(f"wrote {args.out_tensor}")


def _cmd_match(args) -> None:
    cfg = _config_from_args(args)
    img = load_image(args.input_image)
    ref = load_image(args.ref_image)
    scfg = cfg.scatter_config()
    f_in = scatter(img, scfg)
    f_ref_blur = scatter(degrade(ref, cfg.sr_factor)[1], scfg)
    match = dense_match(f_in, f_ref_blur,
                        normalized=cfg.similarity_normalized)
    save_match_map(match, args.out_map)
    print(f"wrote {args.out_map} (mean score {float(np.mean(match.scores)):.4f})")
    if args.viz:
        grid = match.grid
        pool = (f_ref_blur.shape[1] - grid.patch_size + 1) * \
               (f_ref_blur.shape[2] - grid.patch_size + 1)
        save_image(match_visualization(match, pool), args.viz)
        print(f"wrote {args.viz}")


_COMMANDS = {
    "prepare": _cmd_prepare,
    "swap": _cmd_swap,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "scatter": _cmd_scatter,
    "match": _cmd_match,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.getLogger("texsr").setLevel(logging.DEBUG)
        _COMMANDS[args.command](args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except TexsrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
