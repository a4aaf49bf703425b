"""Command-line entry point.

Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 no model for the
requested codec / QP.  Every subcommand checks its inputs before it writes
any output file.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .dispatch import MissingModelError, ModelRegistry, select_model
from .frames import YuvError, enhance_frame, frame_bytes, iter_yuv, write_yuv
from .metrics import (BdTable, CurveError, bd_rate, curve_from_csv, curves_gnuplot_text, curves_long_csv_text,
                      psnr, qp_subrange, ssim_metric, table_from_manifest)
from .models import CODECS, METHODS, DiscriminatorConfig, GeneratorConfig, ModelFileError, load_model, save_model
from .training import BlockPairDataset, SequencePair, TrainConfig, build_dataset, train_l1, train_perceptual

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_MISSING_MODEL = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def _add_geometry(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--width", type=int, required=required)
    p.add_argument("--height", type=int, required=required)
    p.add_argument("--bit-depth", type=int, default=10)
    p.add_argument("--fps", type=float, default=None, help="frame rate (recorded only)")


def _check_output(path) -> Path:
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise FileNotFoundError(f"output directory {parent} does not exist")
    return path


def _write_atomic(path: Path, write) -> None:
    tmp = path.with_name(path.name + ".part")
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _yuv_frames(path, args) -> int:
    """Frame count of a raw file; rejects sizes that are not whole frames."""
    size = frame_bytes(args.width, args.height, args.bit_depth)
    total = os.path.getsize(path)
    if total == 0 or total % size:
        raise UsageError(f"{path}: {total} bytes is not a whole number of {args.width}x{args.height} "
                         f"{args.bit_depth}-bit 4:2:0 frames ({size} bytes each)")
    return total // size


# dataset build

def _read_pair_list(path, default_depth: int) -> list[SequencePair]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        f = line.split()
        if len(f) not in (4, 5):
            raise UsageError(f"{path}:{lineno}: expected 'compressed original width height [bit_depth]'")
        try:
            pairs.append(SequencePair(f[0], f[1], int(f[2]), int(f[3]), int(f[4]) if len(f) == 5 else default_depth))
        except ValueError:
            raise UsageError(f"{path}:{lineno}: geometry must be integers") from None
    return pairs


def cmd_dataset_build(args) -> int:
    pairs = []
    if args.pair:
        if args.width is None or args.height is None:
            raise UsageError("--pair needs --width and --height")
        pairs += [SequencePair(c, o, args.width, args.height, args.bit_depth) for c, o in args.pair]
    if args.list:
        pairs += _read_pair_list(args.list, args.bit_depth)
    if not pairs:
        raise UsageError("give at least one --pair or a --list file")
    for p in pairs:
        for f in (p.compressed, p.original):
            if not os.path.isfile(f):
                raise FileNotFoundError(f"{f}: no such file")
    out = _check_output(args.output)
    ds = build_dataset(pairs, args.blocks_per_frame, args.frames_per_sequence, args.seed, args.codec,
                       args.qp_group, args.block_size)
    _write_atomic(out, ds.save)
    print(f"wrote {len(ds)} block pairs ({ds.block_size}x{ds.block_size}) from {len(pairs)} sequence pair(s) "
          f"to {out}")
    for src, p in enumerate(pairs):
        rows = ds.index[ds.index[:, 0] == src]
        print(f"  {p.compressed}: {len(rows)} blocks from {len(set(rows[:, 1].tolist()))} frame(s)")
    return EXIT_OK


# train

def _train_config(args, block: int) -> TrainConfig:
    base = TrainConfig()
    g = GeneratorConfig(args.residual_blocks, args.features, input_block_size=block)
    d = DiscriminatorConfig(base_width=args.disc_width, dense_width=args.disc_dense, input_block_size=block)
    over = {k: getattr(args, k) for k in ("epochs", "stage1_epochs", "lr", "lr_decay", "decay_every",
                                          "batch_size", "seed", "alpha", "beta", "max_steps")
            if getattr(args, k) is not None}
    return dataclasses.replace(base, method=args.method, generator=g, discriminator=d, **over)


def cmd_train(args) -> int:
    ds = BlockPairDataset.load(args.dataset)
    config = _train_config(args, ds.block_size)
    out = _check_output(args.output)
    log = _check_output(args.log or f"{out}.log.csv")
    if args.checkpoint:
        _check_output(args.checkpoint)
    if args.resume and not os.path.isfile(args.resume):
        raise FileNotFoundError(f"{args.resume}: no such checkpoint")
    if not args.resume and log.exists():
        log.unlink()  # a fresh run starts a fresh log; resumed runs append
    train = train_l1 if config.method == "l1" else train_perceptual
    res = train(ds, config, log_path=log, checkpoint_path=args.checkpoint, resume=args.resume,
                stop_after_epoch=args.stop_after_epoch)
    if res.bundle is None:
        print(f"stopped after epoch {res.state.epoch - 1}; checkpoint {args.checkpoint}")
        return EXIT_OK
    _write_atomic(out, lambda p: save_model(res.bundle, p))
    last = res.history[-1]["loss_total"]
    print(f"trained {config.method} model: {res.state.step} steps, final epoch loss {last:.6g}; wrote {out}")
    return EXIT_OK


# enhance

def cmd_enhance(args) -> int:
    if not os.path.isfile(args.input):
        raise FileNotFoundError(f"{args.input}: no such file")
    n = _yuv_frames(args.input, args)
    if args.model:
        bundle = load_model(args.model)
        if args.codec is not None and bundle.codec != args.codec:
            raise UsageError(f"{args.model} is a {bundle.codec} model, not {args.codec}")
        if args.qp is not None and args.codec is not None:
            want = select_model(args.codec, args.qp)
            if bundle.qp_group != want:
                raise UsageError(f"{args.model} is a {bundle.qp_group} model; QP {args.qp} selects {want}")
    else:
        if args.codec is None or args.qp is None:
            raise UsageError("--models needs --codec and --qp")
        bundle = ModelRegistry.from_manifest(args.models).resolve(args.codec, args.qp, args.method)
    out = _check_output(args.output)
    frames = n if args.frames is None else min(n, args.frames)

    def write(path):
        with open(path, "wb"):
            pass
        for i, frame in enumerate(iter_yuv(args.input, args.width, args.height, args.bit_depth)):
            if i >= frames:
                break
            write_yuv(path, enhance_frame(bundle, frame, args.batch_size, args.workers), append=True)

    print(f"model: {bundle.codec} {bundle.qp_group} {bundle.method}")
    _write_atomic(out, write)
    print(f"enhanced {frames} frame(s) -> {out}")
    return EXIT_OK


# quality

def cmd_quality(args) -> int:
    for f in (args.reference, args.test):
        if not os.path.isfile(f):
            raise FileNotFoundError(f"{f}: no such file")
    n_ref, n_test = _yuv_frames(args.reference, args), _yuv_frames(args.test, args)
    if n_ref != n_test:
        raise UsageError(f"reference has {n_ref} frame(s), test has {n_test}")
    rows, ps, ss = ["frame,psnr_y,ssim_y"], [], []
    geo = (args.width, args.height, args.bit_depth)
    for i, (r, t) in enumerate(zip(iter_yuv(args.reference, *geo), iter_yuv(args.test, *geo))):
        ps.append(psnr(r, t, "y"))
        ss.append(ssim_metric(r, t))
        rows.append(f"{i},{ps[-1]!r},{ss[-1]!r}")
    rows.append(f"mean,{float(np.mean(ps))!r},{float(np.mean(ss))!r}")
    text = "\n".join(rows) + "\n"
    if args.csv:
        _write_atomic(_check_output(args.csv), lambda p: p.write_text(text, encoding="utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


# bdrate

def format_percent(v: float) -> str:
    """One decimal, without a negative sign on values that round to zero."""
    s = f"{v:.1f}"
    return ("0.0" if s == "-0.0" else s) + "%"


def cmd_bdrate(args) -> int:
    if args.table:
        if args.anchor or args.test:
            raise UsageError("--table takes no anchor/test curves")
        table: BdTable = table_from_manifest(args.table)
        csv_text = table.to_csv()
        if args.csv:
            _check_output(args.csv)
        sys.stdout.write(table.to_text())
        if args.csv:
            _write_atomic(Path(args.csv), lambda p: p.write_text(csv_text, encoding="utf-8"))
        return EXIT_OK
    if not (args.anchor and args.test):
        raise UsageError("give anchor and test curve CSVs, or --table")
    anchor, test = curve_from_csv(args.anchor), curve_from_csv(args.test)
    if args.qp_range:
        anchor = qp_subrange(anchor, args.qp_range, args.codec)
        test = qp_subrange(test, args.qp_range, args.codec)
    v = bd_rate(anchor, test)
    if args.csv:
        _write_atomic(_check_output(args.csv), lambda p: p.write_text(
            f"anchor,test,qp_range,bd_rate_percent\n{anchor.label},{test.label},{args.qp_range or 'all'},{v!r}\n",
            encoding="utf-8"))
    print(format_percent(v))
    return EXIT_OK


# curves

def cmd_curves(args) -> int:
    curves = [curve_from_csv(p) for p in args.curves]
    labels = [c.label for c in curves]
    if len(set(labels)) != len(labels):
        raise UsageError(f"curve labels must be unique, got {labels}")
    long_text, gp_text = curves_long_csv_text(curves), curves_gnuplot_text(curves)
    out = _check_output(args.output)
    gp = _check_output(args.gnuplot) if args.gnuplot else None
    _write_atomic(out, lambda p: p.write_text(long_text, encoding="utf-8"))
    if gp:
        _write_atomic(gp, lambda p: p.write_text(gp_text, encoding="utf-8"))
    print(f"wrote {sum(len(c) for c in curves)} points from {len(curves)} curve(s) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppkit", description="CNN post-processing for decoded video")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="training data").add_subparsers(dest="action", required=True)
    b = ds.add_parser("build", help="cut paired training blocks from YUV sequences")
    b.add_argument("--pair", nargs=2, action="append", metavar=("COMPRESSED", "ORIGINAL"))
    b.add_argument("--list", help="file of 'compressed original width height [bit_depth]' lines")
    _add_geometry(b, required=False)
    b.add_argument("--blocks-per-frame", type=int, default=8)
    b.add_argument("--frames-per-sequence", type=int, default=4)
    b.add_argument("--block-size", type=int, default=96)
    b.add_argument("--codec", choices=CODECS, default="VVC")
    b.add_argument("--qp-group", default="QP37")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--output", required=True)
    b.set_defaults(func=cmd_dataset_build)

    t = sub.add_parser("train", help="train a generator (and discriminator)")
    t.add_argument("dataset")
    t.add_argument("-o", "--output", required=True, help="model file to write")
    t.add_argument("--method", choices=METHODS, default="l1")
    t.add_argument("--epochs", type=int)
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--decay-every", type=int)
    t.add_argument("--max-steps", type=int, help="cap on updates per training stage")
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--residual-blocks", type=int, default=16)
    t.add_argument("--features", type=int, default=64)
    t.add_argument("--disc-width", type=int, default=64)
    t.add_argument("--disc-dense", type=int, default=1024)
    t.add_argument("--log", help="training log CSV (default: OUTPUT.log.csv)")
    t.add_argument("--checkpoint", help="checkpoint file written after every epoch")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--stop-after-epoch", type=int, help="stop (with a checkpoint) after this epoch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="post-process a decoded YUV file")
    e.add_argument("input")
    e.add_argument("-o", "--output", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--models", help="model registry manifest")
    src.add_argument("--model", help="single model file")
    e.add_argument("--codec", choices=CODECS)
    e.add_argument("--qp", type=float)
    e.add_argument("--method", choices=METHODS, default="perceptual")
    _add_geometry(e)
    e.add_argument("--frames", type=int, help="only the first N frames")
    e.add_argument("--batch-size", type=int, default=8)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_enhance)

    q = sub.add_parser("quality", help="per-frame Y-PSNR and SSIM")
    q.add_argument("reference")
    q.add_argument("test")
    _add_geometry(q)
    q.add_argument("--csv", help="also write the report here")
    q.set_defaults(func=cmd_quality)

    r = sub.add_parser("bdrate", help="Bjontegaard delta rate between two curves")
    r.add_argument("anchor", nargs="?")
    r.add_argument("test", nargs="?")
    r.add_argument("--qp-range", choices=("low", "high"))
    r.add_argument("--codec", choices=CODECS, default="VVC")
    r.add_argument("--table", help="CSV manifest of sequence/column/anchor/test rows")
    r.add_argument("--csv", help="write the result(s) as CSV")
    r.set_defaults(func=cmd_bdrate)

    c = sub.add_parser("curves", help="merge rate-quality curves into plot data")
    c.add_argument("curves", nargs="+")
    c.add_argument("-o", "--output", required=True, help="long-format CSV")
    c.add_argument("--gnuplot", help="gnuplot data file")
    c.set_defaults(func=cmd_curves)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingModelError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_MISSING_MODEL
    except (ValueError, CurveError, YuvError, ModelFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
