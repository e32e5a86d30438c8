"""Command-line front end: ``sne <subcommand> ...``.

Exit status is 0 on success, 1 on a data error (unreadable or inconsistent
files, bad checkpoints) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from sne import checkpoint as ckpt
from sne.codec import QuantTable, baseline_decode, encode_image, load_rep, save_rep
from sne.config import load_run_config
from sne.corpus import desk_split
from sne.errors import SneError
from sne.estimator import check_source_tensors, decode_image, strip_co_tensors
from sne.imageio import read_image, write_image
from sne.metrics import evaluate
from sne.report import ksweep
from sne.trainer import schedule_to_dict, train

log = logging.getLogger("sne")


def _load_images(items, split: int):
    images = []
    for item in items:
        if item == "desk":
            images.extend(desk_split()[split])
        else:
            images.append(read_image(item))
    return images


def _default_K(meta: dict) -> int:
    value = meta.get("K_decode") or meta.get("K_plain") or "2"
    return int(value)


def cmd_encode(args) -> int:
    img = read_image(args.image)
    table = QuantTable.standard(args.block_edge, args.quality)
    rep = encode_image(img, table, args.mode)
    save_rep(args.output, rep)
    print(f"bpp={rep.bpp_estimate:.6f}")
    return 0


def cmd_decode_baseline(args) -> int:
    write_image(args.output, baseline_decode(load_rep(args.rep)))
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    seed = run.seed if args.seed is None else args.seed
    images = _load_images(run.corpus, 0)
    val = _load_images(run.val, 1) if run.val else None

    def progress(row, _params):
        log.info("epoch %d channel=%s K=%d loss=%.6g", row["epoch"], row["channel"], row["K"],
                 row["train_loss"])

    result = train(images, run.schedule, run.model, seed, run.quality, val_images=val,
                   workers=args.workers or run.workers, augment=run.augment,
                   epoch_callback=progress)
    meta = dict(schedule_to_dict(run.schedule))
    meta["K_decode"] = str(run.schedule.decode_K)
    meta["quality"] = repr(run.quality)
    meta["seed"] = str(seed)
    ckpt.save_checkpoint(args.output, run.model, result.params, meta)
    log_path = Path(args.log) if args.log else Path(str(args.output) + ".log.tsv")
    log_path.write_text(result.log_text(), encoding="utf-8")
    return 0


def cmd_decode(args) -> int:
    rep = load_rep(args.rep)
    config, params, meta = ckpt.load_checkpoint(args.checkpoint)
    K = args.K if args.K is not None else _default_K(meta)
    write_image(args.output, decode_image(rep, params, config, K))
    return 0


def cmd_eval(args) -> int:
    ref = read_image(args.reference)
    test = read_image(args.test)
    bpp = load_rep(args.rep).bpp_estimate if args.rep else float("nan")
    sys.stdout.write(evaluate(ref, test, bpp).to_text())
    return 0


def cmd_sweep_k(args) -> int:
    rep = load_rep(args.rep)
    config, params, _ = ckpt.load_checkpoint(args.checkpoint)
    K_values = [int(k) for k in args.K.split(",")] if args.K else list(range(1, args.k_max + 1))
    report = ksweep(rep, params, config, K_values, read_image(args.reference))
    sys.stdout.write(report.to_text())
    return 0


def cmd_strip(args) -> int:
    config, params, meta = ckpt.load_checkpoint(args.checkpoint)
    check_source_tensors(params, config)
    ckpt.save_checkpoint(args.output, config, strip_co_tensors(params), meta)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sne", description="Learned iterative decoding of block-DCT images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("encode", help="image -> SNEQ1 quantized representation")
    s.add_argument("image")
    s.add_argument("output")
    s.add_argument("--quality", type=float, default=1.0, help="table scale in (0, 1]; lower is coarser")
    s.add_argument("--block-edge", type=int, default=8)
    s.add_argument("--mode", choices=("aligned", "overlapping"), default="aligned")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode-baseline", help="SNEQ1 -> image by dequantize + inverse DCT")
    s.add_argument("rep")
    s.add_argument("output")
    s.set_defaults(func=cmd_decode_baseline)

    s = sub.add_parser("train", help="run config -> SNEC1 checkpoint and epoch log")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the config's seed")
    s.add_argument("--output", "-o", default="model.snec")
    s.add_argument("--log", default=None, help="epoch log path (default: <output>.log.tsv)")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", help="SNEQ1 + checkpoint -> image (source estimator only)")
    s.add_argument("rep")
    s.add_argument("output")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--K", type=int, default=None, help="refinement steps (default from checkpoint)")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="compare two images; prints key=value metrics")
    s.add_argument("reference")
    s.add_argument("test")
    s.add_argument("--rep", default=None, help="SNEQ1 file whose bpp estimate to report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-k", help="PSNR table over refinement steps")
    s.add_argument("rep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--K", default=None, help="comma-separated K values (default 1..k-max)")
    s.add_argument("--k-max", type=int, default=6)
    s.set_defaults(func=cmd_sweep_k)

    s = sub.add_parser("strip-co", help="drop training-only co-estimator tensors from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("output")
    s.set_defaults(func=cmd_strip)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SneError, ValueError, OSError) as exc:
        print(f"sne {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
