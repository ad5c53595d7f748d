"""Command line interface: dataset, train, embed, extract, attack, evaluate, sweep."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import dataset as dataset_mod
from . import evaluation, imaging, training
from .distortions import DistortionSpec, apply_spec, parse_attack
from .errors import DocmarkError, InvalidConfigError, InvalidInputError
from .seeding import child_torch_generator

log = logging.getLogger("docmark")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--config", type=Path, default=None, help="TOML/JSON config file")
    p.add_argument("--log-level", default=os.environ.get("DOCMARK_LOG", "warning"),
                   help="logging level (or set DOCMARK_LOG)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docmark",
        description="Blind watermarking for document images: train, embed, extract, attack, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("dataset", help="render a synthetic document image dataset",
                       formatter_class=fmt)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--train", type=int, default=200, help="training image count")
    p.add_argument("--val", type=int, default=50, help="validation image count")
    p.add_argument("--test", type=int, default=50, help="test image count")
    p.add_argument("--script", choices=("latin", "cjk"), default="latin", help="glyph style")
    p.add_argument("--size", type=int, default=400, help="square image size in pixels")
    _common_flags(p)

    p = sub.add_parser("train", help="train an encoder/decoder pair", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--variant", default=None,
                   help="basic | specified:KIND | combined (overrides config regime/iterations)")
    p.add_argument("--scale", type=float, default=1.0, help="iteration scale for --variant")
    p.add_argument("--out", type=Path, required=True, help="checkpoint output path")
    p.add_argument("--log", type=Path, default=None, help="JSON-lines log file (default stdout)")
    p.add_argument("--no-timestamps", action="store_true", help="omit timestamps from log records")
    _common_flags(p)

    p = sub.add_parser("embed", help="embed a watermark into a cover image", formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    p.add_argument("--in", dest="infile", type=Path, required=True, help="cover PNG")
    p.add_argument("--bits", required=True, help="watermark as hex (N/4 digits) or 0/1 string")
    p.add_argument("--alpha", type=float, default=1.0, help="embedding strength")
    p.add_argument("--out", type=Path, required=True, help="marked PNG output")
    _common_flags(p)

    p = sub.add_parser("extract", help="extract a watermark from an image", formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    p.add_argument("--in", dest="infile", type=Path, required=True, help="image to decode")
    p.add_argument("--expect", default=None, help="expected bits (hex or 0/1) to score against")
    _common_flags(p)

    p = sub.add_parser("attack", help="apply real-path distortions to an image", formatter_class=fmt)
    p.add_argument("--in", dest="infile", type=Path, required=True, help="input PNG")
    p.add_argument("--attack", action="append", required=True, metavar="KIND=PARAM",
                   help="attack spec, repeatable (e.g. jpeg=50, dropout=0.3, resize=0.1)")
    p.add_argument("--cover", type=Path, default=None,
                   help="cover PNG (required for dropout/cropout)")
    p.add_argument("--out", type=Path, required=True, help="attacked PNG output")
    _common_flags(p)

    p = sub.add_parser("evaluate", help="run the attack-grid robustness benchmark",
                       formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="dataset split to evaluate")
    p.add_argument("--grid", default="default",
                   help="'default' (18 levels) or a file of kind=param lines")
    p.add_argument("--alpha", type=float, default=1.0, help="test-time embedding strength")
    p.add_argument("--count", type=int, default=50, help="number of images")
    p.add_argument("--out", type=Path, default=None, help="report JSON output path")
    _common_flags(p)

    p = sub.add_parser("sweep", help="evaluate a family of checkpoints at fixed alpha",
                       formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, action="append", required=True,
                   help="checkpoint file, repeatable")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="dataset split to evaluate")
    p.add_argument("--alpha", type=float, default=1.0, help="test-time embedding strength")
    p.add_argument("--count", type=int, default=50, help="number of images")
    p.add_argument("--out", type=Path, default=None, help="sweep JSON output path")
    _common_flags(p)

    return parser


def _load_grid(arg: str) -> list[DistortionSpec]:
    if arg == "default":
        return evaluation.default_grid()
    path = Path(arg)
    if not path.exists():
        raise InvalidConfigError(f"attack grid file not found: {path}")
    text = path.read_text().strip()
    try:
        entries = json.loads(text)
    except json.JSONDecodeError:
        entries = [line.strip() for line in text.splitlines() if line.strip()]
    specs = []
    for entry in entries:
        spec = parse_attack(entry) if isinstance(entry, str) else DistortionSpec(**entry)
        if spec.kind == "gaussian_blur" and spec.sigma is None:
            spec = DistortionSpec(spec.kind, spec.param, sigma=(spec.param - 1) / 4.0)
        specs.append(spec)
    return specs


def cmd_dataset(args) -> int:
    dataset_mod.build_dataset(args.out, (args.train, args.val, args.test),
                              script=args.script, seed=args.seed, size=args.size)
    print(args.out / dataset_mod.MANIFEST_NAME)
    return 0


def _train_config(args) -> training.TrainConfig:
    if args.config is not None:
        cfg = training.TrainConfig.from_file(args.config)
    else:
        cfg = training.TrainConfig()
    if args.seed:
        cfg.seed = args.seed
    if args.variant:
        cfg = training.make_variant(cfg, args.variant, scale=args.scale)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    if not args.data.exists():
        raise InvalidConfigError(f"dataset directory not found: {args.data}")
    cfg = _train_config(args)
    data = dataset_mod.DatasetHandle.open(args.data, "train")
    try:
        val = dataset_mod.DatasetHandle.open(args.data, "val")
    except InvalidConfigError:
        val = None
    stream = open(args.log, "w") if args.log else sys.stdout
    try:
        result = training.train(cfg, data, val_data=val, log=stream,
                                timestamps=not args.no_timestamps)
    finally:
        if args.log:
            stream.close()
    final_path, best_path = result.save(args.out)
    print(final_path)
    print(best_path)
    return 0


def cmd_embed(args) -> int:
    codec = codec_mod.Codec.load(args.ckpt)
    cover = imaging.load_png(args.infile)
    bits = codec_mod.parse_bits(args.bits, codec.meta.watermark_length)
    marked = codec.embed(cover, bits, args.alpha)
    imaging.save_png(marked, args.out)
    report = imaging.quality_report(imaging.quantize(cover), marked)
    print(report.to_json())
    return 0


def _format_bits(bits: np.ndarray) -> str:
    binary = "".join(str(int(b)) for b in bits)
    if bits.size % 4 == 0:
        return f"{codec_mod.bits_to_hex(bits)} {binary}"
    return binary


def cmd_extract(args) -> int:
    codec = codec_mod.Codec.load(args.ckpt)
    img = imaging.load_png(args.infile)
    bits = codec.extract(img)
    print(_format_bits(bits))
    if args.expect is not None:
        expected = codec_mod.parse_bits(args.expect, codec.meta.watermark_length)
        acc = 100.0 * float(np.mean(bits == expected))
        print(f"accuracy {acc:.2f}")
    return 0


def cmd_attack(args) -> int:
    img = imaging.load_png(args.infile)
    cover_t = imaging.to_tensor(imaging.load_png(args.cover)) if args.cover else None
    out_t = imaging.to_tensor(imaging.quantize(img))
    for i, text in enumerate(args.attack):
        spec = parse_attack(text)
        if spec.kind == "gaussian_blur" and spec.sigma is None:
            spec = DistortionSpec(spec.kind, spec.param, sigma=(spec.param - 1) / 4.0)
        if spec.kind in ("dropout", "cropout") and cover_t is None:
            raise InvalidInputError(f"{spec.kind} needs --cover (it restores cover pixels)")
        gen = child_torch_generator(args.seed, "attack", i)
        # Quantize between chained attacks: each models a real on-disk channel.
        out_t = imaging.to_tensor(imaging.quantize(imaging.to_image(
            apply_spec(out_t, cover_t, spec, gen))))
    imaging.save_png(imaging.to_image(out_t), args.out)
    print(args.out)
    return 0


def cmd_evaluate(args) -> int:
    codec = codec_mod.Codec.load(args.ckpt)
    data = dataset_mod.DatasetHandle.open(args.data, args.split)
    grid = _load_grid(args.grid)
    report = evaluation.evaluate(codec, data, grid, alpha_test=args.alpha,
                                 sample_count=args.count, seed=args.seed)
    if args.out is not None:
        evaluation.report_write(report, args.out, "json")
    print(report.to_markdown())
    return 0


def cmd_sweep(args) -> int:
    codecs = [codec_mod.Codec.load(p) for p in args.ckpt]
    data = dataset_mod.DatasetHandle.open(args.data, args.split)
    results = evaluation.strength_sweep(codecs, data, alpha_test=args.alpha,
                                        sample_count=args.count, seed=args.seed)
    for alpha_train, report in results:
        print(f"# alpha_train = {alpha_train}")
        print(report.to_markdown())
        print()
    if args.out is not None:
        payload = [{"alpha_train": a, "report": json.loads(r.to_json())} for a, r in results]
        Path(args.out).write_text(json.dumps(payload, indent=2))
    return 0


_COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "embed": cmd_embed,
    "extract": cmd_extract,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (DocmarkError, OSError) as exc:
        print(f"docmark {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
