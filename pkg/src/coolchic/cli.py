"""Command-line front end: ``coolchic encode|decode|eval|allocate|profile``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .allocator import CsvFormatError, InfeasibleError, allocate_maxmin, read_points_csv, write_allocation_csv
from .bitstream import ParseError
from .codec import decode_bitstream
from .imageio import ImageFormatError, read_image, write_image
from .metrics import ms_ssim, psnr, to_uint8, to_unit
from .profiler import format_table, mac_table
from .rangecoder import DecodeError
from .trainer import IntegrityError, TrainConfig, TrainingError, encode_image

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_TRAINING = 5

MAX_EXTENT = 0xFFFF


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _emit(args, text, record):
    print(text)
    if args.json:
        print(json.dumps(record, sort_keys=True))


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}", EXIT_IO) from None


def _write_bytes(path, data):
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from None


def _load_image(path):
    try:
        return read_image(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}", EXIT_IO) from None
    except ImageFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None


def _decode(data, path, parallel=False):
    try:
        return decode_bitstream(data, parallel=parallel)
    except (ParseError, DecodeError, ValueError) as exc:
        raise CliError(f"{path}: cannot decode: {exc}", EXIT_PARSE) from None


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("COOLCHIC_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise CliError(f"COOLCHIC_SEED must be an integer, got {env!r}", EXIT_USAGE) from None


def _config(args, lmbda):
    text = ""
    if args.config:
        text = _read_bytes(args.config).decode("utf-8", errors="replace")
    try:
        return TrainConfig.from_text(text, lmbda=lmbda, seed=_seed(args), iterations=args.iterations)
    except ValueError as exc:
        raise CliError(f"bad configuration: {exc}", EXIT_USAGE) from None


def _output_for(template, index, count, lmbda):
    if count == 1:
        return template
    if "{lambda}" in template:
        return template.replace("{lambda}", f"{lmbda:g}")
    p = Path(template)
    return str(p.with_name(f"{p.stem}.{index}{p.suffix}"))


def _encode_job(img, config):
    return encode_image(img, config)


def cmd_encode(args):
    img = _load_image(args.input)
    h, w, _ = img.shape
    if h > MAX_EXTENT or w > MAX_EXTENT:
        raise CliError(f"{args.input}: {w}x{h} exceeds the {MAX_EXTENT}-pixel limit", EXIT_IO)
    configs = [_config(args, lm) for lm in args.lmbda]
    try:
        if args.jobs > 1 and len(configs) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_encode_job, [img] * len(configs), configs))
        else:
            results = [encode_image(img, c) for c in configs]
    except (TrainingError, IntegrityError) as exc:
        raise CliError(f"encoding failed: {exc}", EXIT_TRAINING) from None
    rows = []
    for i, (c, r) in enumerate(zip(configs, results)):
        out = _output_for(args.output, i, len(configs), c.lmbda)
        _write_bytes(out, r.bitstream)
        rec = dict(r.summary(), output=out)
        rows.append(rec)
        _emit(
            args,
            f"{out}: bytes={r.bytes} bpp={r.bpp:.4f} psnr_db={r.psnr_db:.3f} ms_ssim={r.ms_ssim:.3f} lambda={c.lmbda:g}",
            rec,
        )
    if args.points:
        try:
            with open(args.points, "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow(["image", "bytes", "quality", "lambda", "psnr_db", "ms_ssim"])
                name = Path(args.input).stem
                for rec in rows:
                    wr.writerow([name, rec["bytes"], f"{rec['ms_ssim']:.6f}", rec["lambda"], rec["psnr_db"], rec["ms_ssim"]])
        except OSError as exc:
            raise CliError(f"cannot write {args.points}: {exc.strerror or exc}", EXIT_IO) from None
    return EXIT_OK


def cmd_decode(args):
    data = _read_bytes(args.input)
    t0 = time.perf_counter()
    dec = _decode(data, args.input, args.parallel_levels)
    seconds = time.perf_counter() - t0
    img = to_uint8(dec.image)
    try:
        write_image(args.output, img)
    except OSError as exc:
        raise CliError(f"cannot write {args.output}: {exc.strerror or exc}", EXIT_IO) from None
    macs = mac_table(dec.header.height, dec.header.width)["total_per_pixel"]
    rec = {
        "output": args.output,
        "height": dec.header.height,
        "width": dec.header.width,
        "seconds": round(seconds, 4),
        "mac_per_pixel": round(macs, 1),
    }
    _emit(args, f"{args.output}: {dec.header.width}x{dec.header.height} decoded in {seconds:.3f} s, {macs:.1f} MAC/pixel", rec)
    return EXIT_OK


def cmd_profile(args):
    if args.input:
        data = _read_bytes(args.input)
        dec = _decode(data, args.input)
        h, w = dec.header.height, dec.header.width
    else:
        h, w = args.size
    table = mac_table(h, w)
    text = f"{w}x{h}\n" + format_table(table)
    if args.input:
        table["bitstream_bytes"] = len(data)
        table["bpp"] = 8.0 * len(data) / (h * w)
        text += f"\nbitstream bytes {len(data)} ({table['bpp']:.4f} bpp)"
    _emit(args, text, table)
    return EXIT_OK


def _read_pairs(path):
    rows = []
    try:
        f = open(path, newline="")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}", EXIT_IO) from None
    with f:
        reader = csv.reader(f)
        header = [c.strip().lower() for c in next(reader, [])]
        if "image" not in header or "original" not in header or not ({"reconstruction", "bitstream"} & set(header)):
            raise CliError(
                f"{path}: line 1: expected columns image,original and reconstruction and/or bitstream", EXIT_PARSE
            )
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CliError(f"{path}: line {lineno}: expected {len(header)} columns, got {len(row)}", EXIT_PARSE)
            rows.append((lineno, {k: v.strip() for k, v in zip(header, row)}))
    return rows


def _read_vmaf(path):
    try:
        points = {}
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = [c.strip().lower() for c in next(reader, [])]
            if header[:2] != ["image", "vmaf"]:
                raise CliError(f"{path}: line 1: expected header image,vmaf", EXIT_PARSE)
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                try:
                    points[row[0].strip()] = float(row[1])
                except (IndexError, ValueError):
                    raise CliError(f"{path}: line {lineno}: expected image,vmaf", EXIT_PARSE) from None
        return points
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}", EXIT_IO) from None


def _fmt(v, digits=3):
    return "inf" if v == float("inf") else f"{v:.{digits}f}"


def cmd_eval(args):
    base = Path(args.pairs).parent
    vmaf = _read_vmaf(args.vmaf) if args.vmaf else {}
    out_rows = []
    for lineno, row in _read_pairs(args.pairs):
        orig = _load_image(base / row["original"])
        nbytes = None
        if row.get("bitstream"):
            data = _read_bytes(base / row["bitstream"])
            nbytes = len(data)
        if row.get("reconstruction"):
            rec = _load_image(base / row["reconstruction"])
        elif nbytes is not None:
            rec = to_uint8(_decode(data, row["bitstream"]).image)
        else:
            raise CliError(f"{args.pairs}: line {lineno}: needs a reconstruction or a bitstream", EXIT_PARSE)
        if rec.shape != orig.shape:
            raise CliError(f"{args.pairs}: line {lineno}: image sizes differ {orig.shape} vs {rec.shape}", EXIT_PARSE)
        h, w, _ = orig.shape
        x, y = to_unit(orig), to_unit(rec)
        result = {
            "image": row["image"],
            "bytes": nbytes,
            "bpp": None if nbytes is None else 8.0 * nbytes / (h * w),
            "psnr_db": psnr(x, y),
            "ms_ssim": ms_ssim(x, y),
        }
        if vmaf:
            result["vmaf"] = vmaf.get(row["image"])
        out_rows.append(result)
    columns = ["image", "bytes", "bpp", "psnr_db", "ms_ssim"] + (["vmaf"] if vmaf else [])
    lines = [columns]
    for r in out_rows:
        lines.append(
            [
                r["image"],
                "" if r["bytes"] is None else r["bytes"],
                "" if r["bpp"] is None else f"{r['bpp']:.4f}",
                _fmt(r["psnr_db"]),
                _fmt(r["ms_ssim"]),
            ]
            + (["" if r.get("vmaf") is None else f"{r['vmaf']:.3f}"] if vmaf else [])
        )
    try:
        f = open(args.output, "w", newline="") if args.output else sys.stdout
    except OSError as exc:
        raise CliError(f"cannot write {args.output}: {exc.strerror or exc}", EXIT_IO) from None
    try:
        csv.writer(f).writerows(lines)
    finally:
        if args.output:
            f.close()
    if args.json:
        safe = [{k: ("inf" if v == float("inf") else v) for k, v in r.items()} for r in out_rows]
        print(json.dumps(safe, sort_keys=True))
    return EXIT_OK


def cmd_allocate(args):
    try:
        points = read_points_csv(args.points)
    except OSError as exc:
        raise CliError(f"cannot read {args.points}: {exc.strerror or exc}", EXIT_IO) from None
    except CsvFormatError as exc:
        raise CliError(f"{args.points}: {exc}", EXIT_PARSE) from None
    try:
        alloc = allocate_maxmin(points, args.budget)
    except InfeasibleError as exc:
        raise CliError(f"infeasible: {exc}; shortfall {exc.shortfall} bytes", EXIT_FAILURE) from None
    except ValueError as exc:
        raise CliError(f"{args.points}: {exc}", EXIT_PARSE) from None
    try:
        write_allocation_csv(args.output if args.output else sys.stdout, alloc)
    except OSError as exc:
        raise CliError(f"cannot write {args.output}: {exc.strerror or exc}", EXIT_IO) from None
    rec = {
        "budget": args.budget,
        "total_bytes": alloc.total_bytes,
        "min_quality": alloc.min_quality,
        "mean_quality": alloc.mean_quality,
        "images": len(alloc.chosen),
    }
    _emit(
        args,
        f"total={alloc.total_bytes} budget={args.budget} min_quality={alloc.min_quality:.6f} "
        f"mean_quality={alloc.mean_quality:.6f}",
        rec,
    )
    return EXIT_OK


def _size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("dimensions must be positive")
    return h, w


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="coolchic", description="Overfitted neural image codec.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--json", action="store_true", help="also print summaries as JSON")

    e = sub.add_parser("encode", help="train on an image and write a .cchc bitstream")
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True, help="output path; with several lambdas use {lambda} or get .N suffixes")
    e.add_argument("--lambda", dest="lmbda", type=float, nargs="+", required=True)
    e.add_argument("--config", help="key=value training configuration file")
    e.add_argument("--seed", type=int, help="random seed (default: $COOLCHIC_SEED, then the config)")
    e.add_argument("--iterations", type=_positive_int)
    e.add_argument("--jobs", type=_positive_int, default=1, help="parallel encodes for lambda sweeps")
    e.add_argument("--points", help="write the sweep as an image,bytes,quality CSV")
    common(e)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a .cchc bitstream to PPM/PNG")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--parallel-levels", action="store_true", help="decode the latent streams concurrently")
    common(d)
    d.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="PSNR / MS-SSIM report for image pairs")
    ev.add_argument("--pairs", required=True, help="CSV with image,original and reconstruction and/or bitstream")
    ev.add_argument("--output", help="report CSV (default: stdout)")
    ev.add_argument("--vmaf", help="CSV of externally computed image,vmaf scores")
    common(ev)
    ev.set_defaults(func=cmd_eval)

    a = sub.add_parser("allocate", help="max-min quality allocation under a byte budget")
    a.add_argument("--points", required=True, help="CSV with image,bytes,quality")
    a.add_argument("--budget", required=True, type=_positive_int)
    a.add_argument("--output", help="allocation CSV (default: stdout)")
    common(a)
    a.set_defaults(func=cmd_allocate)

    pr = sub.add_parser("profile", help="decoder MAC budget")
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="a .cchc bitstream")
    src.add_argument("--size", type=_size, help="WIDTHxHEIGHT instead of a bitstream")
    common(pr)
    pr.set_defaults(func=cmd_profile)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"coolchic {args.command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
