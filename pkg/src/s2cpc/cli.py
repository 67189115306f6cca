"""Command line entry points: encode, decode, train, stats, eval.

Options can come from a ``key = value`` config file; explicit flags win.
Every command exits 0 on success and 1 with a one-line stderr message on
expected failures (bad input, corrupt streams, mismatched models).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .codec import (GRC_CKPT, STAGEWISE_CKPT, CodecConfig, ModelBundle, decode, encode,
                    level_counts, select_start_level, stream_report,
                    train_grc_model, train_stagewise_model)
from .errors import CodecError, ConfigError
from .geometry import (cart_to_spherical, derive_quant_params, quantize_points,
                       sort_unique)
from .metrics import bits_per_point, max_nn_error, psnr_d1, psnr_d2
from .nn import write_checkpoint
from .ply_io import read_ply, write_ply

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}

_CONFIG_FIELDS = {
    "mode": ("mode", str),
    "depth": ("bit_depth", int),
    "bit_depth": ("bit_depth", int),
    "grc_start_level": ("grc_start_level", int),
    "tau": ("tau", float),
    "channels": ("channels", int),
    "kernel": ("kernel", int),
    "lossy_kernel": ("lossy_kernel", int),
    "rpa_kernel": ("rpa_kernel", int),
    "history": ("history", int),
    "share_head": ("share_head", None),
}


def _parse_bool(word: str) -> bool:
    try:
        return _BOOL_WORDS[word.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {word!r}") from None


def load_config_file(path: str) -> dict[str, object]:
    """Parses ``key = value`` lines; '#' starts a comment."""
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown option {key!r}")
            attr, cast = _CONFIG_FIELDS[key]
            try:
                values[attr] = _parse_bool(value) if cast is None else cast(value)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value {value!r} for {key!r}") from None
    return values


def _build_config(args) -> CodecConfig:
    cfg = CodecConfig()
    if getattr(args, "config", None):
        for attr, value in load_config_file(args.config).items():
            setattr(cfg, attr, value)
    for flag, attr in (("mode", "mode"), ("depth", "bit_depth"),
                       ("channels", "channels"), ("kernel", "kernel"),
                       ("start_level", "grc_start_level")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    cfg.validate()
    return cfg


def _load_bundle(args) -> ModelBundle | None:
    ckpt = getattr(args, "ckpt", None)
    if not ckpt:
        return None
    if not os.path.isdir(ckpt):
        raise ConfigError(f"checkpoint directory {ckpt!r} does not exist")
    return ModelBundle.load(ckpt)


# ---------------------------------------------------------------- commands

def cmd_encode(args) -> int:
    cfg = _build_config(args)
    bundle = _load_bundle(args)
    points = read_ply(args.input)
    stream, report = encode(points, cfg, bundle)
    with open(args.output, "wb") as fh:
        fh.write(stream)
    print(f"encoded {report.num_points} points to {report.total_bytes} bytes "
          f"({report.bpp():.3f} bpp, start level {report.start_level})")
    return 0


def cmd_decode(args) -> int:
    with open(args.input, "rb") as fh:
        stream = fh.read()
    bundle = _load_bundle(args)
    result = decode(stream, bundle)
    pts = result.points if result.points is not None else result.coords.astype(np.float64)
    write_ply(args.output, pts)
    print(f"decoded {len(pts)} points")
    return 0


def _training_coords(points: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Integer training cloud at cfg.bit_depth from raw PLY positions."""
    if cfg.mode == "lossy":
        sph = cart_to_spherical(points)
        qp = derive_quant_params(sph, cfg.bit_depth)
        return sort_unique(quantize_points(sph, qp, cfg.bit_depth), cfg.bit_depth)
    rounded = np.rint(points)
    if np.allclose(points, rounded, atol=1e-6):
        return sort_unique(rounded.astype(np.int64), cfg.bit_depth)
    qp = derive_quant_params(points, cfg.bit_depth)
    return sort_unique(quantize_points(points, qp, cfg.bit_depth), cfg.bit_depth)


def cmd_train(args) -> int:
    cfg = _build_config(args)
    paths = sorted(os.path.join(args.data, name) for name in os.listdir(args.data)
                   if name.endswith(".ply"))
    if not paths:
        raise ConfigError(f"no .ply files in {args.data!r}")
    clouds = [_training_coords(read_ply(p), cfg) for p in paths]
    if args.kind == "stagewise":
        model, history = train_stagewise_model(clouds, cfg, args.epochs, seed=args.seed,
                                               channels=args.channels, kernel=args.kernel)
        default_name = STAGEWISE_CKPT
    else:
        if cfg.grc_start_level is not None:
            start = cfg.grc_start_level
        else:
            per_cloud = [select_start_level(c, cfg.bit_depth, cfg.tau) for c in clouds]
            start = int(np.median(per_cloud))
        model, history = train_grc_model(clouds, cfg, start, args.epochs, seed=args.seed,
                                         channels=args.channels, kernel=args.kernel)
        default_name = GRC_CKPT
    out = args.out
    if not out.endswith(".s2cw"):
        os.makedirs(out, exist_ok=True)
        out = os.path.join(out, default_name)
    write_checkpoint(model.store, out)
    for epoch, bits in enumerate(history, 1):
        print(f"epoch {epoch}: {bits:.4f} bits/symbol")
    print(f"saved checkpoint to {out}")
    return 0


def cmd_stats(args) -> int:
    points = read_ply(args.input)
    bits_map: dict[int, int] = {}
    if args.stream:
        with open(args.stream, "rb") as fh:
            stream = fh.read()
        report, result = stream_report(stream, _load_bundle(args))
        depth = result.header.bit_depth
        bits_map = dict(report.level_bits)
        bits_map[depth] = bits_map.get(depth, 0) + report.raw_bits
    else:
        cfg = _build_config(args)
        depth = cfg.bit_depth

    qp_cart = derive_quant_params(points, depth)
    cart = sort_unique(quantize_points(points, qp_cart, depth), depth)
    sph = cart_to_spherical(points)
    qp_sph = derive_quant_params(sph, depth)
    spher = sort_unique(quantize_points(sph, qp_sph, depth), depth)
    counts_cart = level_counts(cart, depth)
    counts_spher = level_counts(spher, depth)

    with open(args.csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "count_cart", "count_spher", "bits_level"])
        for level in range(1, depth + 1):
            bits = bits_map.get(level, "") if args.stream else ""
            writer.writerow([level, counts_cart[level - 1], counts_spher[level - 1], bits])
    print(f"wrote {args.csv}")
    return 0


def cmd_eval(args) -> int:
    ref = read_ply(args.ref)
    rec = read_ply(args.rec)
    print(f"d1_psnr={psnr_d1(ref, rec, args.peak):.4f}")
    print(f"d2_psnr={psnr_d2(ref, rec, args.peak):.4f}")
    print(f"max_err={max_nn_error(ref, rec):.6f}")
    if args.stream:
        size = os.path.getsize(args.stream)
        print(f"bpp={bits_per_point(size, len(ref)):.4f}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2cpc",
                                     description="Sparse voxel point cloud codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress a PLY file")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mode", choices=["lossless", "lossy"])
    p.add_argument("--depth", type=int)
    p.add_argument("--start-level", type=int, dest="start_level")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct a PLY file from a stream")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--ckpt")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="fit model weights on a directory of PLY files")
    p.add_argument("--kind", choices=["stagewise", "grc"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--channels", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["lossless", "lossy"])
    p.add_argument("--depth", type=int)
    p.add_argument("--start-level", type=int, dest="start_level")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stats", help="per-level occupancy and bit counts as CSV")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--stream")
    p.add_argument("--csv", required=True)
    p.add_argument("--depth", type=int)
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("eval", help="distortion and rate metrics for a reconstruction")
    p.add_argument("--ref", required=True)
    p.add_argument("--rec", required=True)
    p.add_argument("--stream")
    p.add_argument("--peak", type=float, required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CodecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
