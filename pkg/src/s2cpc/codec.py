"""Bitstream assembly and end-to-end encoding/decoding.

Stream layout, all integers little-endian:

* header: magic ``S2CP``, version u8, mode u8 (0 Cartesian lossless,
  1 spherical lossy), bit depth u8, residual start level u8, point count u64,
  raw point count u32, model digest u64, then for lossy mode the six
  quantizer doubles, then the three framed section lengths (u32 each).
* three framed sections in order: stage-wise levels, residual chains,
  bit-packed raw points.

The residual start level ("saturation level") is the first level whose voxel
count is close to the final point count; levels at and below it are coded
stage-wise, deeper levels as residual chains.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .entropy import (RangeDecoder, RangeEncoder, pack_coords, read_section,
                      unpack_coords, write_section)
from .errors import ConfigError, IncompatibleStreamError, ShapeError, StreamCorruptError
from .geometry import (QuantParams, build_levels, cart_to_spherical, dequantize_points,
                       derive_quant_params, morton_encode, quantize_points, sort_unique,
                       spherical_to_cart, validate_coords)
from .nn import deserialize_params, serialize_params, write_checkpoint
from .residual import (RpaModel, decode_residuals, encode_residuals,
                       extract_residual_levels, reconstruct_coords)
from .sparse import SparseTensor
from .stagewise import StagewiseModel, decode_level, encode_level

MAGIC = b"S2CP"
VERSION = 1
MODE_LOSSLESS = 0
MODE_LOSSY = 1
MAX_BIT_DEPTH = 18
STREAM_SUFFIX = ".s2c"
STAGEWISE_CKPT = "stagewise.s2cw"
GRC_CKPT = "grc.s2cw"

_FIXED_FMT = "<4sBBBBQIQ"
_QP_FMT = "<6d"
_SECTIONS_FMT = "<3I"


@dataclass
class CodecConfig:
    mode: str = "lossless"
    bit_depth: int = 10
    grc_start_level: int | None = None
    tau: float = 0.99
    channels: int = 32
    kernel: int = 3
    lossy_kernel: int = 5
    rpa_kernel: int = 9
    history: int = 6
    share_head: bool = False

    def validate(self):
        if self.mode not in ("lossless", "lossy"):
            raise ConfigError(f"mode must be 'lossless' or 'lossy', got {self.mode!r}")
        if not 1 <= self.bit_depth <= MAX_BIT_DEPTH:
            raise ConfigError(f"bit_depth must be in [1, {MAX_BIT_DEPTH}], got {self.bit_depth}")
        if self.grc_start_level is not None and not 1 <= self.grc_start_level <= self.bit_depth:
            raise ConfigError(f"grc_start_level {self.grc_start_level} outside [1, bit_depth]")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        for name in ("kernel", "lossy_kernel", "rpa_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and positive, got {k}")
        if self.channels < 4 or self.channels % 4:
            raise ConfigError(f"channels must be a positive multiple of 4, got {self.channels}")
        if self.history < 1:
            raise ConfigError(f"history must be at least 1, got {self.history}")

    @property
    def stagewise_kernel(self) -> int:
        return self.kernel if self.mode == "lossless" else self.lossy_kernel


@dataclass
class BitstreamHeader:
    mode: int
    bit_depth: int
    grc_start_level: int
    num_points: int
    raw_point_count: int
    digest: int
    quant: QuantParams | None
    section_lengths: tuple[int, int, int]

    def pack(self) -> bytes:
        out = struct.pack(_FIXED_FMT, MAGIC, VERSION, self.mode, self.bit_depth,
                          self.grc_start_level, self.num_points, self.raw_point_count,
                          self.digest)
        if self.mode == MODE_LOSSY:
            out += struct.pack(_QP_FMT, *self.quant.offset, *self.quant.step)
        return out + struct.pack(_SECTIONS_FMT, *self.section_lengths)

    @classmethod
    def unpack(cls, buf: bytes) -> tuple["BitstreamHeader", int]:
        fixed = struct.calcsize(_FIXED_FMT)
        if len(buf) < fixed:
            raise StreamCorruptError("stream shorter than the fixed header")
        magic, version, mode, depth, start, num, raw, digest = struct.unpack_from(_FIXED_FMT, buf)
        if magic != MAGIC:
            raise IncompatibleStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise IncompatibleStreamError(f"unsupported stream version {version}")
        if mode not in (MODE_LOSSLESS, MODE_LOSSY):
            raise IncompatibleStreamError(f"unknown mode byte {mode}")
        pos = fixed
        quant = None
        if mode == MODE_LOSSY:
            if len(buf) < pos + struct.calcsize(_QP_FMT):
                raise StreamCorruptError("header quantizer fields truncated")
            vals = struct.unpack_from(_QP_FMT, buf, pos)
            pos += struct.calcsize(_QP_FMT)
            quant = QuantParams(offset=np.array(vals[:3]), step=np.array(vals[3:]))
        if len(buf) < pos + struct.calcsize(_SECTIONS_FMT):
            raise StreamCorruptError("header section lengths truncated")
        sections = struct.unpack_from(_SECTIONS_FMT, buf, pos)
        pos += struct.calcsize(_SECTIONS_FMT)
        return cls(mode, depth, start, num, raw, digest, quant, sections), pos


@dataclass
class ModelBundle:
    """Encoder/decoder model pair plus the digest binding streams to weights."""

    stagewise: StagewiseModel | None = None
    rpa: RpaModel | None = None
    digest: int = 0

    @classmethod
    def empty(cls) -> "ModelBundle":
        """Bundle with no trained models; all levels code under uniform priors."""
        return cls()

    @classmethod
    def load(cls, ckpt_dir: str) -> "ModelBundle":
        sw_data = rpa_data = None
        sw_path = os.path.join(ckpt_dir, STAGEWISE_CKPT)
        rpa_path = os.path.join(ckpt_dir, GRC_CKPT)
        if os.path.exists(sw_path):
            with open(sw_path, "rb") as fh:
                sw_data = fh.read()
        if os.path.exists(rpa_path):
            with open(rpa_path, "rb") as fh:
                rpa_data = fh.read()
        return cls.from_bytes(sw_data, rpa_data)

    @classmethod
    def from_bytes(cls, sw_data: bytes | None, rpa_data: bytes | None) -> "ModelBundle":
        stagewise = StagewiseModel.from_store(deserialize_params(sw_data)) if sw_data else None
        rpa = RpaModel.from_store(deserialize_params(rpa_data)) if rpa_data else None
        return cls(stagewise, rpa, bundle_digest(sw_data, rpa_data))

    @classmethod
    def from_models(cls, stagewise: StagewiseModel | None, rpa: RpaModel | None) -> "ModelBundle":
        sw_data = serialize_params(stagewise.store) if stagewise else None
        rpa_data = serialize_params(rpa.store) if rpa else None
        return cls(stagewise, rpa, bundle_digest(sw_data, rpa_data))

    def save(self, ckpt_dir: str) -> None:
        """Write whichever models are present under their standard filenames."""
        if self.stagewise is not None:
            write_checkpoint(self.stagewise.store, os.path.join(ckpt_dir, STAGEWISE_CKPT))
        if self.rpa is not None:
            write_checkpoint(self.rpa.store, os.path.join(ckpt_dir, GRC_CKPT))


def bundle_digest(sw_data: bytes | None, rpa_data: bytes | None) -> int:
    if not sw_data and not rpa_data:
        return 0
    h = hashlib.sha256()
    for data in (sw_data, rpa_data):
        h.update(struct.pack("<Q", len(data) if data else 0))
        if data:
            h.update(data)
    (value,) = struct.unpack("<Q", h.digest()[:8])
    return value or 1


@dataclass
class EncodeReport:
    num_points: int
    start_level: int
    header_bytes: int
    section_bytes: tuple[int, int, int]
    level_bits: dict[int, int] = field(default_factory=dict)
    raw_bits: int = 0

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + sum(self.section_bytes)

    def bpp(self, num_points: int | None = None) -> float:
        n = num_points if num_points is not None else self.num_points
        return 8.0 * self.total_bytes / max(n, 1)


def level_counts(coords: np.ndarray, depth: int) -> np.ndarray:
    """Distinct voxel count at levels 1..depth."""
    coords = validate_coords(coords, depth)
    codes = np.unique(morton_encode(coords, depth))
    counts = np.empty(depth, dtype=np.int64)
    for level in range(1, depth + 1):
        counts[level - 1] = len(np.unique(codes >> (3 * (depth - level))))
    return counts


def select_start_level(coords: np.ndarray, depth: int, tau: float = 0.99) -> int:
    """Smallest level holding at least tau of the final point count."""
    counts = level_counts(coords, depth)
    if len(coords) == 0:
        return depth
    threshold = tau * len(np.unique(morton_encode(coords, depth)))
    hit = np.nonzero(counts >= threshold)[0]
    return int(hit[0]) + 1 if len(hit) else depth


def _prepare_coords(data, config: CodecConfig) -> tuple[np.ndarray, QuantParams | None]:
    depth = config.bit_depth
    if config.mode == "lossless":
        data = np.asarray(data)
        if np.issubdtype(data.dtype, np.floating):
            rounded = np.rint(data)
            if not np.allclose(data, rounded, atol=1e-6):
                raise ConfigError("lossless mode needs integer-valued coordinates")
            data = rounded.astype(np.int64)
        return sort_unique(data, depth), None
    points = np.asarray(data, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) points, got {points.shape}")
    sph = cart_to_spherical(points)
    qp = derive_quant_params(sph, depth)
    return sort_unique(quantize_points(sph, qp, depth), depth), qp


def encode(data, config: CodecConfig, bundle: ModelBundle | None = None,
           trace=None) -> tuple[bytes, EncodeReport]:
    """Compress integer coords (lossless) or float points (lossy spherical)."""
    config.validate()
    coords, qp = _prepare_coords(data, config)
    j = None
    if len(coords):
        j = config.grc_start_level or select_start_level(coords, config.bit_depth, config.tau)
    mode = MODE_LOSSLESS if config.mode == "lossless" else MODE_LOSSY
    return _encode_core(coords, config.bit_depth, mode, j, qp, bundle, trace)


def _encode_core(coords: np.ndarray, depth: int, mode: int, j: int | None,
                 qp: QuantParams | None, bundle: ModelBundle | None,
                 trace=None) -> tuple[bytes, EncodeReport]:
    n = len(coords)
    digest = bundle.digest if bundle else 0
    sw_model = bundle.stagewise if bundle else None
    rpa_model = bundle.rpa if bundle else None

    level_bits: dict[int, int] = {}
    if n == 0:
        payload1 = payload2 = raw_payload = b""
        j = depth
        extras = np.zeros((0, 3), dtype=np.int64)
        symbols1 = symbols2 = 0
    else:
        slices = build_levels(coords, depth)
        enc1 = RangeEncoder()
        symbols1 = 0
        for level in range(1, j + 1):
            s = slices[level - 1]
            before = enc1.tell()
            encode_level(s, sw_model, enc1, trace=trace)
            level_bits[level] = 8 * (enc1.tell() - before)
            symbols1 += 8 * len(s.parent_coords)
        payload1 = enc1.finish()
        level_bits[j] += 8 * len(payload1) - sum(level_bits[l] for l in range(1, j + 1))

        base, residuals, extras = extract_residual_levels(coords, depth, j)
        m = depth - j
        symbols2 = residuals.size
        if m > 0 and len(base) > 0:
            enc2 = RangeEncoder()
            marks = [0]
            encode_residuals(SparseTensor(base, j), residuals, rpa_model, enc2,
                             trace=trace, step_hook=lambda step: marks.append(enc2.tell()))
            payload2 = enc2.finish()
            for step in range(1, m + 1):
                level_bits[j + step] = 8 * (marks[step] - marks[step - 1])
            level_bits[depth] += 8 * (len(payload2) - marks[m])
        else:
            payload2 = b""
        raw_payload = pack_coords(extras, depth)

    sections = (write_section(payload1, symbols1),
                write_section(payload2, symbols2),
                write_section(raw_payload, len(extras)))
    header = BitstreamHeader(
        mode=mode, bit_depth=depth, grc_start_level=j, num_points=n,
        raw_point_count=len(extras), digest=digest, quant=qp,
        section_lengths=tuple(len(s) for s in sections))
    header_bytes = header.pack()
    stream = header_bytes + b"".join(sections)
    report = EncodeReport(num_points=n, start_level=j, header_bytes=len(header_bytes),
                          section_bytes=tuple(len(s) for s in sections),
                          level_bits=level_bits, raw_bits=8 * len(raw_payload))
    return stream, report


@dataclass
class DecodeResult:
    coords: np.ndarray
    points: np.ndarray | None
    header: BitstreamHeader


def decode(stream: bytes, bundle: ModelBundle | None = None, trace=None) -> DecodeResult:
    """Invert encode; raises if the stream and models do not match."""
    header, pos = BitstreamHeader.unpack(stream)
    digest = bundle.digest if bundle else 0
    if digest != header.digest:
        raise IncompatibleStreamError(
            f"stream was coded with model digest {header.digest:#x}, have {digest:#x}")
    payloads = []
    for expected in header.section_lengths:
        start = pos
        payload, count, pos = read_section(stream, pos)
        if pos - start != expected:
            raise StreamCorruptError("section length disagrees with header")
        payloads.append((payload, count))
    if pos != len(stream):
        raise StreamCorruptError("trailing bytes after the last section")

    depth = header.bit_depth
    if header.num_points == 0:
        empty = np.zeros((0, 3), dtype=np.int64)
        return DecodeResult(empty, np.zeros((0, 3)) if header.mode == MODE_LOSSY else None, header)

    sw_model = bundle.stagewise if bundle else None
    rpa_model = bundle.rpa if bundle else None
    j = header.grc_start_level
    dec1 = RangeDecoder(payloads[0][0])
    coords = np.zeros((1, 3), dtype=np.int64)
    for level in range(1, j + 1):
        coords = decode_level(coords, level, sw_model, dec1, trace=trace)
    m = depth - j
    if m > 0 and len(coords) > 0:
        dec2 = RangeDecoder(payloads[1][0])
        residuals = decode_residuals(SparseTensor(coords, j), m, rpa_model, dec2, trace=trace)
        chain = reconstruct_coords(coords, residuals)
    else:
        chain = coords
    extras = unpack_coords(payloads[2][0], payloads[2][1], depth)
    final = sort_unique(np.vstack([chain, extras]), depth)
    if len(final) != header.num_points:
        raise StreamCorruptError(
            f"decoded {len(final)} points, header promised {header.num_points}")
    points = None
    if header.mode == MODE_LOSSY:
        points = spherical_to_cart(dequantize_points(final, header.quant))
    return DecodeResult(final, points, header)


def stream_report(stream: bytes, bundle: ModelBundle | None = None
                  ) -> tuple[EncodeReport, DecodeResult]:
    """Per-level bit accounting for an existing stream.

    Decodes the stream, then re-encodes the result with the same models and
    header fields; the round trip must be byte-identical, which makes the
    re-encode's bit counts exact for the original stream.
    """
    result = decode(stream, bundle)
    header = result.header
    stream2, report = _encode_core(result.coords, header.bit_depth, header.mode,
                                   header.grc_start_level, header.quant, bundle)
    if stream2 != stream:
        raise StreamCorruptError("re-encoded stream differs from the original")
    return report, result


# ---------------------------------------------------------------- train/save

def train_stagewise_model(clouds, config: CodecConfig, epochs: int, seed: int = 0,
                          channels: int | None = None, kernel: int | None = None,
                          levels_per_cloud: int | None = None):
    from .stagewise import train_stagewise

    model = StagewiseModel.create(channels or config.channels,
                                  kernel or config.stagewise_kernel,
                                  share_head=config.share_head, seed=seed)
    history = train_stagewise(model, clouds, config.bit_depth, epochs, seed=seed,
                              levels_per_cloud=levels_per_cloud)
    return model, history


def train_grc_model(clouds, config: CodecConfig, start_level: int, epochs: int,
                    seed: int = 0, channels: int | None = None, kernel: int | None = None):
    from .residual import train_grc

    model = RpaModel.create(channels or config.channels, kernel or config.rpa_kernel,
                            history=config.history, seed=seed)
    history = train_grc(model, clouds, config.bit_depth, start_level, epochs, seed=seed)
    return model, history
