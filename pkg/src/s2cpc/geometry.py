"""Voxel grid bookkeeping: Morton codes, octree level slices, coordinate transforms.

Conventions used throughout the package:

* Integer coordinates are ``int64`` arrays of shape ``(N, 3)`` with values in
  ``[0, 2**depth)``.
* The canonical ordering of a coordinate set is ascending Morton order with
  the x bit as the most significant bit of each 3-bit group.
* Level ``l`` of an octree (``1 <= l <= depth``) holds the coordinates right
  shifted by ``depth - l``; level 0 is the root voxel ``(0, 0, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, CorruptSliceError, EmptySliceError, RangeError, ShapeError

MAX_DEPTH = 21  # 3 * 21 = 63 bits, fits a signed int64 Morton code


def _as_coords(coords) -> np.ndarray:
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) coordinates, got shape {coords.shape}")
    if not np.issubdtype(coords.dtype, np.integer):
        raise ShapeError(f"expected integer coordinates, got dtype {coords.dtype}")
    return coords.astype(np.int64, copy=False)


def validate_coords(coords, depth: int) -> np.ndarray:
    coords = _as_coords(coords)
    if not 1 <= depth <= MAX_DEPTH:
        raise RangeError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")
    if coords.size and (coords.min() < 0 or coords.max() >= (1 << depth)):
        raise RangeError(f"coordinates out of range for depth {depth}")
    return coords


def morton_encode(coords, depth: int) -> np.ndarray:
    """Interleave coordinate bits into one code per point.

    Bit ``3*b + 2`` of the code is bit ``b`` of x, then y, then z, so the
    3-bit group for octree level ``l`` sits at bit ``3 * (depth - l)`` and
    equals the child index chosen at that level.
    """
    coords = validate_coords(coords, depth)
    codes = np.zeros(len(coords), dtype=np.int64)
    for b in range(depth):
        codes |= ((coords[:, 0] >> b) & 1) << (3 * b + 2)
        codes |= ((coords[:, 1] >> b) & 1) << (3 * b + 1)
        codes |= ((coords[:, 2] >> b) & 1) << (3 * b)
    return codes


def morton_decode(codes, depth: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    coords = np.zeros((len(codes), 3), dtype=np.int64)
    for b in range(depth):
        coords[:, 0] |= ((codes >> (3 * b + 2)) & 1) << b
        coords[:, 1] |= ((codes >> (3 * b + 1)) & 1) << b
        coords[:, 2] |= ((codes >> (3 * b)) & 1) << b
    return coords


def sort_unique(coords, depth: int) -> np.ndarray:
    """Return the coordinates deduplicated and in canonical Morton order."""
    coords = validate_coords(coords, depth)
    codes = np.unique(morton_encode(coords, depth))
    return morton_decode(codes, depth)


def child_index(coords) -> np.ndarray:
    """Index 0..7 of each coordinate within its parent voxel (x bit is MSB)."""
    coords = _as_coords(coords)
    return ((coords[:, 0] & 1) << 2) | ((coords[:, 1] & 1) << 1) | (coords[:, 2] & 1)


def child_offsets() -> np.ndarray:
    """The (8, 3) table mapping child index to its bit offsets within a parent."""
    k = np.arange(8)
    return np.stack([(k >> 2) & 1, (k >> 1) & 1, k & 1], axis=1).astype(np.int64)


@dataclass
class LevelSlice:
    """Occupancy of one octree level, aligned to its Morton-sorted parents.

    ``parent_coords`` lives at level ``level - 1``; bit ``k`` of
    ``occupancy[i]`` says whether child ``k`` of parent ``i`` is occupied.
    """

    level: int
    parent_coords: np.ndarray
    occupancy: np.ndarray

    def expand(self) -> np.ndarray:
        """Child coordinates at ``level``, already in canonical order."""
        if len(self.parent_coords) == 0:
            return np.zeros((0, 3), dtype=np.int64)
        if np.any(self.occupancy == 0):
            raise CorruptSliceError("occupancy byte of an occupied parent is zero")
        bits = (self.occupancy[:, None] >> np.arange(8)) & 1
        parents = np.repeat(self.parent_coords * 2, 8, axis=0)
        children = parents + np.tile(child_offsets(), (len(self.parent_coords), 1))
        return children[bits.reshape(-1).astype(bool)]


def build_parent_slice(child_coords, level: int) -> LevelSlice:
    """Group canonical child coordinates under their parents.

    ``child_coords`` must already be unique and Morton sorted; the output
    parents inherit that order, so no re-sort happens.
    """
    child_coords = _as_coords(child_coords)
    if len(child_coords) == 0:
        raise EmptySliceError("cannot slice an empty coordinate set")
    parents = child_coords >> 1
    keep = np.ones(len(parents), dtype=bool)
    keep[1:] = np.any(parents[1:] != parents[:-1], axis=1)
    parent_coords = parents[keep]
    group = np.cumsum(keep) - 1
    occupancy = np.zeros(len(parent_coords), dtype=np.uint8)
    np.bitwise_or.at(occupancy, group, (1 << child_index(child_coords)).astype(np.uint8))
    return LevelSlice(level=level, parent_coords=parent_coords, occupancy=occupancy)


def build_levels(coords, depth: int) -> list[LevelSlice]:
    """Slice a coordinate set into per-level occupancy, root first.

    Returns slices for levels ``1..depth``; ``slices[l - 1].expand()``
    recovers the coordinates at level ``l``.
    """
    coords = sort_unique(coords, depth)
    if len(coords) == 0:
        return []
    slices: list[LevelSlice] = []
    current = coords
    for level in range(depth, 0, -1):
        s = build_parent_slice(current, level)
        slices.append(s)
        current = s.parent_coords
    if len(current) > 1 or (len(current) == 1 and current.any()):
        raise AlignmentError("octree did not collapse to the root voxel")
    slices.reverse()
    return slices


def level_coords(coords, depth: int, level: int) -> np.ndarray:
    """Unique coordinates of the octree at ``level`` in canonical order."""
    if not 0 <= level <= depth:
        raise RangeError(f"level {level} outside [0, {depth}]")
    coords = validate_coords(coords, depth)
    if level == 0:
        return np.zeros((1, 3), dtype=np.int64) if len(coords) else np.zeros((0, 3), dtype=np.int64)
    return sort_unique(coords >> (depth - level), level)


def cart_to_spherical(points) -> np.ndarray:
    """Map (x, y, z) to (radius, inclination, azimuth).

    Inclination is measured from the +z axis; azimuth from the +x axis in
    the xy plane. Both angles are defined as 0 where the math leaves them
    free (the origin, and points on the z axis).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) points, got shape {points.shape}")
    rho = np.linalg.norm(points, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arccos(np.clip(points[:, 2] / rho, -1.0, 1.0))
    theta = np.where(rho > 0, theta, 0.0)
    phi = np.arctan2(points[:, 1], points[:, 0])
    return np.stack([rho, theta, phi], axis=1)


def spherical_to_cart(sph) -> np.ndarray:
    sph = np.asarray(sph, dtype=np.float64)
    if sph.ndim != 2 or sph.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) spherical points, got shape {sph.shape}")
    rho, theta, phi = sph[:, 0], sph[:, 1], sph[:, 2]
    sin_t = np.sin(theta)
    return np.stack([rho * sin_t * np.cos(phi), rho * sin_t * np.sin(phi), rho * np.cos(theta)], axis=1)


@dataclass
class QuantParams:
    """Per-axis uniform quantizer: ``q = floor((v - offset) / step)``."""

    offset: np.ndarray
    step: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3)
        self.step = np.asarray(self.step, dtype=np.float64).reshape(3)
        if np.any(self.step <= 0) or not np.all(np.isfinite(self.step)):
            raise RangeError("quantizer steps must be positive and finite")
        if not np.all(np.isfinite(self.offset)):
            raise RangeError("quantizer offsets must be finite")


def derive_quant_params(points, depth: int) -> QuantParams:
    """Fit offsets/steps so the points span the full grid at ``depth``."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return QuantParams(offset=np.zeros(3), step=np.ones(3))
    lo = points.min(axis=0)
    extent = points.max(axis=0) - lo
    step = np.where(extent > 0, extent / (1 << depth), 1.0)
    return QuantParams(offset=lo, step=step)


def quantize_points(points, qp: QuantParams, depth: int) -> np.ndarray:
    """Cell index per axis; cells tile [offset, offset + step * 2^depth)."""
    points = np.asarray(points, dtype=np.float64)
    q = np.floor((points - qp.offset) / qp.step).astype(np.int64)
    return np.clip(q, 0, (1 << depth) - 1)


def dequantize_points(coords, qp: QuantParams) -> np.ndarray:
    coords = _as_coords(coords)
    return qp.offset + qp.step * (coords + 0.5)
