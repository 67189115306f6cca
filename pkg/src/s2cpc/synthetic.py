"""Deterministic synthetic point clouds for tests, training, and benchmarks."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, RangeError
from .geometry import derive_quant_params, quantize_points, sort_unique

KINDS = ("plane", "plane_grid", "sphere", "lidar_rings", "uniform_random")


def synthetic_points(kind: str, seed: int, n: int) -> np.ndarray:
    """Raw float points; same (kind, seed, n) always yields the same array."""
    if n < 1:
        raise RangeError(f"need at least one point, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "plane":
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        u = np.cross(normal, [1.0, 0.0, 0.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(normal, [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        a = rng.uniform(-1.0, 1.0, size=(n, 2))
        jitter = rng.normal(scale=2e-3, size=n)
        return a[:, :1] * u + a[:, 1:] * v + jitter[:, None] * normal
    if kind == "plane_grid":
        # Raster scan of a gently tilted plane: a lattice with a per-cloud
        # random phase and a small per-point jitter. Points stay separated by
        # nearly the full pitch, so voxelization saturates (one point per
        # voxel) a few levels above the leaves, and the sub-voxel positions
        # are phase-coherent across neighbors the way structured scans are.
        side = int(np.ceil(np.sqrt(n)))
        pitch = 2.0 / side
        ii, jj = np.divmod(np.arange(n), side)
        phase = rng.uniform(0.0, 1.0, size=2)
        a = -1.0 + (ii + phase[0] + rng.uniform(-0.05, 0.05, size=n)) * pitch
        b = -1.0 + (jj + phase[1] + rng.uniform(-0.05, 0.05, size=n)) * pitch
        # Tilt floor keeps the height extent well above the jitter scale, so
        # leaf-level height bits reflect geometry rather than noise; the cap
        # keeps the raster phase coherent across a conv neighborhood.
        tilt = rng.uniform(np.deg2rad(5.0), np.deg2rad(12.0))
        az = rng.uniform(0.0, 2.0 * np.pi)
        normal = np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az),
                           np.cos(tilt)])
        u = np.cross(normal, [0.0, 0.0, 1.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.array([1.0, 0.0, 0.0])
        else:
            u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        height = rng.normal(scale=2e-4, size=n)
        return a[:, None] * u + b[:, None] * v + height[:, None] * normal
    if kind == "sphere":
        radius = rng.uniform(0.5, 1.0)
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = radius + rng.normal(scale=2e-3, size=(n, 1))
        return d * r
    if kind == "lidar_rings":
        # Spinning scanner: many tightly packed beams sweeping a regular
        # angular raster, with ranges mixing near structure and a far open
        # sector the way outdoor scans do. Range is single valued in the
        # beam direction, so the cloud is a warped image of the raster.
        rings = 64
        elevations = np.deg2rad(np.linspace(80.0, 100.0, rings))
        ring = np.arange(n) % rings
        azimuth = (np.arange(n) // rings) * (2.0 * np.pi * rings / n)
        azimuth = azimuth + rng.normal(scale=1e-4, size=n)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        dist = 6.0 + 1.5 * np.sin(3 * azimuth + phase[0]) + 0.8 * np.sin(7 * azimuth + phase[1])
        dist = dist * (1.0 + 0.1 * np.sin(2 * elevations[ring] + phase[2]))
        sector = rng.uniform(0.0, 2.0 * np.pi)
        width = rng.uniform(0.6, 0.9)
        gap = np.abs((azimuth - sector + np.pi) % (2.0 * np.pi) - np.pi)
        dist = np.where(gap < width, dist * rng.uniform(4.0, 7.0), dist)
        dist = dist + rng.normal(scale=0.01, size=n)
        theta = elevations[ring]
        st = np.sin(theta)
        return np.stack([dist * st * np.cos(azimuth),
                         dist * st * np.sin(azimuth),
                         dist * np.cos(theta)], axis=1)
    if kind == "uniform_random":
        return rng.uniform(0.0, 1.0, size=(n, 3))
    raise ConfigError(f"unknown cloud kind {kind!r}; expected one of {KINDS}")


def synthetic_cloud(kind: str, seed: int, n: int, bit_depth: int) -> np.ndarray:
    """Quantized, deduplicated, Morton-sorted integer cloud."""
    points = synthetic_points(kind, seed, n)
    qp = derive_quant_params(points, bit_depth)
    return sort_unique(quantize_points(points, qp, bit_depth), bit_depth)
