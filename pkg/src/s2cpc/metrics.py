"""Reconstruction quality and rate metrics for point clouds.

D1 compares point-to-point distances, D2 point-to-plane distances along
reference normals; both take the worse of the two matching directions.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .errors import MetricError


def _as_points(arr, name: str) -> np.ndarray:
    pts = np.asarray(arr, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise MetricError(f"{name} must be (N, 3), got {pts.shape}")
    if len(pts) == 0:
        raise MetricError(f"{name} is empty")
    return pts


def _nn(query: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist, idx = cKDTree(target).query(query, k=1)
    return np.asarray(dist), np.asarray(idx)


def estimate_normals(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Unit normals from the smallest principal axis of k nearest neighbors."""
    pts = _as_points(points, "points")
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    nbrs = pts[np.atleast_2d(idx.T).T]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(norms, 1e-12)


def _psnr(mse: float, peak: float) -> float:
    if peak <= 0:
        raise MetricError(f"peak must be positive, got {peak}")
    if mse <= 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_d1(ref, rec, peak: float) -> float:
    """Point-to-point PSNR; the worse direction of ref->rec and rec->ref."""
    ref = _as_points(ref, "ref")
    rec = _as_points(rec, "rec")
    d_fwd, _ = _nn(ref, rec)
    d_bwd, _ = _nn(rec, ref)
    mse = max(float(np.mean(d_fwd ** 2)), float(np.mean(d_bwd ** 2)))
    return _psnr(mse, peak)


def psnr_d2(ref, rec, peak: float, k: int = 16) -> float:
    """Point-to-plane PSNR along reference normals; worse direction wins."""
    ref = _as_points(ref, "ref")
    rec = _as_points(rec, "rec")
    normals = estimate_normals(ref, k)
    _, idx_fwd = _nn(ref, rec)
    err_fwd = np.einsum("ni,ni->n", ref - rec[idx_fwd], normals)
    _, idx_bwd = _nn(rec, ref)
    err_bwd = np.einsum("ni,ni->n", rec - ref[idx_bwd], normals[idx_bwd])
    mse = max(float(np.mean(err_fwd ** 2)), float(np.mean(err_bwd ** 2)))
    return _psnr(mse, peak)


def max_nn_error(ref, rec) -> float:
    """Symmetric Hausdorff distance between the two clouds."""
    ref = _as_points(ref, "ref")
    rec = _as_points(rec, "rec")
    d_fwd, _ = _nn(ref, rec)
    d_bwd, _ = _nn(rec, ref)
    return max(float(d_fwd.max()), float(d_bwd.max()))


def bits_per_point(num_bytes: int, num_points: int) -> float:
    if num_points <= 0:
        raise MetricError(f"need a positive point count, got {num_points}")
    return 8.0 * num_bytes / num_points
