"""Sparse convolution over occupied voxels via precomputed gather/scatter maps.

A convolution here never changes the coordinate set: output rows live on the
same Morton-sorted coordinates as the input. That keeps every kernel map
reusable for all layers operating on one level, so maps are cached on the
tensor. Accumulation is offset-major in a fixed order, which makes encoder
and decoder arithmetic bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, RangeError, ShapeError
from .geometry import morton_encode, validate_coords

KERNEL_SIZES = (1, 3, 5, 7, 9, 11)


def kernel_offsets(kernel: int) -> np.ndarray:
    """All (dx, dy, dz) offsets of a cubic kernel in lexicographic order."""
    if kernel not in KERNEL_SIZES:
        raise ConfigError(f"kernel size must be one of {KERNEL_SIZES}, got {kernel}")
    h = kernel // 2
    r = np.arange(-h, h + 1)
    grid = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3).astype(np.int64)


def build_kernel_map(coords_in, coords_out, depth: int, kernel: int, dilation: int = 1):
    """Per-offset index pairs (i, j) with coords_in[i] + dilation*o = coords_out[j].

    Both coordinate sets must be unique and Morton sorted at ``depth``.
    Returns a list of (src, dst) int arrays, one entry per kernel offset.
    """
    if dilation < 1:
        raise RangeError(f"dilation must be >= 1, got {dilation}")
    coords_in = validate_coords(coords_in, depth)
    coords_out = validate_coords(coords_out, depth)
    codes_out = morton_encode(coords_out, depth)
    limit = 1 << depth
    n_in = len(coords_in)
    all_src = np.arange(n_in)
    pairs = []
    for off in kernel_offsets(kernel):
        if not off.any():
            if coords_in is coords_out:
                pairs.append((all_src, all_src))
                continue
        target = coords_in + dilation * off
        valid = np.all((target >= 0) & (target < limit), axis=1)
        if not valid.any():
            empty = np.zeros(0, dtype=np.int64)
            pairs.append((empty, empty))
            continue
        codes_t = morton_encode(target[valid], depth)
        pos = np.searchsorted(codes_out, codes_t)
        pos_safe = np.minimum(pos, len(codes_out) - 1) if len(codes_out) else pos
        found = (pos < len(codes_out)) & (len(codes_out) > 0)
        if len(codes_out):
            found &= codes_out[pos_safe] == codes_t
        pairs.append((all_src[valid][found], pos_safe[found]))
    return pairs


class SparseTensor:
    """Morton-sorted unique coordinates with cached kernel maps.

    Features are kept outside this class (they change layer to layer while
    the coordinates do not); ops take (tensor, features) pairs where row i
    of the features aligns with coords[i].
    """

    def __init__(self, coords, depth: int, codes=None):
        self.coords = validate_coords(coords, depth)
        self.depth = depth
        self.codes = morton_encode(self.coords, depth) if codes is None else codes
        if len(self.codes) > 1 and not np.all(np.diff(self.codes) > 0):
            raise ShapeError("coordinates must be unique and Morton sorted")
        self._maps: dict[tuple[int, int], list] = {}

    def __len__(self) -> int:
        return len(self.coords)

    def kernel_map(self, kernel: int, dilation: int = 1):
        key = (kernel, dilation)
        if key not in self._maps:
            self._maps[key] = build_kernel_map(self.coords, self.coords, self.depth, kernel, dilation)
        return self._maps[key]

    def restrict(self, idx) -> "SparseTensor":
        """Sub-tensor on a strictly increasing index subset of the rows."""
        idx = np.asarray(idx, dtype=np.int64)
        return SparseTensor(self.coords[idx], self.depth, codes=self.codes[idx])


def _check_conv_args(st, feats, weights, bias, kernel):
    k3 = kernel ** 3
    stacked = weights.ndim == 4
    if weights.ndim not in (3, 4) or weights.shape[-3] != k3:
        raise ShapeError(f"weights must be (K^3, Cin, Cout) or stacked, got {weights.shape}")
    if feats.shape[-2] != len(st):
        raise ShapeError(f"feature rows {feats.shape[-2]} != voxel count {len(st)}")
    if feats.shape[-1] != weights.shape[-2]:
        raise ShapeError(f"feature channels {feats.shape[-1]} != conv Cin {weights.shape[-2]}")
    if stacked:
        if feats.ndim != 3 or feats.shape[0] != weights.shape[0]:
            raise ShapeError("stacked weights need matching (S, N, C) features")
        if bias.shape != (weights.shape[0], weights.shape[-1]):
            raise ShapeError("stacked bias must be (S, Cout)")
    elif bias.shape != (weights.shape[-1],):
        raise ShapeError("bias must be (Cout,)")
    return stacked


def sparse_conv_forward(st: SparseTensor, feats, weights, bias, kernel: int, dilation: int = 1):
    """out[j] = bias + sum_o sum_{(i,j) in map[o]} feats[i] @ weights[o]."""
    stacked = _check_conv_args(st, feats, weights, bias, kernel)
    out_shape = feats.shape[:-1] + (weights.shape[-1],)
    out = np.empty(out_shape, dtype=feats.dtype)
    out[...] = bias[:, None, :] if stacked else bias
    if kernel == 1 and dilation >= 1:
        out += np.matmul(feats, weights[:, 0] if stacked else weights[0])
        return out
    for oi, (src, dst) in enumerate(st.kernel_map(kernel, dilation)):
        if len(src) == 0:
            continue
        w = weights[:, oi] if stacked else weights[oi]
        out[..., dst, :] += np.matmul(feats[..., src, :], w)
    return out


def sparse_conv_backward(st: SparseTensor, feats, weights, grad_out, kernel: int, dilation: int = 1):
    """Exact gradients of sparse_conv_forward w.r.t. features, weights, bias."""
    stacked = weights.ndim == 4
    dummy_bias = np.zeros((weights.shape[0], weights.shape[-1]) if stacked else (weights.shape[-1],),
                          dtype=feats.dtype)
    _check_conv_args(st, feats, weights, dummy_bias, kernel)
    if grad_out.shape != feats.shape[:-1] + (weights.shape[-1],):
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with forward")
    grad_feats = np.zeros_like(feats)
    grad_w = np.zeros_like(weights)
    if stacked:
        grad_b = grad_out.sum(axis=1)
    else:
        grad_b = grad_out.reshape(-1, grad_out.shape[-1]).sum(axis=0)
    if kernel == 1:
        if stacked:
            grad_feats += np.matmul(grad_out, weights[:, 0].transpose(0, 2, 1))
            grad_w[:, 0] += np.matmul(feats.transpose(0, 2, 1), grad_out)
        else:
            grad_feats += np.matmul(grad_out, weights[0].T)
            grad_w[0] += feats.reshape(-1, feats.shape[-1]).T @ \
                grad_out.reshape(-1, grad_out.shape[-1])
        return grad_feats, grad_w, grad_b
    for oi, (src, dst) in enumerate(st.kernel_map(kernel, dilation)):
        if len(src) == 0:
            continue
        g = grad_out[..., dst, :]
        x = feats[..., src, :]
        if stacked:
            grad_feats[:, src, :] += np.matmul(g, weights[:, oi].transpose(0, 2, 1))
            grad_w[:, oi] += np.matmul(x.transpose(0, 2, 1), g)
        else:
            grad_feats[..., src, :] += np.matmul(g, weights[oi].T)
            grad_w[oi] += x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return grad_feats, grad_w, grad_b
