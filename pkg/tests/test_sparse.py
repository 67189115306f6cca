import itertools

import numpy as np
import pytest

from s2cpc.errors import ConfigError, ShapeError
from s2cpc.geometry import sort_unique
from s2cpc.sparse import (SparseTensor, build_kernel_map, kernel_offsets,
                          sparse_conv_backward, sparse_conv_forward)


def dense_conv_oracle(coords, feats, weights, bias, kernel, dilation, depth):
    """Literal dense 3D convolution masked to occupied voxels."""
    size = 1 << depth
    grid = np.zeros((size, size, size, feats.shape[1]))
    grid[tuple(coords.T)] = feats
    h = kernel // 2
    out = np.tile(bias.astype(np.float64), (len(coords), 1))
    oi = 0
    for dx, dy, dz in itertools.product(range(-h, h + 1), repeat=3):
        src = coords - dilation * np.array([dx, dy, dz])
        ok = np.all((src >= 0) & (src < size), axis=1)
        out[ok] += grid[tuple(src[ok].T)] @ weights[oi]
        oi += 1
    return out


def random_tensor(rng, depth, max_n=40):
    n = rng.integers(2, max_n)
    coords = sort_unique(rng.integers(0, 1 << depth, size=(n, 3)), depth)
    return SparseTensor(coords, depth)


class TestKernelMap:
    def test_kernel1_is_identity(self):
        st = SparseTensor(np.array([[0, 1, 2], [3, 2, 1]]), 2)
        (src, dst), = st.kernel_map(1)
        assert np.array_equal(src, [0, 1]) and np.array_equal(dst, [0, 1])

    def test_dilation_reaches_distant_voxels(self):
        coords = sort_unique(np.array([[4, 4, 4], [6, 4, 4]]), 4)
        near = build_kernel_map(coords, coords, 4, 3, dilation=1)
        cross_near = sum(len(s) for (s, d) in near) - 2  # minus self pairs
        assert cross_near == 0
        far = build_kernel_map(coords, coords, 4, 3, dilation=2)
        cross_far = sum(len(s) for (s, d) in far) - 2
        assert cross_far == 2

    def test_pairs_match_definition(self):
        rng = np.random.default_rng(0)
        st = random_tensor(rng, 3)
        coord_set = {tuple(c): i for i, c in enumerate(st.coords)}
        for off, (src, dst) in zip(kernel_offsets(3), st.kernel_map(3)):
            listed = set(zip(src.tolist(), dst.tolist()))
            expected = set()
            for i, c in enumerate(st.coords):
                t = tuple(c + off)
                if t in coord_set:
                    expected.add((i, coord_set[t]))
            assert listed == expected

    def test_maps_are_cached(self):
        rng = np.random.default_rng(1)
        st = random_tensor(rng, 4)
        assert st.kernel_map(3) is st.kernel_map(3)
        assert st.kernel_map(3, 2) is not st.kernel_map(3, 1)

    def test_bad_kernel_size(self):
        with pytest.raises(ConfigError):
            kernel_offsets(4)


class TestForward:
    @pytest.mark.parametrize("kernel,dilation", [(1, 1), (3, 1), (3, 2), (5, 1)])
    def test_matches_dense_oracle(self, kernel, dilation):
        rng = np.random.default_rng(kernel * 10 + dilation)
        depth = 4
        st = random_tensor(rng, depth)
        cin, cout = 5, 3
        feats = rng.normal(size=(len(st), cin))
        weights = rng.normal(size=(kernel ** 3, cin, cout))
        bias = rng.normal(size=cout)
        got = sparse_conv_forward(st, feats, weights, bias, kernel, dilation)
        want = dense_conv_oracle(st.coords, feats, weights, bias, kernel, dilation, depth)
        assert np.max(np.abs(got - want)) <= 1e-9

    def test_stacked_weights_match_per_slice(self):
        rng = np.random.default_rng(2)
        st = random_tensor(rng, 3)
        s, cin, cout = 4, 3, 2
        feats = rng.normal(size=(s, len(st), cin))
        weights = rng.normal(size=(s, 27, cin, cout))
        bias = rng.normal(size=(s, cout))
        got = sparse_conv_forward(st, feats, weights, bias, 3)
        for k in range(s):
            want = sparse_conv_forward(st, feats[k], weights[k], bias[k], 3)
            assert np.allclose(got[k], want, atol=1e-12)

    def test_shared_weights_broadcast_over_batch(self):
        rng = np.random.default_rng(3)
        st = random_tensor(rng, 3)
        feats = rng.normal(size=(4, len(st), 3))
        weights = rng.normal(size=(27, 3, 2))
        bias = rng.normal(size=2)
        got = sparse_conv_forward(st, feats, weights, bias, 3)
        for k in range(4):
            assert np.allclose(got[k], sparse_conv_forward(st, feats[k], weights, bias, 3))

    def test_shape_validation(self):
        rng = np.random.default_rng(4)
        st = random_tensor(rng, 3)
        feats = rng.normal(size=(len(st), 3))
        with pytest.raises(ShapeError):
            sparse_conv_forward(st, feats, rng.normal(size=(27, 4, 2)),
                                np.zeros(2), 3)
        with pytest.raises(ShapeError):
            sparse_conv_forward(st, feats[:-1], rng.normal(size=(27, 3, 2)),
                                np.zeros(2), 3)
        with pytest.raises(ShapeError):
            sparse_conv_forward(st, feats, rng.normal(size=(27, 3, 2)),
                                np.zeros(3), 3)


class TestBackward:
    @pytest.mark.parametrize("kernel", [1, 3])
    def test_matches_finite_differences(self, kernel):
        rng = np.random.default_rng(5)
        depth = 3
        st = random_tensor(rng, depth, max_n=12)
        cin, cout = 3, 2
        feats = rng.normal(size=(len(st), cin))
        weights = rng.normal(size=(kernel ** 3, cin, cout))
        bias = rng.normal(size=cout)
        gout = rng.normal(size=(len(st), cout))

        def loss(f, w, b):
            return float((sparse_conv_forward(st, f, w, b, kernel) * gout).sum())

        gf, gw, gb = sparse_conv_backward(st, feats, weights, gout, kernel)
        h = 1e-6
        for arr, grad in ((feats, gf), (weights, gw), (bias, gb)):
            flat = arr.reshape(-1)
            for idx in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up = loss(feats, weights, bias)
                flat[idx] = orig - h
                down = loss(feats, weights, bias)
                flat[idx] = orig
                num = (up - down) / (2 * h)
                assert abs(num - grad.reshape(-1)[idx]) <= 1e-4 * max(1.0, abs(num))

    def test_deterministic_across_runs(self):
        rng = np.random.default_rng(6)
        st = random_tensor(rng, 4)
        feats = rng.normal(size=(len(st), 4)).astype(np.float32)
        weights = rng.normal(size=(125, 4, 4)).astype(np.float32)
        bias = rng.normal(size=4).astype(np.float32)
        a = sparse_conv_forward(st, feats, weights, bias, 5)
        b = sparse_conv_forward(st, feats, weights, bias, 5)
        assert np.array_equal(a, b)


class TestRestrict:
    def test_restrict_aligns_rows(self):
        rng = np.random.default_rng(7)
        st = random_tensor(rng, 4)
        idx = np.arange(len(st))[::2]
        sub = st.restrict(idx)
        assert np.array_equal(sub.coords, st.coords[idx])
        assert len(sub.kernel_map(3)) == 27

    def test_unsorted_coords_rejected(self):
        with pytest.raises(ShapeError):
            SparseTensor(np.array([[1, 1, 1], [0, 0, 0]]), 2)
        with pytest.raises(ShapeError):
            SparseTensor(np.array([[1, 1, 1], [1, 1, 1]]), 2)
