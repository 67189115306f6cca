import math

import numpy as np
import pytest

from s2cpc.errors import MetricError
from s2cpc.metrics import (bits_per_point, estimate_normals, max_nn_error, psnr_d1,
                           psnr_d2)


def unit_grid(n=5):
    g = np.linspace(0.0, 1.0, n)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


class TestD1:
    def test_identical_clouds_are_infinite(self):
        pts = unit_grid()
        assert psnr_d1(pts, pts, peak=1.0) == math.inf

    def test_known_offset(self):
        # Shift every point by 0.1 along x: squared NN distance is 0.01
        # both ways, so PSNR = 10 log10(peak^2 / 0.01) = 20 for peak 1.
        ref = unit_grid()
        rec = ref + np.array([0.002, 0.0, 0.0])
        expect = 10.0 * math.log10(1.0 / 0.002**2)
        assert psnr_d1(ref, rec, peak=1.0) == pytest.approx(expect)

    def test_uses_worse_direction(self):
        ref = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        rec = np.array([[0.0, 0.0, 0.0]])
        # rec -> ref is exact; ref -> rec has one error of 1.0.
        expect = 10.0 * math.log10(1.0 / 0.5)
        assert psnr_d1(ref, rec, peak=1.0) == pytest.approx(expect)

    def test_bad_peak_rejected(self):
        pts = unit_grid(3)
        with pytest.raises(MetricError):
            psnr_d1(pts, pts, peak=0.0)

    def test_bad_shape_rejected(self):
        with pytest.raises(MetricError):
            psnr_d1(np.zeros((0, 3)), unit_grid(3), peak=1.0)
        with pytest.raises(MetricError):
            psnr_d1(np.zeros((4, 2)), unit_grid(3), peak=1.0)


class TestD2:
    def test_planar_offset_projects_onto_normal(self):
        # A plane z=0 with normals +/-z: shifting points in-plane gives a
        # near-zero projected error even though D1 sees the full shift.
        g = np.linspace(-1.0, 1.0, 20)
        xx, yy = np.meshgrid(g, g)
        ref = np.stack([xx, yy, np.zeros_like(xx)], axis=-1).reshape(-1, 3)
        shift = np.array([0.03, 0.0, 0.0])
        assert psnr_d2(ref, ref + shift, peak=1.0) > psnr_d1(ref, ref + shift, peak=1.0)

    def test_normal_offset_matches_d1(self):
        g = np.linspace(-1.0, 1.0, 20)
        xx, yy = np.meshgrid(g, g)
        ref = np.stack([xx, yy, np.zeros_like(xx)], axis=-1).reshape(-1, 3)
        rec = ref + np.array([0.0, 0.0, 0.01])
        d1 = psnr_d1(ref, rec, peak=1.0)
        d2 = psnr_d2(ref, rec, peak=1.0)
        assert d2 == pytest.approx(d1, abs=0.5)


class TestNormals:
    def test_plane_normals_align_with_z(self):
        g = np.linspace(-1.0, 1.0, 15)
        xx, yy = np.meshgrid(g, g)
        pts = np.stack([xx, yy, 0.2 * xx + 0.1 * yy], axis=-1).reshape(-1, 3)
        normals = estimate_normals(pts, k=12)
        expect = np.array([-0.2, -0.1, 1.0])
        expect /= np.linalg.norm(expect)
        dots = np.abs(normals @ expect)
        assert dots.min() > 0.99
        assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)

    def test_small_cloud_clamps_neighborhood(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        normals = estimate_normals(pts, k=16)
        assert np.allclose(np.abs(normals[:, 2]), 1.0, atol=1e-6)


class TestMaxError:
    def test_symmetric_hausdorff(self):
        ref = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        rec = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.25]])
        assert max_nn_error(ref, rec) == pytest.approx(0.25)

    def test_extra_far_point_counts(self):
        ref = np.array([[0.0, 0.0, 0.0]])
        rec = np.array([[0.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
        assert max_nn_error(ref, rec) == pytest.approx(3.0)


class TestBpp:
    def test_definition(self):
        assert bits_per_point(100, 50) == pytest.approx(16.0)

    def test_zero_points_rejected(self):
        with pytest.raises(MetricError):
            bits_per_point(10, 0)
