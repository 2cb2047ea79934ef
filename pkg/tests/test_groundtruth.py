import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catcnn import groundtruth as gt
from catcnn.groundtruth import DensityMap, DotAnnotation


def ann(*pts):
    return DotAnnotation(np.array(pts, dtype=float).reshape(-1, 2))


def test_kernel_normalized_symmetric_peaked():
    k = gt.gaussian_kernel()
    assert k.shape == (15, 15)
    assert abs(k.sum() - 1.0) < 1e-12
    assert np.allclose(k, k.T) and np.allclose(k, np.rot90(k))
    assert k[7, 7] == k.max()


def test_kernel_rejects_even_size():
    with pytest.raises(ValueError):
        gt.gaussian_kernel(14)


def test_kernel_against_closed_form():
    k = gt.gaussian_kernel(5, 1.0)
    raw = np.array([[np.exp(-(i * i + j * j) / 2.0) for j in range(-2, 3)] for i in range(-2, 3)])
    np.testing.assert_allclose(k, raw / raw.sum(), rtol=1e-14)


def test_density_single_center_point():
    d = gt.render_density(ann((32, 32)), 64, 64)
    assert abs(d.count() - 1.0) < 1e-12
    assert np.unravel_index(d.values.argmax(), d.values.shape) == (32, 32)


def test_density_empty():
    d = gt.render_density(DotAnnotation(), 20, 30)
    assert d.values.shape == (20, 30) and d.count() == 0.0


def test_density_seven_points_near_border():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0, 47, 7), rng.uniform(0, 47, 7)])
    pts[:3] = [[0.0, 1.0], [46.5, 2.0], [2.0, 47.0]]
    assert abs(gt.render_density(DotAnnotation(pts), 48, 48).count() - 7.0) < 1e-9


def test_half_up_rounding_places_kernel():
    d = gt.render_density(ann((10.5, 4.5)), 20, 20)
    assert np.unravel_index(d.values.argmax(), d.values.shape) == (5, 11)


def test_mask_templates():
    assert gt.render_mask(ann((20, 20)), 40, 40).values.sum() == 225
    assert gt.render_mask(ann((0, 0)), 40, 40).values.sum() == 64
    one = gt.render_mask(ann((9, 12)), 30, 30).values
    two = gt.render_mask(ann((9, 12), (9, 12)), 30, 30).values
    assert np.array_equal(one, two)


def test_mask_overlap_is_or():
    m = gt.render_mask(ann((10, 10), (12, 10)), 30, 30).values
    assert set(np.unique(m)) == {0.0, 1.0}
    assert m.sum() == 15 * 17


def test_downsample_density_examples():
    d = DensityMap(np.random.default_rng(1).uniform(size=(9, 13)))
    assert np.array_equal(gt.downsample_density(d, 1).values, d.values)
    assert abs(gt.downsample_density(d, 4).count() - d.count()) < 1e-12
    q = gt.downsample_density(DensityMap(np.full((4, 4), 0.25)), 2)
    assert q.values.tolist() == [[1.0, 1.0], [1.0, 1.0]]
    assert q.resolution_divisor == 2


def test_downsample_partial_blocks_use_ceil_extent():
    out = gt.downsample_density(DensityMap(np.ones((5, 6))), 4).values
    assert out.shape == (2, 2)
    assert out.tolist() == [[16.0, 8.0], [4.0, 2.0]]


def test_downsample_mask_examples():
    z = gt.ConfidenceMask(np.zeros((8, 8)))
    assert np.all(gt.downsample_mask(z, 4).values == 0)
    m = np.zeros((8, 8))
    m[5, 6] = 1
    out = gt.downsample_mask(gt.ConfidenceMask(m), 4).values
    assert out.tolist() == [[0.0, 0.0], [0.0, 1.0]]


def test_downsample_rejects_zero_factor():
    with pytest.raises(ValueError):
        gt.downsample_density(DensityMap(np.ones((4, 4))), 0)


def test_bins_fig5_example():
    bins = gt.compute_bins(range(1, 101), 5)
    np.testing.assert_allclose(bins.edges, [1, 20.8, 40.6, 60.4, 80.2, 100], rtol=1e-12)
    assert gt.quantize_group(45, bins) == 2
    assert gt.quantize_group(100, bins) == 4


def test_bins_interior_convention():
    bins = gt.compute_bins([0, 10], 2)
    assert bins.edges.tolist() == [0.0, 5.0, 10.0]
    assert gt.quantize_group(5, bins) == 1
    assert gt.quantize_group(10, bins) == 1


def test_quantize_clamps():
    bins = gt.compute_bins([10, 60], 5)
    assert gt.quantize_group(-4, bins) == 0
    assert gt.quantize_group(1000, bins) == 4


def test_bins_degenerate_range():
    with pytest.raises(gt.DegenerateRangeError):
        gt.compute_bins([7, 7, 7])
    fallback = gt.single_group_bins(7)
    assert fallback.K == 5
    assert gt.quantize_group(7, fallback) == 0 and gt.quantize_group(100, fallback) == 0


def test_clipped_annotation_warns(caplog):
    with caplog.at_level(logging.WARNING):
        a = DotAnnotation.clipped_to([[-3, 10], [5, 5]], 20, 20)
    assert a.clipped == 1
    assert a.points.tolist() == [[0.0, 10.0], [5.0, 5.0]]
    assert "clipped 1" in caplog.text


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(16, 64),
    w=st.integers(16, 64),
    n=st.integers(0, 20),
    seed=st.integers(0, 2**16),
    factor=st.sampled_from([1, 2, 4]),
)
def test_mass_conservation_through_downsampling(h, w, n, seed, factor):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(0, w - 1, n), rng.uniform(0, h - 1, n)])
    d = gt.render_density(DotAnnotation(pts), h, w)
    assert abs(d.count() - n) < 1e-9 * max(1, n)
    assert abs(gt.downsample_density(d, factor).count() - d.count()) < 1e-12 * max(1, n)
    m = gt.downsample_mask(gt.render_mask(DotAnnotation(pts), h, w), factor).values
    assert set(np.unique(m)) <= {0.0, 1.0}
