import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import structured_image
from sgsplat.exceptions import ContractViolation
from sgsplat.imagery import GradientField, sobel, to_grayscale
from sgsplat.segmentation import SegmentationMap, default_region_count, region_variances, slic_segment


def test_constant_image_grid_layout():
    seg = slic_segment(np.full((8, 8, 3), 0.5), target_regions=4)
    assert seg.region_count == 4
    assert sorted(seg.sizes().tolist()) == [16, 16, 16, 16]
    lab = seg.labels
    for by in (0, 4):
        for bx in (0, 4):
            block = lab[by:by + 4, bx:bx + 4]
            assert np.all(block == block[0, 0])
    assert len({lab[0, 0], lab[0, 4], lab[4, 0], lab[4, 4]}) == 4


def test_one_region_per_pixel(rng):
    img = rng.uniform(size=(5, 6, 3))
    seg = slic_segment(img, target_regions=30)
    assert seg.region_count == 30
    assert sorted(seg.labels.ravel().tolist()) == list(range(30))


def test_two_halves_follow_color_boundary():
    img = np.zeros((24, 32, 3))
    img[:, 16:] = (0.9, 0.8, 0.1)
    img[:, :16] = (0.1, 0.2, 0.7)
    seg = slic_segment(img, target_regions=2)
    left = seg.labels[:, :16]
    right = seg.labels[:, 16:]
    a = np.bincount(left.ravel()).argmax()
    ideal = np.zeros(seg.shape, bool)
    ideal[:, :16] = True
    got = seg.labels == a
    jaccard = (got & ideal).sum() / (got | ideal).sum()
    assert jaccard >= 0.95
    assert np.bincount(right.ravel(), minlength=seg.region_count)[a] == 0


def test_too_many_regions_rejected():
    with pytest.raises(ContractViolation):
        slic_segment(np.zeros((3, 3, 3)), target_regions=10)


def test_default_region_count():
    assert default_region_count(64, 64) == 64
    assert default_region_count(512, 768) == 384


@given(st.integers(0, 1000), st.integers(8, 20), st.integers(8, 20), st.integers(3, 12))
def test_slic_partitions_and_is_deterministic(seed, h, w, k):
    img = np.random.default_rng(seed).uniform(size=(h, w, 3))
    a = slic_segment(img, target_regions=k)
    b = slic_segment(img, target_regions=k)
    assert np.array_equal(a.labels, b.labels)
    assert a.sizes().sum() == h * w
    assert set(np.unique(a.labels)) == set(range(a.region_count))
    assert all(a.sizes() > 0)


def test_slic_on_structured_image_reasonable():
    img = structured_image(64, 64)
    seg = slic_segment(img)
    assert 32 <= seg.region_count <= 128


def test_region_variances_hand_values():
    labels = np.array([[0, 0], [1, 1]])
    seg = SegmentationMap(labels, 2)
    mag = np.array([[0.5, 0.5], [0.0, 1.0]])
    grad = GradientField(np.zeros((2, 2)), np.zeros((2, 2)), mag)
    assert region_variances(seg, grad) == [(1, 0.25), (0, 0.0)]


def test_region_variances_constant_tie_order():
    labels = np.array([[2, 0, 1, 3]])
    seg = SegmentationMap(labels, 4)
    grad = GradientField(np.zeros((1, 4)), np.zeros((1, 4)), np.ones((1, 4)))
    assert [r for r, _ in region_variances(seg, grad)] == [0, 1, 2, 3]


def test_region_variances_single_region(rng):
    mag = rng.uniform(size=(6, 7))
    seg = SegmentationMap(np.zeros((6, 7), int), 1)
    grad = GradientField(mag, mag, mag)
    [(rid, var)] = region_variances(seg, grad)
    assert rid == 0
    assert var == pytest.approx(np.var(mag), rel=1e-12)


@given(st.integers(0, 10_000))
def test_region_variances_is_sorted_permutation(seed):
    img = np.random.default_rng(seed).uniform(size=(16, 16, 3))
    seg = slic_segment(img, target_regions=8)
    ranked = region_variances(seg, sobel(to_grayscale(img)))
    ids = [r for r, _ in ranked]
    vals = [v for _, v in ranked]
    assert sorted(ids) == list(range(seg.region_count))
    assert all(x >= y for x, y in zip(vals, vals[1:]))
