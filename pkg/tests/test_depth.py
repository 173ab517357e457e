import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_connected_mask
from rexnet.depth import (compactness_prior, fill_invalid_depth, position_prior, refine, region_neighbours,
                          transform_depth)
from rexnet.regions import RegionMask


def test_transform_examples():
    raw = np.array([[3.0, 7.0], [3.0, 9.0]])
    d = transform_depth(raw)
    assert d[0, 0] == d[1, 0] == 1.0 and d[1, 1] == 0.0
    ramp = np.arange(11, dtype=float)[None]
    np.testing.assert_allclose(transform_depth(ramp)[0], np.linspace(1, 0, 11), atol=1e-15)
    np.testing.assert_array_equal(transform_depth(np.full((3, 3), 42.0)), 0.5)


def test_invalid_depth_filled_from_nearest():
    raw = np.array([[5.0, 0.0, 9.0]])
    np.testing.assert_array_equal(fill_invalid_depth(raw), [[5.0, 5.0, 9.0]])
    assert transform_depth(np.array([[0.0, 4.0, 8.0]]), invalid=0.0)[0, 0] == 1.0


def test_position_prior_spot_values():
    s0 = np.array([[0.8, 0.3]])
    np.testing.assert_allclose(position_prior(s0, np.zeros((1, 2))), 0.5 * s0, rtol=0, atol=1e-15)
    factor = position_prior(np.ones((1, 1)), np.ones((1, 1)), 5.0)[0, 0]
    assert abs(factor - 1 / (1 + np.exp(-5.0))) <= 1e-15
    assert abs(factor - 0.9933071490757153) <= 1e-9
    assert not position_prior(np.zeros((2, 2)), np.random.default_rng(0).random((2, 2))).any()


def test_compactness_uniform_weights_average_neighbours():
    lab = np.repeat(np.arange(3), 2)[None].repeat(2, axis=0)  # three vertical strips
    s1 = np.where(lab == 0, 0.1, np.where(lab == 1, 0.4, 0.9))
    s2 = compactness_prior(s1, RegionMask(lab), np.zeros(lab.shape), np.zeros(lab.shape + (3,)))
    assert s2[0, 0] == pytest.approx((0.1 + 0.4) / 2)
    assert s2[0, 2] == pytest.approx((0.1 + 0.4 + 0.9) / 3)
    assert s2[0, 4] == pytest.approx((0.4 + 0.9) / 2)


def test_compactness_single_region_identity():
    s1 = np.full((3, 3), 0.37)
    s2 = compactness_prior(s1, RegionMask(np.zeros((3, 3), np.int64)), np.zeros((3, 3)), np.zeros((3, 3, 3)))
    np.testing.assert_allclose(s2, s1, atol=1e-15)


def test_compactness_three_region_hand_case():
    lab = np.array([[0, 1, 2]])
    s1 = np.array([[0.2, 0.6, 1.0]])
    d = np.array([[0.50, 0.52, 0.90]])
    img = np.array([[[100, 100, 100], [103, 104, 100], [10, 10, 10]]], dtype=float)
    s2 = compactness_prior(s1, RegionMask(lab), d, img, 0.02, 5.0)
    # middle region: neighbours {0, 1, 2}; w = exp(-dd^2 / 2*0.02^2) * exp(-dc^2 / 2*5^2)
    w0 = np.exp(-0.02 ** 2 / (2 * 0.0004)) * np.exp(-25 / 50)
    w1 = 1.0
    w2 = np.exp(-0.38 ** 2 / 0.0008) * np.exp(-(93 ** 2 + 94 ** 2 + 90 ** 2) / 50)
    expect = (w0 * 0.2 + w1 * 0.6 + w2 * 1.0) / (w0 + w1 + w2)
    assert s2[0, 1] == pytest.approx(expect, abs=1e-12)


def test_neighbours_include_self():
    lab = np.array([[0, 0, 1], [2, 2, 1]])
    nb = region_neighbours(RegionMask(lab))
    assert [n.tolist() for n in nb] == [[0, 1, 2], [0, 1, 2], [0, 1, 2]]
    assert region_neighbours(RegionMask(np.zeros((2, 2), np.int64)))[0].tolist() == [0]


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        position_prior(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1_000_000))
def test_s2_is_convex_combination_of_neighbour_means(seed):
    rng = np.random.default_rng(seed)
    lab = random_connected_mask(rng, 8, 9, int(rng.integers(1, 7)))
    mask = RegionMask(lab)
    s1 = rng.random(lab.shape)
    d = rng.random(lab.shape)
    img = rng.random(lab.shape + (3,)) * 255
    s2 = compactness_prior(s1, mask, d, img)
    means = np.bincount(lab.ravel(), s1.ravel()) / np.bincount(lab.ravel())
    for i, nb in enumerate(region_neighbours(mask)):
        v = s2[lab == i][0]
        assert means[nb].min() - 1e-12 <= v <= means[nb].max() + 1e-12
        assert np.all(s2[lab == i] == v)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1_000_000))
def test_refine_outputs_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    lab = random_connected_mask(rng, 6, 6, 4)
    raw = rng.integers(0, 5000, (6, 6)).astype(float)
    s1, s2 = refine(rng.random((6, 6)), raw, RegionMask(lab), rng.random((6, 6, 3)) * 255)
    assert np.all((s1 >= 0) & (s1 <= 1)) and np.all((s2 >= 0) & (s2 <= 1))
