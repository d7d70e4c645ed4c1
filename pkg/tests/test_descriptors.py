import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from reference import reference_descriptor

from endoview.colorspace import ColorSpace, PlanarImage
from endoview.descriptors import (
    DescriptorConfig,
    DescriptorError,
    DescriptorVector,
    Family,
    build_pyramid,
    central_gradients,
    describe,
    extract,
    grid_cells,
    lbp_code,
    lbp_map,
    ltp_maps,
    orientation_bins,
    permutation_index,
    read_cache,
    vector_length,
    write_cache,
)


def rand_planes(seed, channels=1, size=64):
    return np.random.default_rng(seed).integers(0, 256, (channels, size, size)) / 255.0


def test_lbp_worked_example():
    # neighbors 1..9 around center 5 in raster order
    patch = np.arange(1, 10).reshape(3, 3)
    # clockwise from top-left: 1 2 3 6 9 8 7 4 -> bits set for 6, 9, 8, 7
    assert lbp_code(patch) == 0b01111000 == 120


def test_lbp_flat_image_sets_all_bits():
    assert np.all(lbp_map(np.full((5, 5), 0.3)) == 255)


def test_lbp_map_agrees_with_patch_code():
    plane = np.random.default_rng(1).random((6, 7))
    codes = lbp_map(plane)
    padded = np.pad(plane, 1, mode="edge")
    for y in range(6):
        for x in range(7):
            assert codes[y, x] == lbp_code(padded[y : y + 3, x : x + 3])


def test_ltp_zero_threshold_upper_is_lbp():
    plane = np.random.default_rng(2).random((9, 9))
    upper, lower = ltp_maps(plane, 0.0)
    np.testing.assert_array_equal(upper, lbp_map(plane))
    assert lower.shape == plane.shape


def test_gradients_and_orientation():
    ramp = np.tile(np.arange(5.0), (4, 1))
    gx, gy = central_gradients(ramp)
    np.testing.assert_array_equal(gx[:, 1:-1], 2.0)
    np.testing.assert_array_equal(gx[:, 0], 1.0)
    np.testing.assert_array_equal(gy, 0.0)
    # orientation exactly at a bin center puts the whole magnitude in that bin
    theta = (2 + 0.5) * math.pi / 9
    b0, b1, w0, w1 = orientation_bins(np.array([math.cos(theta)]), np.array([math.sin(theta)]), 9, False)
    assert b0[0] == 2 and w0[0] == pytest.approx(1.0) and w1[0] == pytest.approx(0.0, abs=1e-12)


def test_permutation_index_is_lexicographic():
    import itertools

    perms = np.array(list(itertools.permutations(range(4))))
    np.testing.assert_array_equal(permutation_index(perms), np.arange(24))


def test_pyramid_shapes_and_mean():
    plane = np.random.default_rng(0).random((9, 11))
    pyr = build_pyramid(plane, 3)
    assert [p.shape for p in pyr] == [(9, 11), (4, 5), (2, 2)]
    assert pyr[1][0, 0] == pytest.approx(plane[:2, :2].mean())


def test_grid_cells_partition_the_image():
    cells = grid_cells(30, 17, 4)
    cover = np.zeros((30, 17), dtype=int)
    for y0, y1, x0, x1 in cells:
        cover[y0:y1, x0:x1] += 1
    assert np.all(cover == 1)


@pytest.mark.parametrize("family", list(Family))
def test_matches_reference_gray(family):
    cfg = DescriptorConfig(family=family, pyramid_levels=2, grid=4)
    planes = rand_planes(11)
    got = extract(PlanarImage(planes, ColorSpace.GS), cfg).values
    np.testing.assert_allclose(got, reference_descriptor(planes, cfg), atol=1e-12)


@pytest.mark.parametrize("family", [Family.MLBP, Family.MHOG, Family.MLIOP])
def test_matches_reference_three_channels(family):
    cfg = DescriptorConfig(family=family, space=ColorSpace.OPP, pyramid_levels=2, grid=2)
    planes = np.random.default_rng(5).normal(size=(3, 32, 32))
    got = extract(PlanarImage(planes, ColorSpace.OPP), cfg).values
    np.testing.assert_allclose(got, reference_descriptor(planes, cfg), atol=1e-12)


@pytest.mark.parametrize("family", list(Family))
@pytest.mark.parametrize("space", [ColorSpace.GS, ColorSpace.HSV])
def test_length_and_block_normalization(family, space):
    cfg = DescriptorConfig(family=family, space=space)
    img = np.random.default_rng(4).integers(0, 256, (128, 128, 3), dtype=np.uint8)
    vec = describe(img, cfg)
    assert len(vec) == vector_length(cfg, image_shape=(128, 128))
    assert vec.config_fingerprint == cfg.fingerprint
    assert np.all(vec.values >= 0)


def test_default_mlbp_length():
    assert vector_length(DescriptorConfig()) == 3 * 16 * 256
    assert vector_length(DescriptorConfig(space=ColorSpace.HSV)) == 3 * 3 * 16 * 256


def test_swmlbp_length_needs_shape():
    with pytest.raises(DescriptorError):
        vector_length(DescriptorConfig(family=Family.SWMLBP))


def test_lbp_blocks_sum_to_one():
    cfg = DescriptorConfig(pyramid_levels=2, grid=2)
    vec = extract(PlanarImage(rand_planes(9, size=32), ColorSpace.GS), cfg).values
    np.testing.assert_allclose(vec.reshape(-1, 256).sum(axis=1), 1.0)


def test_flat_image_hog_blocks_are_zero():
    cfg = DescriptorConfig(family=Family.MHOG, pyramid_levels=1, grid=2)
    vec = extract(PlanarImage(np.full((1, 32, 32), 0.5), ColorSpace.GS), cfg).values
    assert np.all(vec == 0)


def test_too_small_image():
    with pytest.raises(DescriptorError, match="too small"):
        extract(PlanarImage(np.zeros((1, 40, 40)), ColorSpace.GS), DescriptorConfig())


def test_config_validation_and_fingerprint():
    with pytest.raises(DescriptorError):
        DescriptorConfig(pyramid_levels=0)
    with pytest.raises(DescriptorError):
        DescriptorConfig(liop_neighbors=9)
    a, b = DescriptorConfig(), DescriptorConfig(space="HSV")
    assert a.fingerprint != b.fingerprint
    assert a.fingerprint == DescriptorConfig(family="MLBP").fingerprint
    assert len(a.fingerprint) == 32


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 16, 16), elements=st.floats(0, 1)), st.integers(-4, 4))
def test_lbp_invariant_to_exact_gain(planes, k):
    # power-of-two gains are exact, so every comparison is preserved
    cfg = DescriptorConfig(pyramid_levels=1, grid=2)
    a = extract(PlanarImage(planes, ColorSpace.GS), cfg).values
    b = extract(PlanarImage(planes * 2.0**k, ColorSpace.GS), cfg).values
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.reshape(-1, 256).sum(axis=1), 1.0)


def test_cache_round_trip(tmp_path):
    cfg = DescriptorConfig(pyramid_levels=1, grid=2)
    vecs = {i: extract(PlanarImage(rand_planes(i, size=32), ColorSpace.GS), cfg) for i in (3, 1, 2)}
    write_cache(tmp_path / "c.evdc", cfg.fingerprint, vecs)
    fp, back = read_cache(tmp_path / "c.evdc")
    assert fp == cfg.fingerprint and sorted(back) == [1, 2, 3]
    for i in vecs:
        np.testing.assert_allclose(back[i].values, vecs[i].values, rtol=1e-6)


def test_cache_rejects_mismatch_and_corruption(tmp_path):
    vec = DescriptorVector(np.ones(4), "a" * 32)
    with pytest.raises(DescriptorError):
        write_cache(tmp_path / "c", "b" * 32, {0: vec})
    write_cache(tmp_path / "c", "a" * 32, {0: vec})
    data = (tmp_path / "c").read_bytes()
    (tmp_path / "c").write_bytes(data[:-2])
    with pytest.raises(DescriptorError):
        read_cache(tmp_path / "c")
