import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fetal_ac.errors import InputError, UndefinedDirectionError
from fetal_ac.patches import (
    ClassLabel,
    PatchSet,
    SamplingConfig,
    UltrasoundImage,
    ViewExtractor,
    anechoic_mask,
    build_dataset,
    default_probe_origin,
    extract_views,
    fan_range,
    propagation_direction,
    propagation_directions,
)


def padded_crop(img, top, left, size):
    """Crop with zero fill outside the image, by explicit index checks."""
    out = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            r, c = top + i, left + j
            if 0 <= r < img.shape[0] and 0 <= c < img.shape[1]:
                out[i, j] = img[r, c]
    return out


def oracle_views(img, row, col, size):
    half = size // 2 - 1
    normal = padded_crop(img, row - half, col - half, size) / 255.0
    big = padded_crop(img, row - (size - 1), col - (size - 1), 2 * size) / 255.0
    wide = big.reshape(size, 2, size, 2).mean(axis=(1, 3))
    return normal, wide


def test_anechoic_threshold_boundary():
    px = np.full((256, 256), 100, np.uint8)
    px[0, 0] = 255
    px[1, 1] = 25
    px[2, 2] = 26
    m = anechoic_mask(UltrasoundImage(px))
    assert m[1, 1] and not m[2, 2]
    assert m.sum() == 1


def test_anechoic_uniform_checkerboard_and_zero():
    assert not anechoic_mask(np.full((4, 4), 200, np.uint8)).any()
    board = (np.indices((6, 6)).sum(axis=0) % 2 * 255).astype(np.uint8)
    np.testing.assert_array_equal(anechoic_mask(board), board == 0)
    assert anechoic_mask(np.zeros((3, 3), np.uint8)).all()


@pytest.mark.parametrize("rc", [(0, 0), (5, 250), (128, 128), (255, 255), (130, 3)])
def test_views_match_oracle(rc):
    img = np.random.default_rng(0).integers(0, 256, (256, 256), dtype=np.uint8)
    normal, wide = extract_views(img, *rc, size=16)
    on, ow = oracle_views(img, *rc, 16)
    np.testing.assert_allclose(normal, on, atol=1e-6)
    np.testing.assert_allclose(wide, ow, atol=1e-6)


def test_batch_extraction_agrees_with_single():
    img = np.random.default_rng(1).integers(0, 256, (256, 300), dtype=np.uint8)
    ex = ViewExtractor(img, 32)
    rows, cols = np.array([0, 17, 255, 100]), np.array([299, 2, 0, 151])
    n, w = ex.normal(rows, cols), ex.wide(rows, cols)
    for k in range(4):
        on, ow = oracle_views(img, rows[k], cols[k], 32)
        np.testing.assert_allclose(n[k], on, atol=1e-6)
        np.testing.assert_allclose(w[k], ow, atol=1e-6)


def test_corner_normal_view_has_65_by_65_valid_pixels():
    normal, _ = extract_views(np.full((256, 256), 255, np.uint8), 0, 0)
    assert normal.shape == (128, 128)
    assert np.count_nonzero(normal) == 65 * 65
    assert normal[63:, 63:].all()


def test_interior_views_have_no_padding():
    img = np.random.default_rng(2).integers(1, 256, (512, 512), dtype=np.uint8)
    normal, wide = extract_views(img, 256, 256)
    assert normal.min() > 0 and wide.min() > 0


def test_constant_image_gives_constant_views():
    normal, wide = extract_views(np.full((512, 512), 77, np.uint8), 256, 256)
    np.testing.assert_allclose(normal, 77 / 255, atol=1e-7)
    np.testing.assert_allclose(wide, 77 / 255, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(dr=st.integers(-20, 20), dc=st.integers(-20, 20))
def test_translation_consistency(dr, dc):
    big = np.random.default_rng(3).integers(0, 256, (400, 400), dtype=np.uint8)
    a = extract_views(big, 200, 200, size=16)
    b = extract_views(np.roll(big, (dr, dc), axis=(0, 1)), 200 + dr, 200 + dc, size=16)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_wide_view_upsamples_to_block_structure():
    img = np.random.default_rng(4).integers(0, 256, (256, 256), dtype=np.uint8)
    _, wide = extract_views(img, 100, 90, size=16)
    up = np.kron(wide, np.ones((2, 2)))
    blocks = up.reshape(16, 2, 16, 2)
    assert np.all(blocks == blocks[:, :1, :, :1])


def test_extract_views_rejects_outside_centre():
    with pytest.raises(InputError):
        extract_views(np.zeros((256, 256), np.uint8), 256, 0)


def test_direction_examples():
    assert propagation_direction((10, 5), (10, 0)) == pytest.approx((0.0, 1.0))
    assert propagation_direction((3, 4), (0, 0)) == pytest.approx((0.6, 0.8))
    with pytest.raises(UndefinedDirectionError):
        propagation_direction((1, 2), (1, 2))


@given(
    x=st.floats(-1e4, 1e4), y=st.floats(-1e4, 1e4),
    ox=st.floats(-1e4, 1e4), oy=st.floats(-1e4, 1e4),
)
def test_direction_is_unit(x, y, ox, oy):
    if (x, y) == (ox, oy):
        return
    if np.hypot(x - ox, y - oy) < 1e-6:
        return
    u, v = propagation_direction((x, y), (ox, oy))
    assert abs(np.hypot(u, v) - 1) <= 1e-6


def test_vectorised_directions_match_scalar():
    rows, cols = np.array([0, 10, 255]), np.array([3, 200, 128])
    d = propagation_directions(rows, cols, (127.5, -25.6))
    for k in range(3):
        assert d[k] == pytest.approx(propagation_direction((cols[k], rows[k]), (127.5, -25.6)))


def test_default_origin_and_fan_cover_image():
    origin = default_probe_origin((256, 256))
    assert origin == (127.5, -25.6)
    lo, hi = fan_range((256, 256), origin)
    rr, cc = np.mgrid[0:256, 0:256]
    ang = np.degrees(np.arctan2(rr - origin[1], cc - origin[0]))
    assert ang.min() >= lo - 1e-9 and ang.max() <= hi + 1e-9
    assert 0 < lo < 90 < hi < 180


def test_image_validation():
    with pytest.raises(InputError):
        UltrasoundImage(np.zeros((100, 300), np.uint8))
    with pytest.raises(InputError):
        UltrasoundImage(np.zeros((256, 256), np.float32))
    with pytest.raises(InputError):
        UltrasoundImage(np.zeros((256, 256), np.uint8), pixel_spacing_mm=0)


def _toy_item(seed, classes=(1, 2, 3, 4)):
    rng = np.random.default_rng(seed)
    px = rng.integers(60, 256, (256, 256)).astype(np.uint8)
    px[0, 0] = 255
    labels = np.zeros((256, 256), np.uint8)
    for k, cls in enumerate(classes):
        r0 = 20 + 50 * k
        labels[r0 : r0 + 30, 40:200] = cls
        px[r0 : r0 + 30, 40:200] = rng.integers(0, 20, (30, 160))
    labels[240:250, 10:20] = 3  # labelled but bright: must never be sampled
    return UltrasoundImage(px, image_id=f"toy{seed}"), labels


def test_build_dataset_caps_split_and_anechoic_centres():
    items = [_toy_item(s) for s in range(3)]
    ds = build_dataset(items, SamplingConfig(view_size=16, cap_per_class=50, seed=1))
    assert len(ds) == 3 * 4 * 50
    assert np.bincount(ds.labels, minlength=4).tolist() == [150] * 4
    assert ds.is_train.sum() == round(len(ds) * 2 / 3)
    np.testing.assert_allclose(np.hypot(*ds.direction.T), 1, atol=1e-6)
    for (k, r, c), lab in zip(ds.sources, ds.labels):
        img, labels = items[k]
        assert img.pixels[r, c] <= 25.5
        assert labels[r, c] == lab + 1
    s = ds.sample(0)
    assert isinstance(s.label, ClassLabel) and s.source[0] == "toy0"


def test_build_dataset_cap_arithmetic():
    items = [_toy_item(s) for s in range(4)]
    ds = build_dataset(items, SamplingConfig(view_size=16, cap_per_class=100))
    assert len(ds) <= 4 * 4 * 100


def test_build_dataset_warns_on_absent_class(caplog):
    with caplog.at_level(logging.WARNING):
        ds = build_dataset([_toy_item(0, classes=(1, 3))], SamplingConfig(view_size=16, cap_per_class=10))
    assert set(ds.labels) == {0, 2}
    assert "UV" in caplog.text and "SA" in caplog.text


def test_build_dataset_empty_and_mismatch():
    assert len(build_dataset([], SamplingConfig(view_size=16))) == 0
    img, labels = _toy_item(0)
    with pytest.raises(InputError):
        build_dataset([(img, labels[:-1])], SamplingConfig(view_size=16))


def test_split_arithmetic_two_to_one():
    assert round(13261 * 2 / 3) == 8841
    assert 13261 - round(13261 * 2 / 3) == 4420


def test_patchset_concat_offsets_sources():
    a = build_dataset([_toy_item(0)], SamplingConfig(view_size=16, cap_per_class=5, train_fraction=1.0))
    b = build_dataset([_toy_item(1)], SamplingConfig(view_size=16, cap_per_class=5, train_fraction=0.0))
    c = PatchSet.concat([a, b])
    assert len(c) == len(a) + len(b)
    assert len(c.train) == len(a) and len(c.test) == len(b)
    assert set(c.sources[len(a):, 0]) == {1}
    assert c.image_ids == ["toy0", "toy1"]
