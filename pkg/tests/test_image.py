import numpy as np
import pytest

from stainbench.errors import ImageError, PatchExtractionError
from stainbench.image import (
    OdImage,
    PatchSpec,
    RasterImage,
    extract_patches,
    lab_to_rgb,
    luminance,
    od_to_rgb,
    otsu_mask,
    otsu_threshold,
    rgb_to_lab,
    rgb_to_od,
    tissue_fraction,
)


def checker(h=16, w=16, lo=0.2, hi=0.9):
    y, x = np.mgrid[0:h, 0:w]
    plane = np.where((y + x) % 2 == 0, hi, lo)
    return RasterImage(np.stack([plane] * 3, axis=-1))


def test_raster_image_validates_range():
    with pytest.raises(ImageError):
        RasterImage(np.full((4, 4, 3), 1.5))
    with pytest.raises(ImageError):
        RasterImage(np.full((4, 4, 3), -0.1))
    with pytest.raises(ImageError):
        RasterImage(np.full((4, 4, 2), 0.5))
    with pytest.raises(ImageError):
        RasterImage(np.full((4, 4, 3), np.nan))


def test_raster_image_grayscale_promotes_to_3d():
    img = RasterImage(np.zeros((5, 7)))
    assert img.data.shape == (5, 7, 1)
    assert (img.height, img.width, img.channels) == (5, 7, 1)


def test_raster_image_is_read_only():
    img = RasterImage(np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0


def test_u8_round_trip():
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, (9, 9, 3), dtype=np.uint8)
    assert np.array_equal(RasterImage.from_u8(arr).to_u8(), arr)


def test_od_round_trip_above_floor():
    rng = np.random.default_rng(1)
    data = rng.uniform(1.0 / 255.0, 1.0, (8, 8, 3))
    img = RasterImage(data)
    back = od_to_rgb(rgb_to_od(img))
    assert np.allclose(back.data, data, atol=1e-12)


def test_od_floor_keeps_black_finite():
    img = RasterImage(np.zeros((4, 4, 3)))
    od = rgb_to_od(img)
    assert np.isfinite(od.od).all()
    # floor is 1/255, so the darkest OD is -log10(1/255)
    assert np.allclose(od.od, np.log10(255.0))


def test_od_image_rejects_negative():
    with pytest.raises(ImageError):
        OdImage(np.full((2, 2, 3), -0.5))


def test_luminance_weights():
    img = RasterImage(np.tile(np.array([1.0, 0.0, 0.0]), (2, 2, 1)))
    assert np.allclose(luminance(img), 0.299)
    img = RasterImage(np.tile(np.array([0.0, 1.0, 0.0]), (2, 2, 1)))
    assert np.allclose(luminance(img), 0.587)


def test_lab_round_trip():
    rng = np.random.default_rng(2)
    data = rng.uniform(0.05, 0.95, (6, 6, 3))
    img = RasterImage(data)
    back = lab_to_rgb(rgb_to_lab(img))
    assert np.abs(back.data - data).max() < 1e-6


def test_lab_white_point():
    white = RasterImage(np.ones((2, 2, 3)))
    lab = rgb_to_lab(white)
    assert np.allclose(lab[:, :, 0], 100.0, atol=1e-4)
    assert np.allclose(lab[:, :, 1:], 0.0, atol=1e-4)


def test_otsu_threshold_bimodal():
    # Two well-separated value clusters: the threshold must fall between.
    gray = np.concatenate([np.full(500, 0.2), np.full(500, 0.8)])
    t = otsu_threshold(gray)
    assert 0.2 * 255 <= t < 0.8 * 255


def test_otsu_threshold_constant_is_none():
    assert otsu_threshold(np.full(100, 0.5)) is None


def test_otsu_mask_marks_dark_side():
    data = np.ones((10, 10, 3))
    data[:5] = 0.2
    mask = otsu_mask(RasterImage(data))
    assert mask.data[:5].mean() == 1.0
    assert mask.data[5:].mean() == 0.0
    assert tissue_fraction(RasterImage(data)) == 0.5


def test_patch_grid_counts():
    img = checker(32, 48)
    patches = extract_patches(img, PatchSpec(size=16, strategy="grid"))
    assert len(patches) == (32 // 16) * (48 // 16)
    assert all(p.data.shape == (16, 16, 3) for p in patches)


def test_patch_random_is_seeded():
    img = checker(40, 40)
    spec = PatchSpec(size=12, count=5, strategy="random", seed=9)
    a = extract_patches(img, spec)
    b = extract_patches(img, spec)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.data, pb.data)


def test_patch_too_large_raises():
    with pytest.raises(PatchExtractionError):
        extract_patches(checker(16, 16), PatchSpec(size=32))


def test_patch_mask_constraint():
    data = np.ones((32, 32, 3))
    data[:, 16:] = 0.1  # right half dark = tissue
    img = RasterImage(data)
    mask = otsu_mask(img)
    patches = extract_patches(img, PatchSpec(size=16, strategy="grid"), mask=mask)
    # only the right-half tiles qualify
    assert len(patches) == 2
    assert all(p.data.mean() < 0.5 for p in patches)
