import numpy as np
import pytest

from stainbench.errors import ImageError
from stainbench.io import read_image, write_image
from stainbench.image import RasterImage


def random_image(seed=0, h=11, w=7):
    rng = np.random.default_rng(seed)
    return RasterImage.from_u8(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


@pytest.mark.parametrize("ext", ["png", "ppm"])
def test_round_trip(tmp_path, ext):
    img = random_image()
    path = tmp_path / f"img.{ext}"
    write_image(path, img)
    back = read_image(path)
    assert np.array_equal(back.to_u8(), img.to_u8())


def test_unknown_extension(tmp_path):
    with pytest.raises(ImageError):
        write_image(tmp_path / "img.bmp", random_image())


def test_missing_file(tmp_path):
    with pytest.raises(ImageError):
        read_image(tmp_path / "nope.png")
