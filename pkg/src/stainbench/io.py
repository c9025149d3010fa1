"""Lossless image file I/O: 8-bit RGB PNG plus a plain-text PPM fallback.

Both paths round-trip 8-bit data exactly.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageError
from .image import RasterImage


def write_image(path, img):
    """Write a RasterImage as 8-bit PNG or ASCII PPM, chosen by extension."""
    path = Path(path)
    u8 = img.to_u8()
    if u8.shape[2] == 1:
        u8 = np.repeat(u8, 3, axis=2)
    if path.suffix.lower() == ".ppm":
        _write_ppm(path, u8)
    elif path.suffix.lower() == ".png":
        Image.fromarray(u8, mode="RGB").save(path, format="PNG")
    else:
        raise ImageError(f"unsupported image extension {path.suffix!r}")


def read_image(path):
    """Read an 8-bit PNG or ASCII PPM file into a RasterImage."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".ppm":
            return RasterImage.from_u8(_read_ppm(path))
        if path.suffix.lower() == ".png":
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            return RasterImage.from_u8(arr)
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc}") from exc
    raise ImageError(f"unsupported image extension {path.suffix!r}")


def _write_ppm(path, u8):
    h, w, _ = u8.shape
    lines = [f"P3\n{w} {h}\n255\n"]
    flat = u8.reshape(-1)
    for start in range(0, flat.size, 12):
        lines.append(" ".join(str(v) for v in flat[start : start + 12]) + "\n")
    Path(path).write_text("".join(lines))


def _read_ppm(path):
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P3":
        raise ImageError(f"{path}: not an ASCII (P3) PPM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ImageError(f"{path}: only maxval 255 PPM is supported")
    values = np.array(tokens[4:], dtype=np.int64)
    if values.size != w * h * 3:
        raise ImageError(f"{path}: expected {w * h * 3} samples, got {values.size}")
    if values.min() < 0 or values.max() > 255:
        raise ImageError(f"{path}: sample out of range")
    return values.reshape(h, w, 3).astype(np.uint8)
