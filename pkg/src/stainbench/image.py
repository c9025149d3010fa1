"""Image containers, color-space conversions, background masking and patching.

Images are carried as immutable float arrays in the unit interval. 8-bit data
entering through I/O is scaled by 1/255 and restored by rounding, so an
8-bit -> float -> 8-bit trip is exact.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ImageError, PatchExtractionError

# Floor applied to pixel values before the log transform so optical density
# stays finite; 1/255 matches the quantization limit of 8-bit input.
OD_FLOOR = 1.0 / 255.0

# Rec. 601 luma weights, used for Otsu grayscale and the luminance metrics.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# sRGB <-> XYZ (D65) matrices.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_D65_WHITE = _RGB_TO_XYZ.sum(axis=1)


def _freeze(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RasterImage:
    """H x W x C color raster with unit-interval float values.

    data is (height, width, channels) with channels 1 or 3. The array is made
    read-only on construction, so instances are safe to share across threads.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImageError(f"expected HxWx1 or HxWx3 data, got shape {arr.shape}")
        if arr.size == 0:
            raise ImageError("empty image")
        if not np.isfinite(arr).all():
            raise ImageError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ImageError(
                f"values outside [0, 1]: min={arr.min():.4g} max={arr.max():.4g}"
            )
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @classmethod
    def from_u8(cls, arr):
        """Build from an 8-bit integer array (HxW or HxWxC)."""
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_u8(self):
        """Round back to 8-bit; exact inverse of from_u8."""
        return np.rint(self.data * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class OdImage:
    """Per-channel optical density raster (non-negative, 3 channels)."""

    od: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.od)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ImageError(f"expected HxWx3 optical density, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ImageError("optical density contains non-finite values")
        if arr.min() < 0.0:
            raise ImageError(f"negative optical density: min={arr.min():.4g}")
        object.__setattr__(self, "od", _freeze(arr))

    @property
    def height(self):
        return self.od.shape[0]

    @property
    def width(self):
        return self.od.shape[1]

    def pixels(self):
        """Flattened (N, 3) view of the optical density values."""
        return self.od.reshape(-1, 3)


@dataclass(frozen=True)
class PatchSpec:
    """How to cut patches out of an image.

    strategy "random" draws `count` positions from the given seed; "grid"
    tiles the image with stride equal to the patch size and ignores `count`.
    """

    size: int
    count: int = 1
    strategy: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ImageError(f"patch size must be >= 8, got {self.size}")
        if self.count < 1:
            raise ImageError(f"patch count must be >= 1, got {self.count}")
        if self.strategy not in ("random", "grid"):
            raise ImageError(f"unknown patch strategy {self.strategy!r}")


def _require_rgb(img):
    if img.channels != 3:
        raise ImageError(f"operation needs a 3-channel image, got {img.channels}")


def luminance(img):
    """Rec. 601 luma of an image as a 2-D array in [0, 1]."""
    if img.channels == 1:
        return img.data[:, :, 0]
    return img.data @ LUMA_WEIGHTS


def rgb_to_od(img, i0=1.0):
    """Convert transmitted-light RGB to optical density.

    od[c] = -log10(max(pixel[c], OD_FLOOR) / i0). i0 is the white point in
    unit scale (1.0 corresponds to 255 in 8-bit data).

    Args:
        img: RasterImage with 3 channels.
        i0: incident light intensity, > 0.

    Returns:
        OdImage of the same spatial extent.
    """
    _require_rgb(img)
    if i0 <= 0:
        raise ImageError(f"i0 must be positive, got {i0}")
    od = -np.log10(np.maximum(img.data, OD_FLOOR) / i0)
    return OdImage(np.maximum(od, 0.0))


def od_to_rgb(od, i0=1.0):
    """Invert the optical density transform; output clamped to [0, 1]."""
    rgb = i0 * np.power(10.0, -od.od)
    return RasterImage(np.clip(rgb, 0.0, 1.0))


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _lab_f(t):
    delta = 6.0 / 29.0
    return np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)


def _lab_f_inv(t):
    delta = 6.0 / 29.0
    return np.where(t > delta, t**3, 3 * delta**2 * (t - 4.0 / 29.0))


def rgb_to_lab(img):
    """sRGB (D65) to CIE Lab.

    Returns a plain (H, W, 3) float array with channels in their native
    ranges: L in [0, 100], a and b roughly in [-128, 127]. Lab values cannot
    live in a unit-interval RasterImage, so the raw array is returned.
    """
    _require_rgb(img)
    linear = _srgb_to_linear(img.data)
    xyz = linear @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _D65_WHITE)
    lab = np.empty_like(xyz)
    lab[:, :, 0] = 116.0 * f[:, :, 1] - 16.0
    lab[:, :, 1] = 500.0 * (f[:, :, 0] - f[:, :, 1])
    lab[:, :, 2] = 200.0 * (f[:, :, 1] - f[:, :, 2])
    return lab


def lab_to_rgb(lab):
    """CIE Lab (D65) back to sRGB, clamped to [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ImageError(f"expected HxWx3 Lab data, got shape {lab.shape}")
    fy = (lab[:, :, 0] + 16.0) / 116.0
    fx = fy + lab[:, :, 1] / 500.0
    fz = fy - lab[:, :, 2] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=2)
    xyz *= _D65_WHITE
    linear = xyz @ _XYZ_TO_RGB.T
    return RasterImage(np.clip(_linear_to_srgb(linear), 0.0, 1.0))


def otsu_threshold(gray):
    """Otsu's threshold over a 256-bin histogram of values in [0, 1].

    Returns the bin index t in [0, 255] maximizing between-class variance for
    the split (<= t, > t), or None when the image is constant.
    """
    hist = np.bincount(
        np.clip((np.asarray(gray).ravel() * 255.0).astype(np.int64), 0, 255),
        minlength=256,
    ).astype(np.float64)
    total = hist.sum()
    prob = hist / total
    omega = np.cumsum(prob)
    mu = np.cumsum(prob * np.arange(256))
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_total * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = 0.0
    if sigma_b.max() <= 0.0:
        return None
    return int(np.argmax(sigma_b))


def otsu_mask(img):
    """Binary tissue mask. H&E tissue is darker than the glass background,
    so the mask is 1 on the dark side of the Otsu threshold.

    A constant image yields an all-ones mask (everything treated as tissue).
    """
    gray = luminance(img)
    t = otsu_threshold(gray)
    if t is None:
        mask = np.ones(gray.shape)
    else:
        # Compare in the same quantized bins the threshold was chosen from.
        q = np.clip((gray * 255.0).astype(np.int64), 0, 255)
        mask = (q <= t).astype(np.float64)
    return RasterImage(mask[:, :, None])


def tissue_fraction(img):
    """Fraction of pixels flagged as tissue by otsu_mask."""
    return float(otsu_mask(img).data.mean())


def _crop(img, y, x, size):
    return RasterImage(img.data[y : y + size, x : x + size, :])


def extract_patches(img, spec, mask=None):
    """Cut square patches from an image.

    Args:
        img: source RasterImage.
        spec: PatchSpec. "grid" tiles with stride = size; "random" draws
            spec.count positions deterministically from spec.seed.
        mask: optional 1-channel RasterImage; when given, every returned
            patch must contain at least 50% tissue (mask == 1) pixels.

    Returns:
        List of RasterImage patches.

    Raises:
        PatchExtractionError: no position satisfies the constraints.
    """
    size = spec.size
    if size > min(img.height, img.width):
        raise PatchExtractionError(
            f"patch size {size} exceeds image extent {img.height}x{img.width}"
        )
    mask_arr = None
    if mask is not None:
        if mask.data.shape[:2] != img.data.shape[:2]:
            raise ImageError("mask dimensions do not match image")
        mask_arr = mask.data[:, :, 0]

    def acceptable(y, x):
        if mask_arr is None:
            return True
        return mask_arr[y : y + size, x : x + size].mean() >= 0.5

    if spec.strategy == "grid":
        patches = []
        for y in range(0, img.height - size + 1, size):
            for x in range(0, img.width - size + 1, size):
                if acceptable(y, x):
                    patches.append(_crop(img, y, x, size))
        if not patches:
            raise PatchExtractionError("no grid tile satisfies the tissue constraint")
        return patches

    rng = np.random.default_rng(spec.seed)
    max_y = img.height - size
    max_x = img.width - size
    patches = []
    attempts = 0
    limit = max(200, 200 * spec.count)
    while len(patches) < spec.count:
        if attempts >= limit:
            raise PatchExtractionError(
                f"found only {len(patches)}/{spec.count} valid patches "
                f"after {attempts} draws"
            )
        y = int(rng.integers(0, max_y + 1))
        x = int(rng.integers(0, max_x + 1))
        attempts += 1
        if acceptable(y, x):
            patches.append(_crop(img, y, x, size))
    return patches
