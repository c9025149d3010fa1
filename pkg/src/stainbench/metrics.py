"""Image similarity metrics and ROC analysis for the benchmark suite.

SSIM follows the Wang et al. windowed construction, FSIM the Zhang et al.
phase-congruency/gradient construction with a simplified congruency map, PSNR
and Pearson are the textbook definitions, and roc_auc sweeps unique score
thresholds with trapezoidal integration.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate, correlate1d

from .errors import MetricError
from .image import luminance

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_MAX_DB = 99.0

# FSIM constants from the original reference formulation. T2 is calibrated
# for gradients of 0..255-scaled luminance.
FSIM_SCALES = 4
FSIM_ORIENTATIONS = 4
FSIM_MIN_WAVELENGTH = 6.0
FSIM_MULT = 2.0
FSIM_SIGMA_ONF = 0.5978
FSIM_T1 = 0.85
FSIM_T2 = 160.0
FSIM_MIN_SIZE = 16

_SCHARR_X = np.array([[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]]) / 16.0


@dataclass(frozen=True)
class MetricResult:
    """Per-image values of one metric plus their mean and standard deviation."""

    name: str
    per_image: tuple
    mean: float
    std: float

    def __post_init__(self):
        values = np.asarray(self.per_image, dtype=np.float64)
        if values.size == 0:
            raise MetricError("MetricResult needs at least one value")
        if abs(float(values.mean()) - self.mean) > 1e-9:
            raise MetricError(f"{self.name}: stored mean disagrees with values")
        if abs(float(values.std()) - self.std) > 1e-9:
            raise MetricError(f"{self.name}: stored std disagrees with values")
        object.__setattr__(self, "per_image", tuple(float(v) for v in values))

    @classmethod
    def from_values(cls, name, values):
        arr = np.asarray(list(values), dtype=np.float64)
        if arr.size == 0:
            raise MetricError(f"{name}: no values to aggregate")
        return cls(name, tuple(arr.tolist()), float(arr.mean()), float(arr.std()))


@dataclass(frozen=True)
class RocCurve:
    """ROC sweep results: descending thresholds with matched rates and AUC."""

    thresholds: tuple
    tpr: tuple
    fpr: tuple
    auc: float

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        tpr = np.asarray(self.tpr, dtype=np.float64)
        fpr = np.asarray(self.fpr, dtype=np.float64)
        if not (t.shape == tpr.shape == fpr.shape) or t.ndim != 1:
            raise MetricError("thresholds, tpr, fpr must be 1-D and same length")
        if np.any(np.diff(t) >= 0):
            raise MetricError("thresholds must be strictly descending")
        if np.any(np.diff(tpr) < 0) or np.any(np.diff(fpr) < 0):
            raise MetricError("tpr/fpr must be non-decreasing along the sweep")
        for arr, name in ((tpr, "tpr"), (fpr, "fpr")):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise MetricError(f"{name} values must lie in [0, 1]")
        if not 0.0 <= self.auc <= 1.0:
            raise MetricError("auc must lie in [0, 1]")
        object.__setattr__(self, "thresholds", tuple(t.tolist()))
        object.__setattr__(self, "tpr", tuple(tpr.tolist()))
        object.__setattr__(self, "fpr", tuple(fpr.tolist()))


def _check_pair(a, b):
    if a.data.shape != b.data.shape:
        raise MetricError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _windowed_mean(plane, window):
    # Separable correlation, cropped to windows fully inside the image.
    half = window.size // 2
    out = correlate1d(plane, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    return out[half:-half, half:-half]


def _ssim_plane(x, y):
    if min(x.shape) < SSIM_WINDOW:
        raise MetricError(
            f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x = _windowed_mean(x, window)
    mu_y = _windowed_mean(y, window)
    var_x = _windowed_mean(x * x, window) - mu_x * mu_x
    var_y = _windowed_mean(y * y, window) - mu_y * mu_y
    cov = _windowed_mean(x * y, window) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(a, b, mode="luminance"):
    """Mean structural similarity between two images on a unit value scale.

    Gaussian 11x11 windows (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1.
    mode 'luminance' scores the luma plane; 'channel_mean' averages the
    per-channel scores.
    """
    _check_pair(a, b)
    if mode == "luminance":
        return _ssim_plane(luminance(a), luminance(b))
    if mode == "channel_mean":
        scores = [
            _ssim_plane(a.data[:, :, ch], b.data[:, :, ch])
            for ch in range(a.channels)
        ]
        return float(np.mean(scores))
    raise MetricError(f"unknown ssim mode {mode!r}")


def _log_gabor_bank(h, w):
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.hypot(fx, fy)
    radius[0, 0] = 1.0  # avoid log(0) at DC; the filter is zeroed there anyway
    theta = np.arctan2(-fy, fx)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    log_sigma = np.log(FSIM_SIGMA_ONF)
    filters = []
    for o in range(FSIM_ORIENTATIONS):
        angle = o * np.pi / FSIM_ORIENTATIONS
        # Angular distance wrapped through sin/cos keeps it in [0, pi].
        ds = sin_t * np.cos(angle) - cos_t * np.sin(angle)
        dc = cos_t * np.cos(angle) + sin_t * np.sin(angle)
        dtheta = np.abs(np.arctan2(ds, dc))
        theta_sigma = np.pi / FSIM_ORIENTATIONS / 1.3
        spread = np.exp(-(dtheta * dtheta) / (2.0 * theta_sigma * theta_sigma))
        per_scale = []
        for s in range(FSIM_SCALES):
            f0 = 1.0 / (FSIM_MIN_WAVELENGTH * FSIM_MULT ** s)
            lg = np.exp(-(np.log(radius / f0) ** 2) / (2.0 * log_sigma * log_sigma))
            lg[0, 0] = 0.0
            per_scale.append(lg * spread)
        filters.append(per_scale)
    return filters


def _phase_congruency(plane, filters):
    # Simplified congruency: energy of the summed complex responses over the
    # local amplitude sum, per orientation, accumulated across orientations.
    spectrum = np.fft.fft2(plane)
    energy = np.zeros_like(plane)
    amplitude = np.zeros_like(plane)
    for per_scale in filters:
        response_sum = np.zeros(plane.shape, dtype=complex)
        for filt in per_scale:
            response = np.fft.ifft2(spectrum * filt)
            response_sum += response
            amplitude += np.abs(response)
        energy += np.abs(response_sum)
    return energy / (amplitude + 1e-8)


def _gradient_magnitude(plane):
    gx = correlate(plane, _SCHARR_X, mode="nearest")
    gy = correlate(plane, _SCHARR_X.T, mode="nearest")
    return np.hypot(gx, gy)


def fsim(a, b):
    """Feature similarity between two images, in (0, 1].

    Combines a simplified log-Gabor phase-congruency map (4 scales, 4
    orientations) with Scharr gradient magnitudes, weighted by the pointwise
    maximum congruency.
    """
    _check_pair(a, b)
    h, w = a.data.shape[:2]
    if min(h, w) < FSIM_MIN_SIZE:
        raise MetricError(
            f"image {h}x{w} is smaller than the {FSIM_MIN_SIZE}-pixel filter support"
        )
    x = luminance(a) * 255.0
    y = luminance(b) * 255.0
    filters = _log_gabor_bank(h, w)
    pc1 = _phase_congruency(x, filters)
    pc2 = _phase_congruency(y, filters)
    g1 = _gradient_magnitude(x)
    g2 = _gradient_magnitude(y)
    s_pc = (2.0 * pc1 * pc2 + FSIM_T1) / (pc1 * pc1 + pc2 * pc2 + FSIM_T1)
    s_g = (2.0 * g1 * g2 + FSIM_T2) / (g1 * g1 + g2 * g2 + FSIM_T2)
    weight = np.maximum(pc1, pc2)
    return float(np.sum(s_pc * s_g * weight) / np.sum(weight))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB against a unit peak, capped at 99."""
    _check_pair(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse <= 0.0:
        return PSNR_MAX_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_MAX_DB))


def pearson(a, b):
    """Pearson correlation of the flattened all-channel values."""
    _check_pair(a, b)
    x = a.data.ravel()
    y = b.data.ravel()
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt(np.sum(dx * dx)))
    sy = float(np.sqrt(np.sum(dy * dy)))
    if sx == 0.0 or sy == 0.0:
        raise MetricError("correlation undefined for a zero-variance image")
    return float(np.dot(dx, dy) / (sx * sy))


def roc_auc(scores, labels):
    """ROC curve and AUC for binary labels scored higher-is-positive.

    Thresholds sweep the unique scores in descending order (plus a leading
    +inf anchor so the curve starts at the origin); tied scores step
    together. AUC is the trapezoidal area under (fpr, tpr).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise MetricError("scores and labels must have the same length")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be binary 0/1")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both classes must be present to sweep a ROC curve")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # Keep the last index of each tie group so ties step simultaneously.
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last]]
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(tuple(thresholds), tuple(tpr), tuple(fpr), auc)
