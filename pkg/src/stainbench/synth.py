"""Procedural paired histology-style images with known ground truth.

Each sample is built from two concentration fields (nuclear and stromal)
rendered through a stain matrix, so the true stain vectors, the pairing,
and the appearance shift between the two renditions are all known exactly.
The target rendition applies an in-plane rotation of the stain vectors,
per-stain concentration scaling, a mild concentration nonlinearity, a
global pixel-space gamma/gain, and optical-density noise.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .image import RasterImage
from .stains import RUIFROK_HE

DEFAULT_SIZE = 64


@dataclass(frozen=True)
class SynthParams:
    """Geometry of the synthetic tissue plus the source-to-target shift."""

    size: int = DEFAULT_SIZE
    n_nuclei: int = 18
    nucleus_radius: tuple = (2.0, 3.2)
    rotation_deg: float = 18.0
    stain_scale: tuple = (1.8, 1.3)
    conc_gamma: float = 1.05
    pix_gamma: float = 2.2
    gain: float = 0.8
    od_noise: float = 0.006

    def __post_init__(self):
        if self.size < 16:
            raise ConfigError("synthetic image size must be at least 16")
        if self.n_nuclei < 1:
            raise ConfigError("need at least one nucleus")
        lo, hi = self.nucleus_radius
        if not 0 < lo <= hi:
            raise ConfigError("nucleus radius range must be positive and ordered")
        if min(self.stain_scale) <= 0:
            raise ConfigError("stain scales must be positive")
        if self.conc_gamma <= 0 or self.pix_gamma <= 0:
            raise ConfigError("gammas must be positive")
        if not 0 < self.gain <= 1:
            raise ConfigError("gain must be in (0, 1]")
        if self.od_noise < 0:
            raise ConfigError("od noise must be non-negative")

    def identity_shift(self):
        """Same geometry, but target rendered exactly like the source."""
        return replace(self, rotation_deg=0.0, stain_scale=(1.0, 1.0),
                       conc_gamma=1.0, pix_gamma=1.0, gain=1.0, od_noise=0.0)

    def to_json(self):
        return {
            "size": self.size,
            "n_nuclei": self.n_nuclei,
            "nucleus_radius": list(self.nucleus_radius),
            "rotation_deg": self.rotation_deg,
            "stain_scale": list(self.stain_scale),
            "conc_gamma": self.conc_gamma,
            "pix_gamma": self.pix_gamma,
            "gain": self.gain,
            "od_noise": self.od_noise,
        }

    @classmethod
    def from_json(cls, obj):
        fields = dict(obj)
        for name in ("nucleus_radius", "stain_scale"):
            if name in fields:
                fields[name] = tuple(fields[name])
        return cls(**fields)


def rotate_stain_plane(matrix, deg):
    """Rotate both stain vectors by deg within the plane they span."""
    if deg == 0.0:
        return np.array(matrix, dtype=np.float64, copy=True)
    m = np.asarray(matrix, dtype=np.float64)
    h, e = m[:, 0], m[:, 1]
    u = h / np.linalg.norm(h)
    v = e - (e @ u) * u
    v = v / np.linalg.norm(v)
    th = np.radians(deg)
    ca, sa = np.cos(th), np.sin(th)

    def rot(w):
        a, b = w @ u, w @ v
        planar = (ca * a - sa * b) * u + (sa * a + ca * b) * v
        return planar + (w - a * u - b * v)

    out = np.stack([rot(h), rot(e)], axis=1)
    out = np.clip(out, 1e-6, None)
    return out / np.linalg.norm(out, axis=0, keepdims=True)


def source_matrix():
    return np.array(RUIFROK_HE, copy=True)


def target_matrix(params):
    return rotate_stain_plane(RUIFROK_HE, params.rotation_deg)


def _smooth_field(rng, size, cells, sigma):
    grid = rng.normal(0.0, 1.0, (cells, cells))
    tile = np.kron(grid, np.ones((size // cells + 1, size // cells + 1)))
    field = gaussian_filter(tile[:size, :size], sigma)
    span = np.ptp(field)
    return (field - field.min()) / (span + 1e-9)


def _concentration_fields(rng, params, n_nuclei=None, radius=None,
                          nucleus_mix=(1.0, 0.0)):
    """Nuclear and stromal concentration fields for one sample.

    nucleus_mix splits the nuclear signal between the two stains; the
    default puts it all in the first (hematoxylin-like) channel."""
    size = params.size
    n_nuclei = params.n_nuclei if n_nuclei is None else n_nuclei
    radius = params.nucleus_radius if radius is None else radius
    stroma = 0.6 * _smooth_field(rng, size, 12, 2) + 0.4 * _smooth_field(rng, size, 22, 1)
    tissue = _smooth_field(rng, size, 6, 3)
    tmask = 1.0 / (1.0 + np.exp((0.42 - tissue) * 14.0))
    yy, xx = np.mgrid[0:size, 0:size]
    nuc = np.zeros((size, size))
    for _ in range(n_nuclei):
        cy, cx = rng.uniform(0, size), rng.uniform(0, size)
        r = rng.uniform(*radius)
        nuc += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
    nucm = np.clip(nuc, 0.0, 1.0)
    dots = 1.1 * nuc * tmask
    c_h = nucleus_mix[0] * dots
    # Nuclei displace the eosinophilic background, leaving near-pure pixels.
    c_e = (0.25 + 0.65 * stroma) * tmask * (1.0 - 0.93 * nucm) + nucleus_mix[1] * dots
    return c_h, c_e


def _render(matrix, c_h, c_e, conc_gamma=1.0, scale=(1.0, 1.0),
            pix_gamma=1.0, gain=1.0, od_noise=0.0, rng=None):
    conc = np.stack([c_h, c_e], axis=-1)
    conc = np.power(np.clip(conc, 0.0, None), conc_gamma) * np.asarray(scale, dtype=np.float64)
    od = np.tensordot(conc, np.asarray(matrix).T, axes=([2], [0]))
    if od_noise > 0.0 and rng is not None:
        od = od + rng.normal(0.0, od_noise, od.shape)
    img = np.power(10.0 ** (-np.clip(od, 0.0, None)), pix_gamma) * gain
    return RasterImage(np.clip(img, 0.0, 1.0))


def render_source(params, c_h, c_e):
    return _render(source_matrix(), c_h, c_e)


def render_target(params, c_h, c_e, rng=None):
    return _render(target_matrix(params), c_h, c_e,
                   conc_gamma=params.conc_gamma, scale=params.stain_scale,
                   pix_gamma=params.pix_gamma, gain=params.gain,
                   od_noise=params.od_noise, rng=rng)


def synth_pairs(n, seed, params=None):
    """n pairs (source, target) sharing tissue structure per pair.

    Pair i depends only on (seed, i), so prefixes agree across calls with
    different n."""
    if n < 1:
        raise ConfigError("need at least one pair")
    params = params or SynthParams()
    children = np.random.SeedSequence(seed).spawn(n)
    pairs = []
    for child in children:
        rng = np.random.default_rng(child)
        c_h, c_e = _concentration_fields(rng, params)
        source = render_source(params, c_h, c_e)
        target = render_target(params, c_h, c_e, rng=rng)
        pairs.append((source, target))
    return pairs


def synth_labeled(n, seed, params=None, domain="source"):
    """Labeled patches: label 1 carries many small nuclei, label 0 few large
    ones. The count ratio compensates the radius ratio so both classes stain
    about the same total area; the separating cue is spatial grain, not
    overall darkness, and it survives colour remapping.

    domain selects the rendition: "source" uses the clean source appearance,
    "target" applies the params shift. Labels are balanced and shuffled."""
    if n < 2:
        raise ConfigError("need at least two labeled samples")
    if domain not in ("source", "target"):
        raise ConfigError(f"unknown domain {domain!r}")
    params = params or SynthParams()
    area_scale = (params.size / float(DEFAULT_SIZE)) ** 2
    base = max(3, round(params.n_nuclei * area_scale))
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    np.random.default_rng(seed).shuffle(labels)
    children = np.random.SeedSequence((seed, 1)).spawn(n)
    images = []
    for child, label in zip(children, labels):
        rng = np.random.default_rng(child)
        if label:
            fields = _concentration_fields(
                rng, params, n_nuclei=round(base * 3.45),
                radius=(1.2, 1.6))
        else:
            fields = _concentration_fields(
                rng, params, n_nuclei=base, radius=(2.2, 3.0))
        if domain == "source":
            images.append(render_source(params, *fields))
        else:
            images.append(render_target(params, *fields, rng=rng))
    return images, labels
