"""Reference-based stain normalizers: Reinhard, Macenko, Vahadane, Khan.

All four share one contract: fit() captures the appearance of a reference
image, transform() remaps a source image toward it. Reinhard matches Lab
channel statistics; Macenko and Vahadane re-express estimated stain
concentrations in the reference stain basis; the simplified Khan classifies
pixels into stain classes in the chroma plane and quantile-maps each stain's
concentrations onto the reference distribution.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NormalizerFitError, NormalizerTransformError, StainBenchError
from .image import (OdImage, RasterImage, lab_to_rgb, od_to_rgb, otsu_mask,
                    rgb_to_lab, rgb_to_od)
from .stains import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    RUIFROK_HE,
    StainMatrix,
    _clean_direction,
    _order_h_first,
    macenko_estimate,
    ruifrok_separate,
    vahadane_estimate,
)

METHODS = ("reinhard", "macenko", "vahadane", "khan")
NORMALIZER_FORMAT = "stainbench-normalizer/1"
MIN_TISSUE_FRACTION = 0.01
KHAN_KNOTS = 33
KHAN_KMEANS_ITERS = 30
KHAN_MIN_CLASS_PIXELS = 50


def _default_params():
    return {
        "beta": DEFAULT_BETA,
        "alpha": DEFAULT_ALPHA,
        "sparsity": 0.1,
        "n_iters": 50,
        "seed": 0,
    }


@dataclass(frozen=True)
class NormalizerModel:
    """Fitted reference appearance for one normalization method."""

    method: str
    params: dict = field(default_factory=_default_params)
    lab_means: np.ndarray = None
    lab_stds: np.ndarray = None
    ref_stains: StainMatrix = None
    khan_centroids: np.ndarray = None
    khan_labels: tuple = None
    khan_tables: np.ndarray = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise NormalizerFitError(f"unknown method {self.method!r}")
        need = {
            "reinhard": ("lab_means", "lab_stds"),
            "macenko": ("ref_stains",),
            "vahadane": ("ref_stains",),
            "khan": ("ref_stains", "khan_centroids", "khan_labels", "khan_tables"),
        }[self.method]
        for name in need:
            if getattr(self, name) is None:
                raise NormalizerFitError(f"{self.method} model missing {name}")
        allowed = set(need) | {"method", "params"}
        for name in ("lab_means", "lab_stds", "ref_stains", "khan_centroids",
                     "khan_labels", "khan_tables"):
            if name not in allowed and getattr(self, name) is not None:
                raise NormalizerFitError(f"{self.method} model must not carry {name}")
        if self.method == "reinhard":
            stds = np.asarray(self.lab_stds, dtype=np.float64)
            if stds.min() <= 0:
                raise NormalizerFitError("reference Lab stds must be positive")
        if self.method == "khan":
            tables = np.asarray(self.khan_tables, dtype=np.float64)
            if tables.shape != (2, KHAN_KNOTS):
                raise NormalizerFitError("khan mapping tables must be 2 x knots")
            if np.any(np.diff(tables, axis=1) <= 0):
                raise NormalizerFitError("khan mapping tables must be strictly monotone")

    def to_json(self):
        obj = {"format": NORMALIZER_FORMAT, "method": self.method,
               "params": dict(self.params)}
        if self.method == "reinhard":
            obj["lab_means"] = np.asarray(self.lab_means).tolist()
            obj["lab_stds"] = np.asarray(self.lab_stds).tolist()
        else:
            obj["ref_stains"] = self.ref_stains.to_json()
        if self.method == "khan":
            obj["khan_centroids"] = np.asarray(self.khan_centroids).tolist()
            obj["khan_labels"] = list(self.khan_labels)
            obj["khan_tables"] = np.asarray(self.khan_tables).tolist()
        return obj

    @classmethod
    def from_json(cls, obj):
        if obj.get("format") != NORMALIZER_FORMAT:
            raise NormalizerFitError(f"unknown normalizer format {obj.get('format')!r}")
        method = obj["method"]
        kwargs = {"method": method, "params": dict(obj.get("params", {}))}
        if method == "reinhard":
            kwargs["lab_means"] = np.array(obj["lab_means"])
            kwargs["lab_stds"] = np.array(obj["lab_stds"])
        else:
            kwargs["ref_stains"] = StainMatrix.from_json(obj["ref_stains"])
        if method == "khan":
            kwargs["khan_centroids"] = np.array(obj["khan_centroids"])
            kwargs["khan_labels"] = tuple(obj["khan_labels"])
            kwargs["khan_tables"] = np.array(obj["khan_tables"])
        return cls(**kwargs)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def _require_tissue(img):
    mask = otsu_mask(img)
    frac = float(mask.data.mean())
    if frac < MIN_TISSUE_FRACTION:
        raise NormalizerFitError(
            f"reference has {frac:.1%} tissue; need at least {MIN_TISSUE_FRACTION:.0%}"
        )
    return mask


def _kmeans(points, iters, init):
    # Plain Lloyd iterations from the supplied starting centroids.
    centroids = np.array(init, dtype=np.float64, copy=True)
    k = len(centroids)
    labels = np.zeros(points.shape[0], dtype=np.int64)
    for _ in range(iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return centroids, labels


def _strictify(table):
    # Quantile tables may plateau; nudge them strictly increasing.
    out = np.maximum.accumulate(np.asarray(table, dtype=np.float64))
    out += np.arange(out.size) * 1e-9
    return out


# Orthonormal basis of the plane perpendicular to the gray (equal-absorbance)
# axis; OD direction projected here is invariant to exposure gamma and gain.
_CHROMA_B1 = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
_CHROMA_B2 = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)


def _od_chroma(px):
    unit = px / np.maximum(np.linalg.norm(px, axis=1, keepdims=True), 1e-9)
    return np.stack([unit @ _CHROMA_B1, unit @ _CHROMA_B2], axis=1)


def _khan_classes(img, init=None):
    """3-class k-means in the absorbance chroma plane: H-dominant,
    E-dominant, background. Returns centroids, the class-role assignment
    (h, e, bg indices), and the per-pixel labels.

    Fresh runs start Lloyd iterations from canonical anchors (the two dye
    hues plus the achromatic point); random starts fall into the wrong modes
    on references with little true background."""
    od = rgb_to_od(img).pixels()
    chroma = _od_chroma(od)
    if init is None:
        init = np.vstack([_od_chroma(RUIFROK_HE.T), [[0.0, 0.0]]])
    centroids, labels = _kmeans(chroma, KHAN_KMEANS_ITERS, init)
    norms = np.linalg.norm(od, axis=1)
    mean_norm = np.array([
        norms[labels == j].mean() if np.any(labels == j) else np.inf for j in range(3)
    ])
    # The faintest class in absorbance is the unstained background.
    bg = int(mean_norm.argmin())
    rest = [j for j in range(3) if j != bg]
    shares = []
    for j in rest:
        sel = labels == j
        mean_od = od[sel].mean(axis=0) if np.any(sel) else np.zeros(3)
        total = mean_od.sum()
        shares.append(mean_od[0] / total if total > 0 else 0.0)
    # Hematoxylin absorbs red most strongly: larger first-channel OD share.
    h_cls, e_cls = (rest[0], rest[1]) if shares[0] >= shares[1] else (rest[1], rest[0])
    return centroids, (h_cls, e_cls, bg), labels


def _class_stain_matrix(img, labels, roles, fallback=None, beta=DEFAULT_BETA):
    """Per-class stain directions as the stain matrix; classes too small
    fall back to the supplied reference vectors.

    Class members near nuclear/stromal boundaries carry heavy stain
    mixtures, so the direction is averaged over the purest quartile of
    each class, purity judged by the stain share under a fixed provisional
    separation."""
    od = rgb_to_od(img)
    px = od.pixels()
    provisional = StainMatrix(RUIFROK_HE[:, 0], RUIFROK_HE[:, 1], np.ones(2))
    conc = ruifrok_separate(od, provisional).stacked()
    h_share = conc[0] / np.maximum(conc[0] + conc[1], 1e-9)
    stained = np.linalg.norm(px, axis=1) > beta
    h_cls, e_cls, _ = roles
    vectors = []
    for cls, which in ((h_cls, 0), (e_cls, 1)):
        sel = (labels == cls) & stained
        if sel.sum() >= KHAN_MIN_CLASS_PIXELS:
            share = h_share[sel] if which == 0 else 1.0 - h_share[sel]
            pure = share >= np.quantile(share, 0.75)
            v = px[sel][pure].mean(axis=0)
        elif fallback is not None:
            v = (fallback.h_vector, fallback.e_vector)[which]
        else:
            raise NormalizerFitError("stain class too small to estimate a vector")
        vectors.append(_clean_direction(np.asarray(v, dtype=np.float64)))
    h, e = _order_h_first(vectors[0], vectors[1])
    estimated = StainMatrix(h, e, np.ones(2))
    stacked = ruifrok_separate(od, estimated).stacked()
    if stained.sum() >= KHAN_MIN_CLASS_PIXELS:
        stacked = stacked[:, stained]
    max_c = np.maximum(np.percentile(stacked, 99, axis=1), 1e-6)
    return StainMatrix(h, e, max_c)


def fit(method, reference, config=None):
    """Fit a NormalizerModel capturing the reference image's appearance."""
    params = _default_params()
    params.update(config or {})
    mask = _require_tissue(reference)
    if method == "reinhard":
        lab = rgb_to_lab(reference).reshape(-1, 3)
        means = lab.mean(axis=0)
        stds = lab.std(axis=0)
        if stds.min() <= 1e-12:
            raise NormalizerFitError("reference Lab channel has zero spread")
        return NormalizerModel("reinhard", params, lab_means=means, lab_stds=stds)
    if method == "macenko":
        stains = macenko_estimate(rgb_to_od(reference), params["beta"], params["alpha"])
        return NormalizerModel("macenko", params, ref_stains=stains)
    if method == "vahadane":
        stains = vahadane_estimate(
            rgb_to_od(reference), params["sparsity"], params["n_iters"],
            params["seed"], params["beta"],
        )
        return NormalizerModel("vahadane", params, ref_stains=stains)
    if method == "khan":
        centroids, roles, labels = _khan_classes(reference)
        stains = _class_stain_matrix(reference, labels, roles, beta=params["beta"])
        conc = ruifrok_separate(rgb_to_od(reference), stains)
        tissue = mask.data.ravel() > 0.5
        knots = np.linspace(0.0, 100.0, KHAN_KNOTS)
        stacked = conc.stacked()
        tables = np.stack([
            _strictify(np.percentile(stacked[j][tissue], knots)) for j in (0, 1)
        ])
        return NormalizerModel(
            "khan", params, ref_stains=stains, khan_centroids=centroids,
            khan_labels=roles, khan_tables=tables,
        )
    raise NormalizerFitError(f"unknown method {method!r}")


def _transform_reinhard(model, source):
    lab = rgb_to_lab(source)
    flat = lab.reshape(-1, 3)
    means = flat.mean(axis=0)
    stds = flat.std(axis=0)
    out = np.empty_like(flat)
    for ch in range(3):
        if stds[ch] <= 1e-12:
            out[:, ch] = model.lab_means[ch]
        else:
            scale = model.lab_stds[ch] / stds[ch]
            out[:, ch] = (flat[:, ch] - means[ch]) * scale + model.lab_means[ch]
    return lab_to_rgb(out.reshape(lab.shape))


def _estimate_like(model, od):
    p = model.params
    if model.method == "macenko":
        return macenko_estimate(od, p["beta"], p["alpha"])
    return vahadane_estimate(od, p["sparsity"], p["n_iters"], p["seed"], p["beta"])


def _transform_stain_basis(model, source):
    od = rgb_to_od(source)
    src_stains = _estimate_like(model, od)
    conc = ruifrok_separate(od, src_stains)
    scale = model.ref_stains.max_concentrations / src_stains.max_concentrations
    c = conc.stacked() * scale[:, None]
    od_out = (model.ref_stains.matrix() @ c).T.reshape(od.od.shape)
    return od_to_rgb(OdImage(np.maximum(od_out, 0.0)))


def _transform_khan(model, source):
    od = rgb_to_od(source)
    # Re-cluster the source, warm-started from the reference centroids: the
    # source hues may sit far from the reference ones, so classifying against
    # frozen centroids would mislabel whole stain classes.
    _, roles, labels = _khan_classes(source, init=model.khan_centroids)
    src_stains = _class_stain_matrix(
        source, labels, roles, fallback=model.ref_stains,
        beta=model.params["beta"],
    )
    conc = ruifrok_separate(od, src_stains)
    stacked = conc.stacked()
    tissue = otsu_mask(source).data.ravel() > 0.5
    knots = np.linspace(0.0, 100.0, KHAN_KNOTS)
    mapped = stacked.copy()
    for j in (0, 1):
        vals = stacked[j][tissue]
        if vals.size == 0:
            continue
        src_table = _strictify(np.percentile(vals, knots))
        mapped[j][tissue] = np.interp(stacked[j][tissue], src_table, model.khan_tables[j])
    od_out = (model.ref_stains.matrix() @ mapped).T.reshape(od.od.shape)
    out = od_to_rgb(OdImage(np.maximum(od_out, 0.0))).data.copy()
    # Background keeps its original appearance.
    keep = ~tissue.reshape(source.data.shape[:2])
    out[keep] = source.data[keep]
    return RasterImage(out)


def transform(model, source):
    """Normalize a source image toward the model's reference appearance."""
    if source.channels != 3:
        raise NormalizerTransformError(model.method, "source must be 3-channel")
    try:
        if model.method == "reinhard":
            return _transform_reinhard(model, source)
        if model.method in ("macenko", "vahadane"):
            return _transform_stain_basis(model, source)
        return _transform_khan(model, source)
    except NormalizerTransformError:
        raise
    except StainBenchError as exc:
        raise NormalizerTransformError(model.method, str(exc)) from exc
