"""Benchmark harness: stain-transfer comparison, reference sensitivity, and
a downstream classification use case, all on synthetic paired data.

Everything is seeded, and the emitted CSV files contain no timing data, so
a rerun with the same config produces byte-identical CSV bytes. Wall-clock
numbers go to the JSON summary only.
"""

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, StainBenchError
from .gan import GanArch, GanModel, TrainConfig, apply, train
from .image import RasterImage, rgb_to_od
from .metrics import MetricResult, fsim, pearson, psnr, roc_auc, ssim
from .nn import Conv2d, Linear, Module, RMSprop, Tensor, bce_with_logits, max_pool2, relu, reshape
from .normalize import METHODS as CLASSICAL_METHODS
from .normalize import fit, transform
from .stains import ruifrok_extract, stain_vector_distance
from .synth import SynthParams, synth_labeled, synth_pairs

try:
    from importlib.metadata import version as _pkg_version

    VERSION = _pkg_version("stainbench")
except Exception:  # pragma: no cover - package metadata absent in odd installs
    VERSION = "unknown"

METRIC_FUNCS = {"ssim": ssim, "fsim": fsim, "psnr": psnr, "pearson": pearson}
BENCH_METHODS = CLASSICAL_METHODS + ("gan",)
CONTROL_METHOD = "none"


def _default_gan_train():
    # Least-squares adversarial loss with a low cycle weight trains stably at
    # this scale; 7 epochs over 256 crops is 448 generator/discriminator steps.
    return TrainConfig(lambda_cycle=3.0, gan_mode="least_squares", epochs=7)


@dataclass(frozen=True)
class BenchConfig:
    """Full description of one benchmark run; hashable for provenance."""

    n_pairs: int = 200
    seed: int = 0
    synth: SynthParams = field(default_factory=SynthParams)
    methods: tuple = BENCH_METHODS
    metrics: tuple = ("ssim", "fsim", "psnr", "pearson")
    reference_index: int = 0
    threads: int = 1
    gan_arch: GanArch = field(default_factory=GanArch)
    gan_train: TrainConfig = field(default_factory=_default_gan_train)
    gan_crops: int = 256
    gan_crop_size: int = 32
    gan_tile: int = 64
    gan_overlap: int = 8

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ConfigError("need at least two pairs")
        if not self.methods:
            raise ConfigError("need at least one method")
        for m in self.methods:
            if m not in BENCH_METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate method")
        if not self.metrics:
            raise ConfigError("need at least one metric")
        for m in self.metrics:
            if m not in METRIC_FUNCS:
                raise ConfigError(f"unknown metric {m!r}")
        if not 0 <= self.reference_index < self.n_pairs:
            raise ConfigError("reference_index out of range")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.gan_crops < self.gan_train.batch:
            raise ConfigError("gan_crops smaller than one batch")
        if not 0 < self.gan_crop_size <= self.synth.size:
            raise ConfigError("gan_crop_size must fit inside the images")

    def to_json(self):
        return {
            "n_pairs": self.n_pairs,
            "seed": self.seed,
            "synth": self.synth.to_json(),
            "methods": list(self.methods),
            "metrics": list(self.metrics),
            "reference_index": self.reference_index,
            "threads": self.threads,
            "gan_arch": self.gan_arch.to_json(),
            "gan_train": self.gan_train.to_json(),
            "gan_crops": self.gan_crops,
            "gan_crop_size": self.gan_crop_size,
            "gan_tile": self.gan_tile,
            "gan_overlap": self.gan_overlap,
        }

    @classmethod
    def from_json(cls, obj):
        fields = dict(obj)
        if "synth" in fields:
            fields["synth"] = SynthParams.from_json(fields["synth"])
        if "gan_arch" in fields:
            fields["gan_arch"] = GanArch.from_json(fields["gan_arch"])
        if "gan_train" in fields:
            fields["gan_train"] = TrainConfig.from_json(fields["gan_train"])
        for name in ("methods", "metrics"):
            if name in fields:
                fields[name] = tuple(fields[name])
        return cls(**fields)

    def config_hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class MethodRow:
    """One benchmark table row; exactly one of metrics/error is populated."""

    method: str
    reference_based: bool
    metrics: dict = None
    stain_distance: tuple = None
    seconds: float = 0.0
    error: str = None

    def __post_init__(self):
        if (self.metrics is None) == (self.error is None):
            raise ConfigError("row must carry either results or an error")
        if self.error is None and self.seconds <= 0:
            raise ConfigError("successful rows must record positive wall time")


@dataclass(frozen=True)
class BenchReport:
    config_hash: str
    seed: int
    version: str
    metric_names: tuple
    rows: tuple

    def __post_init__(self):
        names = [r.method for r in self.rows]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate method row")
        if CONTROL_METHOD not in names:
            raise ConfigError("missing un-normalized control row")

    def row(self, method):
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def _map_images(fn, items, threads):
    """Order-preserving map; per-image work is independent, so the thread
    count never changes the results, only the wall time."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _metric_results(outputs, targets, metric_names, threads):
    results = {}
    for name in metric_names:
        fn = METRIC_FUNCS[name]
        values = _map_images(lambda pair: fn(pair[0], pair[1]),
                             list(zip(outputs, targets)), threads)
        results[name] = MetricResult.from_values(name, values)
    return results


def _stain_distances(outputs, targets, threads):
    """Mean (d_h, d_e) between ruifrok-extracted vectors of output and target."""

    def one(pair):
        out, tgt = pair
        mo = ruifrok_extract(rgb_to_od(out))
        mt = ruifrok_extract(rgb_to_od(tgt))
        return stain_vector_distance(mo, mt)

    dists = _map_images(one, list(zip(outputs, targets)), threads)
    arr = np.asarray(dists, dtype=np.float64)
    return (float(arr[:, 0].mean()), float(arr[:, 1].mean()))


def _crop_set(images, n, size, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        img = images[int(rng.integers(len(images)))]
        h, w = img.data.shape[:2]
        y = int(rng.integers(h - size + 1))
        x = int(rng.integers(w - size + 1))
        out.append(RasterImage(img.data[y : y + size, x : x + size].copy()))
    return out


def train_bench_gan(cfg, sources, targets, log_path=None):
    """Train the desk-scale stain-transfer GAN on seeded crops drawn from
    the two unpaired domains; apply() then maps source appearance onto the
    target appearance."""
    data_a = _crop_set(sources, cfg.gan_crops, cfg.gan_crop_size, cfg.seed * 31 + 5)
    data_h = _crop_set(targets, cfg.gan_crops, cfg.gan_crop_size, cfg.seed * 31 + 6)
    model = GanModel(cfg.gan_arch, seed=cfg.gan_train.seed)
    train(model, cfg.gan_train, data_a, data_h, log_path=log_path)
    return model


def run_transfer_benchmark(cfg, gan_model=None, gan_log_path=None):
    """Normalize every source toward the reference/target appearance with
    each configured method and score the outputs against the paired ground
    truth. Per-method failures are recorded as rows, not raised."""
    pairs = synth_pairs(cfg.n_pairs, cfg.seed, cfg.synth)
    sources = [p[0] for p in pairs]
    targets = [p[1] for p in pairs]
    reference = targets[cfg.reference_index]

    rows = []
    start = time.perf_counter()
    control_metrics = _metric_results(sources, targets, cfg.metrics, cfg.threads)
    control_dist = _stain_distances(sources, targets, cfg.threads)
    rows.append(MethodRow(CONTROL_METHOD, False, metrics=control_metrics,
                          stain_distance=control_dist,
                          seconds=time.perf_counter() - start))

    for method in cfg.methods:
        start = time.perf_counter()
        try:
            if method == "gan":
                model = gan_model or train_bench_gan(cfg, sources, targets,
                                                     log_path=gan_log_path)
                outputs = _map_images(
                    lambda s: apply(model, s, tile=cfg.gan_tile, overlap=cfg.gan_overlap),
                    sources, cfg.threads)
                reference_based = False
            else:
                fitted = fit(method, reference, {"seed": cfg.seed})
                outputs = _map_images(lambda s: transform(fitted, s), sources, cfg.threads)
                reference_based = True
            rows.append(MethodRow(
                method, reference_based,
                metrics=_metric_results(outputs, targets, cfg.metrics, cfg.threads),
                stain_distance=_stain_distances(outputs, targets, cfg.threads),
                seconds=time.perf_counter() - start))
        except StainBenchError as exc:
            rows.append(MethodRow(method, method != "gan", error=str(exc),
                                  seconds=time.perf_counter() - start))
    return BenchReport(cfg.config_hash(), cfg.seed, VERSION, tuple(cfg.metrics),
                       tuple(rows))


def _mix_shift(params, f):
    """Scale the appearance shift by factor f; f=1 reproduces it exactly."""
    return replace(
        params,
        rotation_deg=params.rotation_deg * f,
        stain_scale=tuple(1.0 + (s - 1.0) * f for s in params.stain_scale),
        conc_gamma=1.0 + (params.conc_gamma - 1.0) * f,
        pix_gamma=1.0 + (params.pix_gamma - 1.0) * f,
        gain=1.0 - (1.0 - params.gain) * f,
    )


def sensitivity_references(cfg, factors=(0.5, 1.0, 1.5)):
    """Deliberately different-looking references: the designated reference
    structure rendered under weaker and stronger appearance shifts."""
    refs = []
    for f in factors:
        variant = _mix_shift(cfg.synth, f)
        pair = synth_pairs(cfg.reference_index + 1, cfg.seed, variant)[cfg.reference_index]
        refs.append(pair[1])
    return refs


@dataclass(frozen=True)
class RefSensitivityResult:
    config_hash: str
    seed: int
    per_method: dict  # method -> list of (ref_label, MetricResult or error str)
    spread: dict  # method -> across-reference std of mean SSIM
    gan_reference_free: bool


def run_reference_sensitivity(cfg, refs):
    """Refit each classical method against every candidate reference and
    measure how the mean SSIM moves. The GAN takes no reference at all, so
    it contributes a structural marker instead of a distribution."""
    if len(refs) < 2:
        raise ConfigError("need at least two reference images")
    pairs = synth_pairs(cfg.n_pairs, cfg.seed, cfg.synth)
    sources = [p[0] for p in pairs]
    targets = [p[1] for p in pairs]
    classical = [m for m in cfg.methods if m != "gan"]
    per_method = {}
    spread = {}
    for method in classical:
        entries = []
        means = []
        for i, ref in enumerate(refs):
            label = f"ref{i}"
            try:
                fitted = fit(method, ref, {"seed": cfg.seed})
                outputs = _map_images(lambda s: transform(fitted, s), sources, cfg.threads)
                values = _map_images(lambda p: ssim(p[0], p[1]),
                                     list(zip(outputs, targets)), cfg.threads)
                result = MetricResult.from_values("ssim", values)
                means.append(result.mean)
                entries.append((label, result))
            except StainBenchError as exc:
                entries.append((label, str(exc)))
        per_method[method] = entries
        spread[method] = float(np.std(means)) if len(means) >= 2 else float("nan")
    return RefSensitivityResult(cfg.config_hash(), cfg.seed, per_method, spread,
                                gan_reference_free="gan" in cfg.methods)


# -- downstream use case -------------------------------------------------------


class PatchClassifier(Module):
    """Three conv+relu+pool stages and a linear read-out to one logit.

    No normalization layers, so weights need fan-in scaled init to keep the
    signal alive through the stack."""

    def __init__(self, patch=32, rng=None):
        rng = rng or np.random.default_rng(0)

        def he(fan_in):
            return float(np.sqrt(2.0 / fan_in))

        self.c1 = Conv2d(3, 8, 3, stride=1, pad=1, rng=rng, init_std=he(3 * 9))
        self.c2 = Conv2d(8, 16, 3, stride=1, pad=1, rng=rng, init_std=he(8 * 9))
        self.c3 = Conv2d(16, 32, 3, stride=1, pad=1, rng=rng, init_std=he(16 * 9))
        side = patch // 8
        if side < 1:
            raise ConfigError("patch too small for three pooling stages")
        n_in = 32 * side * side
        self.fc = Linear(n_in, 1, rng=rng, init_std=he(n_in))

    def __call__(self, x):
        for conv in (self.c1, self.c2, self.c3):
            x = max_pool2(relu(conv(x)))
        n = x.data.shape[0]
        return reshape(self.fc(reshape(x, (n, -1))), (n,))


def _to_batch(images):
    return np.stack([img.data.transpose(2, 0, 1) for img in images]).astype(np.float32)


def train_classifier(images, labels, seed, epochs=8, batch=16, lr=1e-3):
    rng = np.random.default_rng(seed)
    clf = PatchClassifier(patch=images[0].data.shape[0], rng=rng)
    opt = RMSprop(clf.parameters(), lr=lr)
    data = _to_batch(images)
    y = np.asarray(labels, dtype=np.float32)
    order_rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        order = order_rng.permutation(len(data))
        for s in range(len(data) // batch):
            sel = order[s * batch : (s + 1) * batch]
            logits = clf(Tensor(data[sel]))
            loss = bce_with_logits(logits, Tensor(y[sel]))
            loss.backward()
            opt.step()
    return clf


def classifier_scores(clf, images):
    data = _to_batch(images)
    out = []
    for i in range(0, len(data), 32):
        out.append(clf(Tensor(data[i : i + 32])).data)
    return np.concatenate(out).astype(np.float64)


@dataclass(frozen=True)
class UsecaseResult:
    config_hash: str
    seeds: tuple
    auc_raw: dict  # seed -> float
    auc_per_method: dict  # method -> seed -> float
    curves: dict  # (label, seed) -> RocCurve


def run_usecase(cfg, seeds=(0, 1, 2), methods=("macenko", "gan"),
                n_train=240, n_test=120, patch=32,
                shift_stain_scale=(0.4, 1.3)):
    """Train the patch classifier on clean source-domain data, then compare
    its AUC on shift-affected test patches before and after normalization
    back toward the source appearance.

    The labels are a spatial-grain contrast with matched stained area, so
    the shift has to disrupt the classifier through appearance alone. The
    default test-domain shift fades hematoxylin while boosting eosin;
    washed-out nuclei hurt a structure-reading classifier where uniform
    darkening would not. Pass shift_stain_scale=None to keep the stain
    scaling from cfg.synth (for example for a no-shift control)."""
    for m in methods:
        if m not in BENCH_METHODS:
            raise ConfigError(f"unknown method {m!r}")
    fields = dict(cfg.synth.to_json())
    fields["size"] = patch
    if shift_stain_scale is not None:
        fields["stain_scale"] = [float(v) for v in shift_stain_scale]
    params = SynthParams.from_json(fields)
    auc_raw = {}
    auc_per_method = {m: {} for m in methods}
    curves = {}
    for seed in seeds:
        mix = np.random.SeedSequence([cfg.seed, seed]).generate_state(4)
        train_imgs, train_labels = synth_labeled(n_train, int(mix[0]), params, "source")
        test_imgs, test_labels = synth_labeled(n_test, int(mix[1]), params, "target")
        clf = train_classifier(train_imgs, train_labels, int(mix[2]))

        raw_curve = roc_auc(classifier_scores(clf, test_imgs), test_labels)
        auc_raw[seed] = raw_curve.auc
        curves[("raw", seed)] = raw_curve

        gan_model = None
        if "gan" in methods:
            # Unlabeled pools for adversarial training; apply() must map the
            # shifted appearance back onto the source appearance.
            pool = synth_pairs(max(2, cfg.n_pairs // 2), int(mix[3]), params)
            gan_model = train_bench_gan(
                cfg, [p[1] for p in pool], [p[0] for p in pool])
        for method in methods:
            if method == "gan":
                outputs = _map_images(
                    lambda s: apply(gan_model, s, tile=patch, overlap=0),
                    test_imgs, cfg.threads)
            else:
                fitted = fit(method, train_imgs[0], {"seed": cfg.seed})
                outputs = _map_images(lambda s: transform(fitted, s),
                                      test_imgs, cfg.threads)
            curve = roc_auc(classifier_scores(clf, outputs), test_labels)
            auc_per_method[method][seed] = curve.auc
            curves[(method, seed)] = curve
    return UsecaseResult(cfg.config_hash(), tuple(seeds), auc_raw,
                         auc_per_method, curves)


# -- report emission -----------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def emit_report(report, out_dir):
    """Write metrics.csv, stain_distances.csv, boxplot.csv, summary.json.

    The CSVs carry no timings, so identical runs emit identical bytes;
    wall-clock seconds live in the JSON summary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["metrics"] = out / "metrics.csv"
    with open(paths["metrics"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "mean", "std", "n"])
        for row in report.rows:
            if row.error is not None:
                continue
            for name in report.metric_names:
                r = row.metrics[name]
                w.writerow([row.method, name, _fmt(r.mean), _fmt(r.std),
                            len(r.per_image)])

    paths["stain_distances"] = out / "stain_distances.csv"
    with open(paths["stain_distances"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "d_h", "d_e"])
        for row in report.rows:
            if row.error is None:
                w.writerow([row.method, _fmt(row.stain_distance[0]),
                            _fmt(row.stain_distance[1])])

    paths["boxplot"] = out / "boxplot.csv"
    with open(paths["boxplot"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "min", "q1", "median", "q3", "max"])
        for row in report.rows:
            if row.error is not None:
                continue
            for name in report.metric_names:
                vals = np.asarray(row.metrics[name].per_image)
                qs = np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])
                w.writerow([row.method, name] + [_fmt(q) for q in qs])

    paths["summary"] = out / "summary.json"
    summary = {
        "config_hash": report.config_hash,
        "seed": report.seed,
        "version": report.version,
        "rows": [
            {
                "method": row.method,
                "reference_based": row.reference_based,
                "seconds": row.seconds,
                "error": row.error,
                "means": None if row.error else {
                    name: row.metrics[name].mean for name in report.metric_names
                },
            }
            for row in report.rows
        ],
    }
    with open(paths["summary"], "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return paths


def emit_ref_sensitivity(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "ref_sensitivity.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "reference", "mean_ssim", "std_ssim",
                    "min", "q1", "median", "q3", "max"])
        for method in sorted(result.per_method):
            for label, entry in result.per_method[method]:
                if isinstance(entry, str):
                    continue
                vals = np.asarray(entry.per_image)
                qs = np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])
                w.writerow([method, label, _fmt(entry.mean), _fmt(entry.std)]
                           + [_fmt(q) for q in qs])
    json_path = out / "ref_sensitivity.json"
    payload = {
        "config_hash": result.config_hash,
        "seed": result.seed,
        "spread": {m: result.spread[m] for m in sorted(result.spread)},
        "gan_reference_free": result.gan_reference_free,
        "errors": {
            m: [label for label, entry in rows if isinstance(entry, str)]
            for m, rows in result.per_method.items()
        },
    }
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return {"csv": csv_path, "json": json_path}


def emit_usecase(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    roc_path = out / "roc_points.csv"
    with open(roc_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "threshold", "fpr", "tpr"])
        for (label, seed) in sorted(result.curves, key=lambda k: (k[0], k[1])):
            curve = result.curves[(label, seed)]
            for t, fp, tp in zip(curve.thresholds, curve.fpr, curve.tpr):
                w.writerow([label, seed, _fmt(t), _fmt(fp), _fmt(tp)])
    json_path = out / "usecase.json"
    payload = {
        "config_hash": result.config_hash,
        "seeds": list(result.seeds),
        "auc_raw": {str(k): v for k, v in result.auc_raw.items()},
        "auc_per_method": {
            m: {str(k): v for k, v in by_seed.items()}
            for m, by_seed in result.auc_per_method.items()
        },
    }
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return {"roc": roc_path, "json": json_path}


def load_metrics_csv(path):
    """Parse an emitted metrics.csv back into {method: {metric: (mean, std, n)}}."""
    table = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            table.setdefault(rec["method"], {})[rec["metric"]] = (
                float(rec["mean"]), float(rec["std"]), int(rec["n"]))
    return table
