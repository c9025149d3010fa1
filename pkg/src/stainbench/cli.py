"""Command-line entry points.

Commands: synth, fit, normalize, deconvolve, metrics, train-gan, apply-gan,
bench, ref-sensitivity, usecase. Exit codes: 0 success, 1 usage error,
2 computation error. File formats are documented in the README.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .bench import (
    BenchConfig,
    METRIC_FUNCS,
    emit_ref_sensitivity,
    emit_report,
    emit_usecase,
    run_reference_sensitivity,
    run_transfer_benchmark,
    run_usecase,
    sensitivity_references,
    train_bench_gan,
)
from .errors import ConfigError, StainBenchError
from .gan import GanArch, GanModel, TrainConfig, apply, train
from .image import rgb_to_od
from .io import read_image, write_image
from .normalize import METHODS, NormalizerModel, fit, transform
from .stains import StainMatrix, macenko_estimate, ruifrok_separate, vahadane_estimate
from .synth import SynthParams, synth_pairs


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage problems; the documented contract is 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bench_config(args):
    obj = _load_config(args.config)
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.threads is not None:
        obj["threads"] = args.threads
    return BenchConfig.from_json(obj)


def _cmd_synth(args):
    obj = _load_config(args.config)
    params = SynthParams.from_json(obj.get("synth", obj)) if obj else SynthParams()
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args)
    pairs = synth_pairs(args.n, seed, params)
    for i, (src, tgt) in enumerate(pairs):
        write_image(out / f"source_{i:04d}.png", src)
        write_image(out / f"target_{i:04d}.png", tgt)
    manifest = {"n": args.n, "seed": seed, "params": params.to_json()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {2 * len(pairs)} images to {out}")
    return 0


def _cmd_fit(args):
    reference = read_image(args.reference)
    config = _load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    model = fit(args.method, reference, config)
    model.save(args.out)
    print(f"fitted {args.method} model -> {args.out}")
    return 0


def _cmd_normalize(args):
    model = NormalizerModel.load(args.model)
    out = _out_dir(args)
    for path in args.images:
        img = read_image(path)
        result = transform(model, img)
        dest = out / Path(path).name
        write_image(dest, result)
        print(f"{path} -> {dest}")
    return 0


def _cmd_deconvolve(args):
    img = read_image(args.image)
    od = rgb_to_od(img)
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    if args.stains:
        stains = StainMatrix.load(args.stains)
    elif args.estimator == "macenko":
        stains = macenko_estimate(od)
    else:
        stains = vahadane_estimate(od, seed=seed)
    conc = ruifrok_separate(od, stains)
    out = _out_dir(args)
    stains.save(out / "stains.json")
    np.savez(out / "concentrations.npz", h=conc.h, e=conc.e)
    print(f"stain matrix and concentrations -> {out}")
    return 0


def _cmd_metrics(args):
    a = read_image(args.image_a)
    b = read_image(args.image_b)
    names = args.metrics.split(",") if args.metrics else list(METRIC_FUNCS)
    values = {}
    for name in names:
        if name not in METRIC_FUNCS:
            raise ConfigError(f"unknown metric {name!r}")
        values[name] = METRIC_FUNCS[name](a, b)
    print(json.dumps(values, indent=2))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for name in names:
                w.writerow([name, repr(values[name])])
    return 0


def _load_image_dir(path):
    files = sorted(p for p in Path(path).iterdir()
                   if p.suffix.lower() in (".png", ".ppm"))
    if not files:
        raise ConfigError(f"no .png/.ppm images in {path}")
    return [read_image(p) for p in files]


def _cmd_train_gan(args):
    obj = _load_config(args.config)
    arch = GanArch.from_json(obj.get("arch", {}))
    train_cfg = TrainConfig.from_json(obj.get("train", {}))
    if args.seed is not None:
        train_cfg = TrainConfig.from_json({**train_cfg.to_json(), "seed": args.seed})
    out = _out_dir(args)
    if args.data_a and args.data_h:
        data_a = _load_image_dir(args.data_a)
        data_h = _load_image_dir(args.data_h)
        model = GanModel(arch, seed=train_cfg.seed)
        train(model, train_cfg, data_a, data_h, log_path=out / "train_log.csv")
    else:
        bench_obj = dict(obj.get("bench", {}))
        bench_obj.setdefault("gan_arch", arch.to_json())
        bench_obj.setdefault("gan_train", train_cfg.to_json())
        if args.seed is not None:
            bench_obj["seed"] = args.seed
        cfg = BenchConfig.from_json(bench_obj)
        pairs = synth_pairs(cfg.n_pairs, cfg.seed, cfg.synth)
        model = train_bench_gan(cfg, [p[0] for p in pairs], [p[1] for p in pairs],
                                log_path=out / "train_log.csv")
    ckpt = out / "checkpoint.npz"
    model.save(ckpt)
    print(f"checkpoint -> {ckpt}")
    return 0


def _cmd_apply_gan(args):
    model = GanModel.load(args.checkpoint)
    img = read_image(args.image)
    result = apply(model, img, tile=args.tile, overlap=args.overlap)
    write_image(args.out, result)
    print(f"{args.image} -> {args.out}")
    return 0


def _cmd_bench(args):
    cfg = _bench_config(args)
    out = _out_dir(args)
    report = run_transfer_benchmark(cfg, gan_log_path=out / "gan_train_log.csv")
    paths = emit_report(report, out)
    for row in report.rows:
        if row.error is not None:
            print(f"{row.method}: FAILED ({row.error})")
        else:
            means = ", ".join(
                f"{name}={row.metrics[name].mean:.4f}" for name in report.metric_names)
            print(f"{row.method}: {means}")
    print(f"report -> {paths['summary']}")
    return 0


def _cmd_ref_sensitivity(args):
    cfg = _bench_config(args)
    refs = sensitivity_references(cfg)
    result = run_reference_sensitivity(cfg, refs)
    paths = emit_ref_sensitivity(result, _out_dir(args))
    for method in sorted(result.spread):
        print(f"{method}: across-reference std of mean ssim = {result.spread[method]:.6f}")
    if result.gan_reference_free:
        print("gan: reference-free (no per-reference variation)")
    print(f"report -> {paths['json']}")
    return 0


def _cmd_usecase(args):
    cfg = _bench_config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = run_usecase(cfg, seeds=seeds)
    paths = emit_usecase(result, _out_dir(args))
    for seed in seeds:
        line = [f"seed {seed}: raw auc {result.auc_raw[seed]:.4f}"]
        for method, by_seed in result.auc_per_method.items():
            line.append(f"{method} {by_seed[seed]:.4f}")
        print("  ".join(line))
    print(f"report -> {paths['json']}")
    return 0


def build_parser():
    parser = _Parser(prog="stainbench",
                     description="Stain normalization benchmark toolkit")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out-dir", default="stainbench-out",
                        help="output directory (default: stainbench-out)")
    parser.add_argument("--threads", type=int,
                        help="worker threads for per-image work")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic paired images")
    p.add_argument("--n", type=int, default=16)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", help="fit a normalizer to a reference image")
    p.add_argument("method", choices=METHODS)
    p.add_argument("reference")
    p.add_argument("--out", default="normalizer.json")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("normalize", help="apply a fitted normalizer to images")
    p.add_argument("model")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=_cmd_normalize)

    p = sub.add_parser("deconvolve", help="estimate stains and concentrations")
    p.add_argument("image")
    p.add_argument("--stains", help="stain matrix JSON instead of estimating")
    p.add_argument("--estimator", choices=("macenko", "vahadane"),
                   default="macenko")
    p.set_defaults(func=_cmd_deconvolve)

    p = sub.add_parser("metrics", help="compare two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--metrics", help="comma list (default: all)")
    p.add_argument("--out", help="also write a CSV")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("train-gan", help="train the stain-transfer GAN")
    p.add_argument("--data-a", help="directory of domain A images")
    p.add_argument("--data-h", help="directory of domain H images")
    p.set_defaults(func=_cmd_train_gan)

    p = sub.add_parser("apply-gan", help="run a trained GAN on one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--out", default="translated.png")
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--overlap", type=int, default=8)
    p.set_defaults(func=_cmd_apply_gan)

    p = sub.add_parser("bench", help="run the full transfer benchmark")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ref-sensitivity",
                       help="classical-method sensitivity to the reference")
    p.set_defaults(func=_cmd_ref_sensitivity)

    p = sub.add_parser("usecase",
                       help="downstream classifier with and without normalization")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=_cmd_usecase)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"stainbench: {exc}", file=sys.stderr)
        return 1
    except StainBenchError as exc:
        print(f"stainbench: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"stainbench: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
