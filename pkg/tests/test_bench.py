import json

import numpy as np
import pytest

from stainbench.bench import (
    BenchConfig,
    BenchReport,
    MethodRow,
    emit_report,
    emit_ref_sensitivity,
    emit_usecase,
    load_metrics_csv,
    run_reference_sensitivity,
    run_transfer_benchmark,
    run_usecase,
    sensitivity_references,
)
from stainbench.errors import ConfigError
from stainbench.gan import TrainConfig
from stainbench.metrics import ssim
from stainbench.synth import SynthParams, synth_pairs


def small_cfg(**over):
    base = dict(
        n_pairs=6,
        seed=3,
        synth=SynthParams(size=32),
        methods=("reinhard", "macenko"),
        metrics=("ssim", "psnr"),
        gan_crops=8,
        gan_crop_size=16,
        gan_train=TrainConfig(epochs=1, batch=2),
    )
    base.update(over)
    return BenchConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        BenchConfig(n_pairs=1)
    with pytest.raises(ConfigError):
        small_cfg(methods=())
    with pytest.raises(ConfigError):
        small_cfg(methods=("reinhard", "sorcery"))
    with pytest.raises(ConfigError):
        small_cfg(methods=("reinhard", "reinhard"))
    with pytest.raises(ConfigError):
        small_cfg(metrics=("ssim", "vibes"))
    with pytest.raises(ConfigError):
        small_cfg(reference_index=6)
    with pytest.raises(ConfigError):
        small_cfg(threads=0)
    with pytest.raises(ConfigError):
        small_cfg(gan_crops=1)
    with pytest.raises(ConfigError):
        small_cfg(gan_crop_size=64)


def test_config_json_round_trip_and_hash():
    cfg = small_cfg()
    again = BenchConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()
    assert small_cfg(seed=4).config_hash() != cfg.config_hash()


def test_method_row_constraints():
    with pytest.raises(ConfigError):
        MethodRow("x", False)  # neither metrics nor error
    with pytest.raises(ConfigError):
        MethodRow("x", False, metrics={}, error="boom")
    with pytest.raises(ConfigError):
        MethodRow("x", False, metrics={}, seconds=0.0)


def test_report_requires_control_and_unique_rows():
    row = MethodRow("none", False, metrics={}, seconds=0.1)
    other = MethodRow("reinhard", True, metrics={}, seconds=0.1)
    report = BenchReport("h", 0, "v", ("ssim",), (row, other))
    assert report.row("reinhard") is other
    with pytest.raises(ConfigError):
        BenchReport("h", 0, "v", ("ssim",), (other,))
    with pytest.raises(ConfigError):
        BenchReport("h", 0, "v", ("ssim",), (row, row))


@pytest.fixture(scope="module")
def classical_report():
    return run_transfer_benchmark(small_cfg())


def test_report_has_one_row_per_method_plus_control(classical_report):
    cfg = small_cfg()
    names = [r.method for r in classical_report.rows]
    assert names == ["none"] + list(cfg.methods)


def test_control_row_equals_raw_baseline(classical_report):
    cfg = small_cfg()
    pairs = synth_pairs(cfg.n_pairs, cfg.seed, cfg.synth)
    direct = np.mean([ssim(s, t) for s, t in pairs])
    control = classical_report.row("none")
    assert control.metrics["ssim"].mean == pytest.approx(direct, abs=1e-12)
    assert not control.reference_based


def test_classical_methods_beat_raw_on_small_set(classical_report):
    base = classical_report.row("none").metrics["ssim"].mean
    for method in ("reinhard", "macenko"):
        assert classical_report.row(method).metrics["ssim"].mean > base


def test_rows_record_wall_clock_and_distances(classical_report):
    for row in classical_report.rows:
        assert row.seconds > 0
        d_h, d_e = row.stain_distance
        assert d_h >= 0 and d_e >= 0


def test_method_failure_is_recorded_not_fatal(monkeypatch):
    import stainbench.bench as bench_mod

    real_fit = bench_mod.fit

    def exploding_fit(method, reference, config=None):
        if method == "macenko":
            raise bench_mod.StainBenchError("synthetic failure")
        return real_fit(method, reference, config)

    monkeypatch.setattr(bench_mod, "fit", exploding_fit)
    report = run_transfer_benchmark(small_cfg())
    failed = report.row("macenko")
    assert failed.error == "synthetic failure"
    assert failed.metrics is None
    assert report.row("reinhard").error is None


def test_gan_row_is_reference_free():
    cfg = small_cfg(methods=("gan",))
    report = run_transfer_benchmark(cfg)
    row = report.row("gan")
    assert row.error is None
    assert not row.reference_based
    assert report.row("none").metrics["ssim"].mean == pytest.approx(
        run_transfer_benchmark(small_cfg()).row("none").metrics["ssim"].mean)


def test_sensitivity_references_look_different():
    cfg = small_cfg()
    refs = sensitivity_references(cfg)
    assert len(refs) == 3
    assert ssim(refs[0], refs[2]) < 0.999


def test_reference_sensitivity_spread():
    cfg = small_cfg(methods=("reinhard", "macenko", "gan"))
    result = run_reference_sensitivity(cfg, sensitivity_references(cfg))
    # One distribution per (classical method, reference); gan excluded.
    assert set(result.per_method) == {"reinhard", "macenko"}
    for entries in result.per_method.values():
        assert [label for label, _ in entries] == ["ref0", "ref1", "ref2"]
    assert result.spread["reinhard"] > 0
    assert result.gan_reference_free


def test_identical_references_have_zero_spread():
    cfg = small_cfg(methods=("reinhard",))
    ref = synth_pairs(1, cfg.seed, cfg.synth)[0][1]
    result = run_reference_sensitivity(cfg, [ref, ref])
    assert result.spread["reinhard"] == 0.0


def test_reference_sensitivity_needs_two_refs():
    cfg = small_cfg()
    with pytest.raises(ConfigError):
        run_reference_sensitivity(cfg, sensitivity_references(cfg)[:1])


def test_emit_report_round_trip(classical_report, tmp_path):
    paths = emit_report(classical_report, tmp_path)
    table = load_metrics_csv(paths["metrics"])
    for row in classical_report.rows:
        for name in classical_report.metric_names:
            mean, std, n = table[row.method][name]
            assert mean == row.metrics[name].mean
            assert std == row.metrics[name].std
            assert n == len(row.metrics[name].per_image)
    summary = json.loads(paths["summary"].read_text())
    assert summary["config_hash"] == classical_report.config_hash
    assert [r["method"] for r in summary["rows"]] == [
        r.method for r in classical_report.rows]


def test_boxplot_quantiles_match_oracle(classical_report, tmp_path):
    import csv

    paths = emit_report(classical_report, tmp_path)
    with open(paths["boxplot"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    rec = next(r for r in rows if r["method"] == "macenko" and r["metric"] == "ssim")
    vals = np.asarray(classical_report.row("macenko").metrics["ssim"].per_image)
    for field, q in (("min", 0.0), ("q1", 0.25), ("median", 0.5),
                     ("q3", 0.75), ("max", 1.0)):
        assert float(rec[field]) == np.quantile(vals, q)


def test_bench_outputs_are_byte_identical_across_runs(tmp_path):
    cfg = small_cfg(methods=("reinhard", "macenko", "gan"))
    a = emit_report(run_transfer_benchmark(cfg), tmp_path / "a")
    b = emit_report(run_transfer_benchmark(cfg), tmp_path / "b")
    for name in ("metrics", "stain_distances", "boxplot"):
        assert a[name].read_bytes() == b[name].read_bytes()


def test_usecase_no_shift_control(tmp_path):
    cfg = small_cfg(synth=SynthParams().identity_shift())
    result = run_usecase(cfg, seeds=(0,), methods=("reinhard",),
                         shift_stain_scale=None)
    raw = result.auc_raw[0]
    norm = result.auc_per_method["reinhard"][0]
    assert 0.0 <= raw <= 1.0 and 0.0 <= norm <= 1.0
    # Without an appearance shift, normalization must not change the story.
    assert abs(raw - norm) <= 0.03

    paths = emit_usecase(result, tmp_path)
    payload = json.loads(paths["json"].read_text())
    assert payload["auc_raw"]["0"] == raw

    import csv

    with open(paths["roc"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_variant = {}
    for rec in rows:
        by_variant.setdefault(rec["variant"], []).append(float(rec["fpr"]))
    for fprs in by_variant.values():
        assert all(x <= y for x, y in zip(fprs, fprs[1:]))


def test_usecase_rejects_unknown_method():
    with pytest.raises(ConfigError):
        run_usecase(small_cfg(), seeds=(0,), methods=("sorcery",))


def test_emit_ref_sensitivity_files(tmp_path):
    cfg = small_cfg(methods=("reinhard",))
    result = run_reference_sensitivity(cfg, sensitivity_references(cfg))
    paths = emit_ref_sensitivity(result, tmp_path)
    payload = json.loads(paths["json"].read_text())
    assert payload["spread"]["reinhard"] == result.spread["reinhard"]
    text = paths["csv"].read_text()
    assert text.count("reinhard") == 3
