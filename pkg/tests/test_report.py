import json
import math

import numpy as np
import pytest

from cmrbench.errors import ConfigError
from cmrbench.figures import (
    denoising_strip_figure,
    metric_bar_figure,
    sample_grid_figure,
    shape_violin_figure,
)
from cmrbench.maskshape import plausibility_report
from cmrbench.phantom import PhantomConfig, build_dataset
from cmrbench.report import MetricReport, MetricRow, emit_report


def small_report():
    report = MetricReport({"config_hash": "abc123", "checkpoints": {"ddpm": "h1"}})
    report.add("fidelity", "ddpm", "", "fid", 12.5)
    report.add("fidelity", "ldm", "", "fid", 14.0)
    report.add("utility", "ddpm", "FullSyn-ddpm", "dice_mean", 0.81, uncertainty=0.02)
    report.add("privacy", "ddpm", "", "mia_auc", 0.52)
    report.add("shape", "ddpm", "", "flagged_rows", 1.0)
    return report


def test_row_validation():
    with pytest.raises(ConfigError):
        MetricRow("speed", "ddpm", "", "fid", 1.0)
    with pytest.raises(ConfigError):
        MetricRow("fidelity", "ddpm", "", "", 1.0)
    row = MetricRow("fidelity", "ddpm", "", "fid", np.float32(2.0))
    assert isinstance(row.value, float)


def test_append_only_interface():
    report = small_report()
    assert isinstance(report.rows, tuple)
    assert not hasattr(report, "remove")
    n = len(report.rows)
    report.add("fidelity", "fm", "", "fid", 1.0)
    assert len(report.rows) == n + 1


def test_filter_and_value():
    report = small_report()
    assert len(report.filter(axis="fidelity")) == 2
    assert len(report.filter(generator="ddpm")) == 4
    assert report.value("utility", "ddpm", "FullSyn-ddpm", "dice_mean") == 0.81
    with pytest.raises(KeyError):
        report.value("utility", "fm", "", "dice_mean")


def test_json_roundtrip(tmp_path):
    report = small_report()
    report.add("utility", "ldm", "RealA", "hd95", float("nan"))
    path = report.save_json(tmp_path / "metrics.json")
    loaded = MetricReport.load_json(path)
    assert loaded == report
    assert math.isnan(loaded.rows[-1].value)
    assert loaded.provenance["config_hash"] == "abc123"


def test_equality_ignores_timestamp():
    a = small_report()
    b = small_report()
    b.provenance["created_at"] = "1999-01-01T00:00:00"
    assert a == b
    b.add("fidelity", "fm", "", "fid", 9.0)
    assert a != b
    c = small_report()
    c.provenance["config_hash"] = "other"
    assert a != c


def test_csv_shape_and_determinism(tmp_path):
    report = small_report()
    p1 = report.save_csv(tmp_path / "a.csv")
    p2 = report.save_csv(tmp_path / "b.csv")
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().strip().splitlines()
    assert lines[0] == "axis,generator,setup,metric,value,uncertainty"
    assert len(lines) == 1 + len(report.rows)
    assert lines[3].endswith("0.81,0.02")


def test_emit_report_manifest(tmp_path):
    report = small_report()
    manifest = emit_report(report, tmp_path / "out")
    assert manifest["row_count"] == len(report.rows)
    assert set(manifest["files"]) == {"metrics.csv", "metrics.json"}
    on_disk = {p.name for p in (tmp_path / "out").iterdir()}
    assert on_disk == set(manifest["files"]) | {"report_manifest.json"}
    saved = json.loads((tmp_path / "out" / "report_manifest.json").read_text())
    assert saved["config_hash"] == "abc123"
    with pytest.raises(ConfigError):
        emit_report(MetricReport(), tmp_path / "empty")


@pytest.fixture(scope="module")
def phantom_items():
    return build_dataset(
        PhantomConfig(counts={"A": 70}, split_fractions=(1.0, 0.0, 0.0), seed=2)
    ).items


def test_sample_grid_figure(tmp_path, phantom_items):
    masks = [it.mask for it in phantom_items[:4]]
    images = [it.image for it in phantom_items[:4]]
    path = sample_grid_figure(masks, images, "ddpm", tmp_path / "grid.png")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(ConfigError):
        sample_grid_figure(masks, images[:2], "ddpm", tmp_path / "bad.png")


def test_denoising_strip_figure(tmp_path):
    rng = np.random.default_rng(0)
    snaps = [rng.standard_normal((2, 1, 16, 16)) for _ in range(6)]
    path = denoising_strip_figure(snaps, 200, 1000, tmp_path / "strip.png")
    assert path.is_file()
    with pytest.raises(ConfigError):
        denoising_strip_figure([], 200, 1000, tmp_path / "empty.png")


def test_shape_violin_figure(tmp_path, phantom_items):
    real = [it.mask for it in phantom_items[:35]]
    gen = [it.mask for it in phantom_items[35:70]]
    plaus = plausibility_report(real, gen)
    path = shape_violin_figure(plaus, "ddpm", tmp_path / "violin.png")
    assert path.is_file()


def test_metric_bar_figure(tmp_path):
    report = small_report()
    path = metric_bar_figure(report, "fidelity", tmp_path / "bars.png")
    assert path.is_file()
    with pytest.raises(ConfigError):
        metric_bar_figure(MetricReport(), "fidelity", tmp_path / "none.png")


def test_figure_reemission_is_byte_identical(tmp_path, phantom_items):
    masks = [it.mask for it in phantom_items[:3]]
    images = [it.image for it in phantom_items[:3]]
    p1 = sample_grid_figure(masks, images, "ddpm", tmp_path / "g1.png")
    p2 = sample_grid_figure(masks, images, "ddpm", tmp_path / "g2.png")
    assert p1.read_bytes() == p2.read_bytes()
    report = small_report()
    b1 = metric_bar_figure(report, "fidelity", tmp_path / "m1.png")
    b2 = metric_bar_figure(report, "fidelity", tmp_path / "m2.png")
    assert b1.read_bytes() == b2.read_bytes()
