import json

import numpy as np
import pytest

from cmrbench.checkpoint import load_checkpoint
from cmrbench.config import config_from_mapping
from cmrbench.ddpm import make_schedule
from cmrbench.errors import ConfigError, StageError
from cmrbench.pipeline import Pipeline, _diffusion_t_levels, _generator_of
from cmrbench.report import MetricReport

TINY = {
    "seed": 0,
    "data": {"counts": {"A": 16, "B": 16}},
    "ddpm": {"epochs": 1, "T": 100},
    "ldm": {"autoencoder": {"epochs": 1}, "diffusion": {"epochs": 1, "T": 100}},
    "fm": {"epochs": 1},
    "segmenter": {"epochs": 1},
    "embedder": {"epochs": 1},
    "evaluation": {
        "n_synth": 8,
        "sample_batch": 16,
        "solver_steps": 20,
        "record_every": 25,
        "mia_members": 4,
        "mia_repeats": 2,
        "kid_subsets": 3,
        "kid_subset_size": 4,
    },
}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = config_from_mapping(TINY)
    pipeline = Pipeline(config, out_dir=out)
    manifest = pipeline.run_all()
    return pipeline, manifest


def test_helpers():
    assert _generator_of("FullSyn-ddpm") == "ddpm"
    assert _generator_of("ASyn-fm") == "fm"
    assert _generator_of("RealA") == "real"
    assert _diffusion_t_levels(make_schedule(1000, 1e-4, 0.02)) == (100, 300, 500)
    assert _diffusion_t_levels(make_schedule(100, 1e-4, 0.02)) == (10, 30, 50)
    assert _diffusion_t_levels(make_schedule(5, 1e-4, 0.02)) == (1, 2)


def test_run_directory_layout(full_run):
    pipeline, manifest = full_run
    paths = pipeline.paths
    assert paths.resolved_config.is_file()
    assert (paths.data / "manifest.json").is_file()
    expected_ckpts = {
        "mask_ddpm", "image_ddpm", "latent_ddpm", "flow", "autoencoder", "embedder",
        "seg_RealA", "seg_RealB", "seg_FullSyn-ddpm", "seg_FullSyn-ldm", "seg_FullSyn-fm",
    }
    on_disk = {p.stem for p in paths.checkpoints.glob("*.ckpt")}
    assert on_disk == expected_ckpts
    for gen in ("ddpm", "ldm", "fm"):
        assert (paths.sample_dir(gen) / "manifest.json").is_file()
    assert (paths.samples / "denoising.npz").is_file()
    for axis in ("fidelity", "shape", "utility", "privacy"):
        assert paths.eval_json(axis).is_file()
    listed = set(manifest["files"]) | {"report_manifest.json"}
    assert {p.name for p in paths.report.iterdir()} == listed


def test_config_hash_embedded_everywhere(full_run):
    pipeline, _ = full_run
    expected = pipeline.config.hash()
    resolved = json.loads(pipeline.paths.resolved_config.read_text())
    assert resolved["config_hash"] == expected
    for stem in ("mask_ddpm", "image_ddpm", "seg_RealA", "embedder"):
        params = load_checkpoint(pipeline.paths.checkpoint(stem))
        assert params.meta["run_config_hash"] == expected
    report = MetricReport.load_json(pipeline.paths.report / "metrics.json")
    assert report.provenance["config_hash"] == expected


def test_report_covers_every_axis_and_generator(full_run):
    pipeline, _ = full_run
    report = MetricReport.load_json(pipeline.paths.report / "metrics.json")
    for axis in ("fidelity", "shape", "utility", "privacy"):
        for gen in ("ddpm", "ldm", "fm"):
            assert report.filter(axis=axis, generator=gen), (axis, gen)
    assert report.filter(axis="fidelity", generator="ddpm", metric="fid")
    assert report.filter(axis="privacy", generator="fm", metric="mia_auc")
    setups = {r.setup.split(":")[0] for r in report.filter(axis="utility")}
    assert setups == {"RealA", "RealB", "FullSyn-ddpm", "FullSyn-ldm", "FullSyn-fm"}
    domains = {r.setup.split(":test")[1] for r in report.filter(axis="utility")}
    assert domains == {"A", "B"}


def test_synthetic_sets_size_matched(full_run):
    pipeline, _ = full_run
    n_real = len(pipeline.dataset().domain("A").split("train"))
    expected = max(pipeline.config.evaluation.n_synth, n_real)
    for gen in ("ddpm", "ldm", "fm"):
        items = pipeline._synth_items(gen, "test")
        assert len(items) == expected
        for it in items[:3]:
            assert it.image.grid.shape == (32, 32)
            assert it.image.grid.min() >= -1.0 and it.image.grid.max() <= 1.0
            assert it.mask.grid.max() <= 3


def test_metric_values_in_range(full_run):
    pipeline, _ = full_run
    report = MetricReport.load_json(pipeline.paths.report / "metrics.json")
    for row in report.filter(axis="privacy", metric="mia_auc"):
        assert 0.0 <= row.value <= 1.0
    for row in report.filter(axis="privacy", metric="nndr_mean"):
        assert 0.0 <= row.value <= 1.0
    for row in report.filter(axis="shape", metric="violation_fraction"):
        assert 0.0 <= row.value <= 1.0
    for row in report.filter(axis="fidelity", metric="fid"):
        assert np.isfinite(row.value) and row.value >= 0.0
    for row in report.filter(metric="dice_mean"):
        assert 0.0 <= row.value <= 1.0


def test_report_stage_reruns_in_isolation(full_run):
    pipeline, manifest = full_run
    fresh = Pipeline(pipeline.config, out_dir=pipeline.paths.root)
    before = (pipeline.paths.report / "metrics.csv").read_bytes()
    again = fresh.report()
    assert again["row_count"] == manifest["row_count"]
    assert (pipeline.paths.report / "metrics.csv").read_bytes() == before


def test_sampling_is_deterministic_per_seed(full_run):
    pipeline, _ = full_run
    mask_params = load_checkpoint(pipeline.paths.checkpoint("mask_ddpm"))
    a = pipeline._sample_masks(mask_params, 3, seed=123)
    b = pipeline._sample_masks(mask_params, 3, seed=123)
    c = pipeline._sample_masks(mask_params, 3, seed=124)
    assert all(np.array_equal(x.grid, y.grid) for x, y in zip(a, b))
    assert any(not np.array_equal(x.grid, y.grid) for x, y in zip(a, c))


def test_figures_payload(full_run):
    pipeline, _ = full_run
    payload = pipeline._figures_payload()
    assert set(payload) == {"samples", "denoising", "shape"}
    assert set(payload["samples"]) == {"ddpm", "ldm", "fm"}
    assert len(payload["samples"]["ddpm"]["masks"]) == 6
    assert payload["denoising"]["interval"] == 25
    assert payload["denoising"]["total_steps"] == 100
    assert payload["shape"]["fm"].rows


def test_missing_prerequisites_raise_stage_errors(tmp_path):
    pipeline = Pipeline(config_from_mapping(TINY), out_dir=tmp_path / "empty")
    with pytest.raises(StageError, match="gen-data"):
        pipeline.dataset()
    with pytest.raises(StageError, match="mask_ddpm"):
        pipeline.sample()
    with pytest.raises(StageError, match="no evaluation fragments"):
        pipeline.report()
    with pytest.raises(ConfigError):
        pipeline.train_image("gan")


def test_workers_do_not_change_results(full_run):
    pipeline, _ = full_run
    threaded = Pipeline(pipeline.config, out_dir=pipeline.paths.root, workers=3)
    single = pipeline.eval_fidelity()
    multi = threaded.eval_fidelity()
    assert single == multi


@pytest.mark.slow
def test_full_run_determinism(full_run, tmp_path):
    pipeline, _ = full_run
    second = Pipeline(pipeline.config, out_dir=tmp_path / "again")
    with pytest.warns(UserWarning):
        second.run_all()
    first_report = MetricReport.load_json(pipeline.paths.report / "metrics.json")
    second_report = MetricReport.load_json(second.paths.report / "metrics.json")
    assert first_report == second_report
    assert (pipeline.paths.report / "metrics.csv").read_bytes() == (
        second.paths.report / "metrics.csv"
    ).read_bytes()
    assert pipeline.paths.checkpoint("image_ddpm").read_bytes() == second.paths.checkpoint(
        "image_ddpm"
    ).read_bytes()
