import numpy as np
import pytest
from scipy.stats import ks_2samp

from cmrbench.core import DomainProfile, Image, LabelMask, lv_enclosed
from cmrbench.errors import (
    ConfigError,
    DegenerateFitError,
    DegenerateRangeError,
    EmptyMaskError,
    SplitLeakError,
)
from cmrbench.phantom import (
    DOMAIN_A,
    DOMAIN_B,
    MaskParams,
    PhantomConfig,
    _poly_basis,
    bias_field,
    build_dataset,
    correct_bias,
    crop_roi,
    gen_image,
    gen_mask,
    normalize_intensity,
)

FLAT_A = DomainProfile("flat", DOMAIN_A.tissue_intensities, 0.0, 0.0, 0.0, 1.0)


def test_gen_mask_enclosure_deterministic_center():
    params = MaskParams(
        height=64,
        width=64,
        lv_radius=(10.0, 10.0),
        axis_ratio=(1.0, 1.0),
        myo_thickness=(4, 4),
        center_jitter=0.0,
    )
    mask = gen_mask(params, np.random.default_rng(0))
    grid = mask.grid
    lv = grid == 1
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        shifted = np.roll(lv, (dy, dx), axis=(0, 1))
        neighbors = grid[shifted & ~lv]
        assert np.all(neighbors == 2)


def test_gen_mask_deterministic():
    params = MaskParams()
    m1 = gen_mask(params, np.random.default_rng(7))
    m2 = gen_mask(params, np.random.default_rng(7))
    assert np.array_equal(m1.grid, m2.grid)


def test_gen_mask_invariants_many_seeds():
    params = MaskParams()
    for seed in range(200):
        mask = gen_mask(params, np.random.default_rng(seed))
        mask.validate()
        counts = mask.class_counts()
        assert counts[1] > 0 and counts[2] > 0 and counts[3] > 0
        # RV abuts MYO: at least one RV pixel with a MYO 4-neighbor
        rv = mask.grid == 3
        myo = mask.grid == 2
        touch = False
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            touch = touch or np.any(np.roll(myo, (dy, dx), axis=(0, 1)) & rv)
        assert touch


def test_gen_mask_lv_area_matches_prior():
    # E[pixel count] = pi * E[a^2] * E[b/a] for a ~ U(r0,r1), ratio uniform;
    # uniform sub-pixel center jitter makes rasterization unbiased.
    params = MaskParams()
    counts = [
        gen_mask(params, np.random.default_rng(50_000 + s)).class_counts()[1]
        for s in range(1000)
    ]
    r0, r1 = params.lv_radius
    analytic = np.pi * (r0 * r0 + r0 * r1 + r1 * r1) / 3.0 * sum(params.axis_ratio) / 2.0
    assert abs(np.mean(counts) - analytic) / analytic < 0.05


def test_gen_mask_too_small_grid():
    with pytest.raises(ConfigError):
        gen_mask(MaskParams(height=16, width=16), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        gen_mask(
            MaskParams(height=48, width=48, lv_radius=(20.0, 20.0)),
            np.random.default_rng(0),
        )


def test_gen_image_piecewise_constant_when_clean():
    mask = gen_mask(MaskParams(), np.random.default_rng(3))
    img = gen_image(mask, FLAT_A, np.random.default_rng(3))
    expected = np.asarray(FLAT_A.tissue_intensities, dtype=np.float32)[mask.grid]
    assert np.allclose(img.grid, expected)


def test_gen_image_domain_means_differ_by_configured_contrast():
    intens_a = (0.2, 0.9, 0.4, 0.75)
    intens_b = (0.2, 0.7, 0.4, 0.75)
    prof_a = DomainProfile("a", intens_a, 1.5, 0.02, 0.0, 1.0)
    prof_b = DomainProfile("b", intens_b, 1.5, 0.02, 0.0, 1.0)
    mask = gen_mask(MaskParams(), np.random.default_rng(5))
    lv = mask.grid == 1
    rng = np.random.default_rng(8)
    means_a = [gen_image(mask, prof_a, rng).grid[lv].mean() for _ in range(100)]
    means_b = [gen_image(mask, prof_b, rng).grid[lv].mean() for _ in range(100)]
    diff = np.mean(means_a) - np.mean(means_b)
    configured = intens_a[1] - intens_b[1]
    # sem of each mean is ~sigma/sqrt(n_px*100); 0.01 is many sems
    assert abs(diff - configured) < 0.01


def test_gen_image_bias_ratio_matches_polynomial():
    mask = gen_mask(MaskParams(), np.random.default_rng(4))
    biased_prof = DomainProfile("b", DOMAIN_A.tissue_intensities, 0.0, 0.0, 0.3, 1.0)
    rng = np.random.default_rng(11)
    img = gen_image(mask, biased_prof, rng)
    clean = gen_image(mask, FLAT_A, np.random.default_rng(11))
    field = bias_field(mask.shape, np.array(img.meta["bias_coeffs"]), 0.3)
    ratio = img.grid.astype(np.float64) / clean.grid
    assert np.allclose(ratio, field, atol=1e-6)


def test_correct_bias_identity_on_bias_free_image():
    for seed in range(5):
        rng = np.random.default_rng(1000 + seed)
        mask = gen_mask(MaskParams(), rng)
        img = gen_image(mask, FLAT_A, rng)
        out = correct_bias(img, mask.grid == 0)
        assert np.abs(out.grid / img.grid - 1.0).max() < 0.02


def test_correct_bias_inject_and_recover_exact():
    rng = np.random.default_rng(2002)
    mask = gen_mask(MaskParams(), rng)
    img = gen_image(mask, FLAT_A, rng)
    coeffs = np.array([0.0, 0.8, -0.6, 0.7, -0.5, 0.9])
    strength = 0.75
    biased = Image(grid=img.grid * bias_field(mask.shape, coeffs, strength))
    out = correct_bias(biased, mask.grid == 0)
    region = mask.grid == 0
    basis = _poly_basis(*mask.shape, region=region)
    resid, *_ = np.linalg.lstsq(
        basis, np.log(out.grid.astype(np.float64))[region], rcond=None
    )
    injected = strength * coeffs
    assert np.linalg.norm(resid[1:]) < 0.10 * np.linalg.norm(injected[1:])
    # clean piecewise-constant case: recovery is exact to numerical precision
    assert np.linalg.norm(resid[1:]) < 1e-6


def test_correct_bias_inject_and_recover_with_noise_and_texture():
    coeffs = np.array([0.0, 0.8, -0.6, 0.7, -0.5, 0.9])
    strength = 0.75
    injected_norm = np.linalg.norm(strength * coeffs[1:])
    noisy = DomainProfile("n", DOMAIN_A.tissue_intensities, 1.5, 0.03, 0.0, 1.0)
    for seed in range(8):
        rng = np.random.default_rng(3000 + seed)
        mask = gen_mask(MaskParams(), rng)
        img = gen_image(mask, noisy, rng)
        # the contract requires strict positivity where the fit happens
        positive = np.maximum(img.grid, 0.05)
        biased = Image(grid=positive * bias_field(mask.shape, coeffs, strength))
        out = correct_bias(biased, mask.grid == 0)
        region = mask.grid == 0
        basis = _poly_basis(*mask.shape, region=region)
        resid, *_ = np.linalg.lstsq(
            basis, np.log(np.maximum(out.grid.astype(np.float64), 1e-8))[region], rcond=None
        )
        assert np.linalg.norm(resid[1:]) < 0.10 * injected_norm


def test_correct_bias_preserves_mean_log():
    rng = np.random.default_rng(77)
    mask = gen_mask(MaskParams(), rng)
    profile = DomainProfile("p", (0.35, 0.9, 0.45, 0.7), 1.5, 0.0, 0.3, 1.0)
    img = gen_image(mask, profile, rng)
    assert img.grid.min() > 0
    region = mask.grid == 0
    out = correct_bias(img, region)
    assert out.meta["bias_shift"] == 0.0
    before = np.log(img.grid.astype(np.float64)[region]).mean()
    after = np.log(out.grid.astype(np.float64)[region]).mean()
    assert abs(before - after) < 1e-5


def test_correct_bias_underdetermined():
    img = Image(grid=np.ones((16, 16), dtype=np.float32))
    region = np.zeros((16, 16), dtype=bool)
    region[0, :3] = True
    with pytest.raises(DegenerateFitError):
        correct_bias(img, region)


def test_correct_bias_accepts_labelmask_and_records_shift():
    rng = np.random.default_rng(9)
    mask = gen_mask(MaskParams(), rng)
    img = gen_image(mask, FLAT_A, rng)
    shifted = Image(grid=img.grid - 0.5)  # negative values on background
    out = correct_bias(shifted, mask)
    assert out.meta["bias_shift"] > 0.0


def test_crop_roi_identity_when_window_is_frame():
    rng = np.random.default_rng(21)
    params = MaskParams(
        height=64,
        width=64,
        lv_radius=(8.0, 8.0),
        myo_thickness=(4, 4),
        rv_scale=(0.8, 0.8),
        center_jitter=0.0,
    )
    mask = gen_mask(params, rng)
    img = gen_image(mask, FLAT_A, rng)
    out_img, out_mask = crop_roi(img, mask, margin=64, out_size=64)
    assert np.array_equal(out_img.grid, img.grid)
    assert np.array_equal(out_mask.grid, mask.grid)


def test_crop_roi_clamps_to_bounds():
    grid = np.zeros((64, 64), dtype=np.uint8)
    grid[2:10, 2:10] = 2
    grid[4:8, 4:8] = 1
    mask = LabelMask(grid=grid)
    img = Image(grid=np.random.default_rng(0).random((64, 64)).astype(np.float32))
    out_img, out_mask = crop_roi(img, mask, margin=8, out_size=32)
    assert out_img.shape == (32, 32)
    assert set(np.unique(out_mask.grid)) >= {1, 2}
    counts = out_mask.class_counts()
    assert counts[1] + counts[2] >= (grid > 0).sum()  # upscaled, heart kept whole


def test_crop_roi_empty_mask():
    mask = LabelMask(grid=np.zeros((32, 32), dtype=np.uint8))
    img = Image(grid=np.zeros((32, 32), dtype=np.float32))
    with pytest.raises(EmptyMaskError):
        crop_roi(img, mask, margin=2)


def test_crop_roi_preserves_mask_invariants():
    params = MaskParams()
    for seed in range(100):
        rng = np.random.default_rng(seed)
        mask = gen_mask(params, rng)
        img = gen_image(mask, FLAT_A, rng)
        _, out_mask = crop_roi(img, mask, margin=6, out_size=32)
        out_mask.validate()
        assert out_mask.class_counts()[1] > 0


def test_normalize_intensity_ramp():
    ramp = np.tile(np.linspace(0.0, 100.0, 64, dtype=np.float32), (64, 1))
    out = normalize_intensity(Image(grid=ramp))
    lo, hi = np.percentile(ramp, [1.0, 99.0])
    mid = ramp[0, 32]
    expected_mid = (np.clip(mid, lo, hi) - lo) / (hi - lo) * 2 - 1
    assert out.grid.min() == -1.0
    assert out.grid.max() == 1.0
    assert np.all(np.diff(out.grid[0]) >= 0)
    assert abs(out.grid[0, 32] - expected_mid) < 1e-6


def test_normalize_intensity_outlier_clipped():
    rng = np.random.default_rng(1)
    grid = rng.random((64, 64)).astype(np.float32)
    grid[5, 5] = 1e6
    out = normalize_intensity(Image(grid=grid))
    assert out.grid[5, 5] == 1.0
    assert out.grid.max() == 1.0


def test_normalize_intensity_constant_image():
    with pytest.raises(DegenerateRangeError):
        normalize_intensity(Image(grid=np.full((32, 32), 3.0, dtype=np.float32)))


def test_build_dataset_counts_and_split_sizes():
    cfg = PhantomConfig(counts={"A": 100, "B": 100}, seed=4)
    ds = build_dataset(cfg)
    assert len(ds.items) == 200
    assert len(ds.split("train")) == 140
    assert len(ds.split("val")) == 20
    assert len(ds.split("test")) == 40
    ds.validate()
    bad = PhantomConfig(split_fractions=(0.7, 0.2, 0.2))
    with pytest.raises(ConfigError):
        build_dataset(bad)


def test_build_dataset_deterministic():
    cfg = PhantomConfig(counts={"A": 6, "B": 6}, seed=99)
    d1 = build_dataset(cfg)
    d2 = build_dataset(cfg)
    assert d1.provenance == d2.provenance
    for a, b in zip(d1.items, d2.items):
        assert a.subject_id == b.subject_id and a.split == b.split
        assert np.array_equal(a.image.grid, b.image.grid)
        assert np.array_equal(a.mask.grid, b.mask.grid)


def test_build_dataset_items_valid():
    cfg = PhantomConfig(counts={"A": 20, "B": 20}, seed=2)
    ds = build_dataset(cfg)
    for it in ds.items:
        assert it.image.grid.min() >= -1.0 and it.image.grid.max() <= 1.0
        it.mask.validate()
        assert it.mask.grid.max() > 0
        assert it.image.shape == (32, 32)


def test_build_dataset_domains_separate():
    cfg = PhantomConfig(counts={"A": 100, "B": 100}, seed=11)
    ds = build_dataset(cfg)
    mean_fg = lambda it: it.image.grid[it.mask.grid > 0].mean()
    fa = [mean_fg(it) for it in ds.items if it.domain == "A"]
    fb = [mean_fg(it) for it in ds.items if it.domain == "B"]
    assert ks_2samp(fa, fb).pvalue < 0.01


def test_dataset_split_leak_detection():
    cfg = PhantomConfig(counts={"A": 4}, seed=0)
    ds = build_dataset(cfg)
    ds.items[0].split = "train"
    ds.items.append(
        type(ds.items[0])(
            image=ds.items[0].image,
            mask=ds.items[0].mask,
            subject_id=ds.items[0].subject_id,
            domain="A",
            split="test",
        )
    )
    with pytest.raises(SplitLeakError):
        ds.validate()


def test_lv_enclosed_rejects_border_lv():
    grid = np.zeros((16, 16), dtype=np.uint8)
    grid[0, 0] = 1
    assert not lv_enclosed(grid)
