"""Release acceptance battery: eight numbered criteria, one test each.

Each test wraps its assertions in the ``criterion`` context manager so the
suite output contains exactly one verdict line per criterion, e.g.
``criterion 5 (segmentation metrics and quality gate): PASS``.  Criteria 5,
6 and 8 train real models and are marked slow.
"""

import statistics
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from cmrbench.backbone import ModelParams, UNet, encode_mask_onehot
from cmrbench.config import config_from_mapping, write_quickstart
from cmrbench.core import LabelMask
from cmrbench.ddpm import (
    DiffusionTrainConfig,
    NoiseSchedule,
    make_schedule,
    posterior_mean,
    sample_loop,
    train,
    unet_spec_for_role,
)
from cmrbench.cli import run_command
from cmrbench.fidelity import (
    EmbedderTrainConfig,
    FeatureSet,
    embed_features,
    fid,
    kid,
    kid_mmd2,
    lpips,
    ms_ssim,
    psnr,
    ssim,
    train_embedder,
)
from cmrbench.flowmatch import (
    FlowTrainConfig,
    ODESolverConfig,
    ode_integrate,
    train_flow,
    _as_velocity,
)
from cmrbench.maskshape import ks_two_sample, shape_stats
from cmrbench.phantom import PhantomConfig, build_dataset
from cmrbench.pipeline import Pipeline
from cmrbench.privacy import (
    nearest_neighbors,
    nndr_stats,
    roc_auc,
    run_mia,
    train_self_scale,
)
from cmrbench.report import MetricReport
from cmrbench.segutil import (
    SegTrainConfig,
    TrainingSetup,
    boundary_pixels,
    evaluate_cross,
    overlap_metrics,
    surface_metrics,
    train_segmenter,
)


@contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"criterion {number} ({name}): FAIL")
        raise
    print(f"criterion {number} ({name}): PASS")


# --- 1: diffusion mathematics ------------------------------------------------


def test_criterion_1_diffusion_math():
    with criterion(1, "diffusion forward/reverse math"):
        # sequentially applied one-step corruption vs the closed form: first
        # two moments over 10k scalar trajectories agree within 1%
        sched = make_schedule(T=50, beta_start=1e-4, beta_end=0.02)
        rng = np.random.default_rng(6)
        x = np.full(10_000, 1.0)
        for t in range(1, 51):
            b = sched.beta(t)
            x = np.sqrt(1.0 - b) * x + np.sqrt(b) * rng.standard_normal(10_000)
        closed_mean = np.sqrt(sched.alpha_bar(50))
        closed_var = 1.0 - sched.alpha_bar(50)
        assert abs(x.mean() - closed_mean) / closed_mean < 0.01
        assert abs(x.var() - closed_var) / closed_var < 0.01

        # constant beta = 0.01 for 100 steps: the signal-keep product is 0.99^100
        const = make_schedule(T=100, beta_start=0.01, beta_end=0.01)
        assert const.alpha_bar(100) == pytest.approx(0.99**100, abs=1e-12)

        # scalar posterior mean: alpha_t=0.99, alpha_bar_t=0.9, x_t=1, eps_hat=0.5
        sched2 = NoiseSchedule(betas=np.array([1.0 - 0.9 / 0.99, 0.01]))
        assert posterior_mean(1.0, 0.5, 2, sched2) == pytest.approx(0.98915, abs=1e-5)


# --- 2: generative smoke ------------------------------------------------------


def test_criterion_2_generative_smoke():
    with criterion(2, "generative smoke"):
        # DDPM recovers a two-mode dataset: 64 constant 8x8 images at -0.6 or
        # +0.6, trained for exactly 2000 steps
        modes = np.array([-0.6, 0.6], dtype=np.float32)
        labels = np.tile([0, 1], 32)
        x0 = np.broadcast_to(
            modes[labels][:, None, None, None], (64, 1, 8, 8)
        ).astype(np.float32).copy()
        cond = np.zeros((64, 4, 8, 8), dtype=np.float32)
        config = DiffusionTrainConfig(
            epochs=500, batch_size=16, lr=2e-3, seed=1, T=100,
            beta_start=0.01, beta_end=0.2, widths=(16, 32),
            blocks_per_level=1, attention_levels=(),
        )
        result = train("image_generator", (x0, cond), config)
        assert len(result.step_losses) == 2000
        sched = make_schedule(config.T, config.beta_start, config.beta_end)
        samples = np.asarray(
            sample_loop(
                result.params, np.zeros((16, 4, 8, 8), np.float32), sched,
                rng=np.random.default_rng(2), shape=(16, 1, 8, 8),
            )
        )
        near_mode = np.minimum(np.abs(samples - 0.6), np.abs(samples + 0.6)) <= 0.2
        assert near_mode.mean() >= 0.95
        per_image = samples.mean(axis=(1, 2, 3))
        assert (per_image > 0).sum() >= 2 and (per_image < 0).sum() >= 2  # both modes

        # flow matching recovers the analytic velocity between N(0,1) and N(3,1)
        rng = np.random.default_rng(3)
        x1 = (rng.standard_normal(8192) + 3.0).astype(np.float32).reshape(-1, 1)
        fm_cfg = FlowTrainConfig(epochs=150, batch_size=256, lr=1e-3, seed=5, widths=(64, 64))
        net = _as_velocity(train_flow((x1, None), fm_cfg).params)
        errs = []
        for t in np.linspace(0.1, 0.9, 9):
            mu, sd = 3 * t, np.sqrt((1 - t) ** 2 + t**2)
            xs = np.linspace(mu - 2 * sd, mu + 2 * sd, 21, dtype=np.float32)
            with torch.no_grad():
                v_hat = net(torch.from_numpy(xs.reshape(-1, 1)), float(t)).numpy().ravel()
            # marginal velocity of the straight path under independent coupling
            v_true = 3.0 + (2 * t - 1) * (xs - 3 * t) / ((1 - t) ** 2 + t**2)
            errs.append((v_hat - v_true) ** 2)
        assert float(np.mean(errs)) < 0.05

        # Euler on dx/dt = x from 1 reaches e within 0.5% at 1000 steps
        out = ode_integrate(
            lambda x, t, c: x, np.array([1.0]), None, ODESolverConfig(steps=1000)
        )
        assert abs(out[0] - np.e) / np.e < 0.005


# --- 3: metric identity battery -----------------------------------------------


def test_criterion_3_metric_identities():
    with criterion(3, "fidelity metric identities"):
        ds = build_dataset(PhantomConfig(counts={"A": 40, "B": 40}, seed=6))
        embedder = train_embedder(ds, EmbedderTrainConfig(epochs=4, seed=0))
        images = [it.image for it in ds.items]

        for image in images[:5]:
            assert ssim(image, image) == 1.0
            assert ms_ssim(image, image) == 1.0
            assert psnr(image, image) == 100.0  # identical pairs return the cap
            assert lpips(image, image, embedder) == 0.0

        features = embed_features(embedder, images)
        assert abs(fid(features, features)) <= 1e-8
        kid_mean, kid_std = kid(features, features, subsets=10, subset_size=32)
        assert abs(kid_mean) <= 1e-6 and kid_std <= 1e-12

        # 1-D closed form: sample stats exactly (0,1) vs (1,1) -> distance 1
        fa = FeatureSet(np.array([[-1.0], [0.0], [1.0]]))
        fb = FeatureSet(np.array([[0.0], [1.0], [2.0]]))
        assert fid(fa, fb) == pytest.approx(1.0, abs=1e-9)

        # unbiased kernel estimator on {1,1} vs {1,1}: 8 + 8 - 16 = 0 exactly
        assert kid_mmd2(np.array([[1.0], [1.0]]), np.array([[1.0], [1.0]])) == 0.0

        # monotone degradation along the noise sweep
        rng = np.random.default_rng(7)
        base = images[0].grid.astype(np.float64)
        psnrs, ssims = [], []
        for sigma in (0.01, 0.1, 0.5):
            noisy = base + sigma * rng.standard_normal(base.shape)
            psnrs.append(psnr(base, noisy))
            ssims.append(ssim(base, noisy))
        assert psnrs[0] > psnrs[1] > psnrs[2]
        assert ssims[0] > ssims[1] > ssims[2]


# --- 4: shape statistics --------------------------------------------------------


def _disc(r, size):
    yy, xx = np.mgrid[:size, :size]
    c = size / 2
    return ((yy + 0.5 - c) ** 2 + (xx + 0.5 - c) ** 2 <= r * r).astype(np.uint8)


def test_criterion_4_shape_statistics():
    with criterion(4, "shape descriptors and KS statistics"):
        stats = shape_stats(LabelMask(grid=_disc(16, 128)), "LV")
        assert abs(stats.area - np.pi * 256) <= 0.05 * np.pi * 256
        assert 0.88 <= stats.roundness <= 1.02
        assert stats.eccentricity < 0.15
        assert stats.solidity > 0.95

        yy, xx = np.mgrid[:128, :128]
        ellipse = (((xx + 0.5 - 64) / 24) ** 2 + ((yy + 0.5 - 64) / 12) ** 2 <= 1)
        e_stats = shape_stats(LabelMask(grid=ellipse.astype(np.uint8)), "LV")
        assert e_stats.eccentricity == pytest.approx(np.sqrt(1 - 0.25), abs=0.05)

        # KS statistic equals the brute-force sup over pooled thresholds
        rng = np.random.default_rng(5)
        for _ in range(50):
            n_a, n_b = rng.integers(2, 13, size=2)
            a = rng.integers(0, 6, size=n_a).astype(float)
            b = rng.integers(0, 6, size=n_b).astype(float)
            expected = max(
                abs(np.mean(a <= t) - np.mean(b <= t)) for t in np.concatenate([a, b])
            )
            assert ks_two_sample(a, b).d == expected

        # unit shift of a standard normal: D -> 2*Phi(0.5) - 1
        rng = np.random.default_rng(0)
        res = ks_two_sample(rng.standard_normal(1000), rng.standard_normal(1000) + 1.0)
        assert res.d == pytest.approx(0.3829, abs=0.08)
        assert res.p_value < 1e-6


# --- 5: segmentation metrics + quality gate ------------------------------------


@pytest.mark.slow
def test_criterion_5_segmentation():
    with criterion(5, "segmentation metrics and quality gate"):
        rng = np.random.default_rng(0)
        mask = LabelMask(grid=rng.integers(0, 4, (24, 24)).astype(np.uint8))
        same = overlap_metrics(mask, mask)
        assert all(v == 1.0 for v in same.dice.values())
        assert all(v == 1.0 for v in same.iou.values())
        assert same.mean_dice == 1.0 and same.mean_iou == 1.0
        for _ in range(10):
            pred = LabelMask(grid=rng.integers(0, 4, (24, 24)).astype(np.uint8))
            ovm = overlap_metrics(pred, mask)
            for name, d in ovm.dice.items():
                if d is not None:
                    assert ovm.iou[name] == pytest.approx(d / (2.0 - d), abs=1e-12)

        # 2x2 square against itself shifted by one pixel
        a = np.zeros((8, 8), np.uint8)
        a[2:4, 2:4] = 1
        b = np.zeros((8, 8), np.uint8)
        b[2:4, 3:5] = 1
        shifted = overlap_metrics(LabelMask(grid=a), LabelMask(grid=b))
        assert shifted.dice["LV"] == pytest.approx(0.5)
        assert shifted.iou["LV"] == pytest.approx(1.0 / 3.0, abs=1e-12)

        # exact-Euclidean surface distances match the all-pairs brute force
        checked = 0
        for seed in range(20):
            r = np.random.default_rng(seed)
            pred = LabelMask(grid=r.integers(0, 4, (12, 12)).astype(np.uint8))
            gt = LabelMask(grid=r.integers(0, 4, (12, 12)).astype(np.uint8))
            sf = surface_metrics(pred, gt, spacing=(1, 1))
            for cls, name in ((1, "LV"), (2, "MYO"), (3, "RV")):
                if sf.hd95[name] is None:
                    continue
                pb = np.argwhere(boundary_pixels(pred.grid == cls))
                gb = np.argwhere(boundary_pixels(gt.grid == cls))
                d_pg = [np.sqrt(((p - gb) ** 2).sum(axis=1)).min() for p in pb]
                d_gp = [np.sqrt(((g - pb) ** 2).sum(axis=1)).min() for g in gb]
                pooled = np.array(d_pg + d_gp, dtype=np.float64)
                assert sf.hd95[name] == float(np.percentile(pooled, 95))
                assert sf.asd[name] == pytest.approx(float(pooled.mean()), rel=1e-12)
                checked += 1
        assert checked >= 20

        # a segmenter trained on real domain-A phantoms clears the quality bar
        ds = build_dataset(PhantomConfig(counts={"A": 200, "B": 200}, seed=21))
        train_a = [it for it in ds.split("train") if it.domain == "A"]
        test_a = [it for it in ds.split("test") if it.domain == "A"]
        result = train_segmenter(TrainingSetup(name="RealA"), train_a, SegTrainConfig(seed=0))
        report = evaluate_cross({"RealA": result.params}, {"A": test_a})
        assert report.row("RealA", "A").dice >= 0.85


# --- 6: cross-domain utility ordering -------------------------------------------


def _utility_pair(seed, root):
    config = config_from_mapping(
        {
            "seed": seed,
            "data": {"counts": {"A": 200, "B": 200}},
            "evaluation": {
                "fidelity": False,
                "shape": False,
                "privacy": False,
                "utility_setups": ["RealA", "FullSyn-ddpm"],
            },
        }
    )
    pipeline = Pipeline(config, out_dir=root / f"seed{seed}")
    pipeline.gen_data()
    pipeline.train_mask()
    pipeline.train_image("ddpm")
    pipeline.sample()
    report = pipeline.eval_utility()
    return (
        report.value("utility", "real", "RealA:testA", "dice_mean"),
        report.value("utility", "ddpm", "FullSyn-ddpm:testA", "dice_mean"),
    )


@pytest.mark.slow
def test_criterion_6_cross_domain_utility(tmp_path):
    with criterion(6, "cross-domain utility ordering"):
        real, synth = [], []
        for seed in range(3):
            dice_real, dice_synth = _utility_pair(seed, tmp_path)
            real.append(dice_real)
            synth.append(dice_synth)
        med_real = statistics.median(real)
        med_synth = statistics.median(synth)
        print(f"median dice: RealA {med_real:.4f}  FullSyn-ddpm {med_synth:.4f}")
        assert med_real >= med_synth
        assert med_synth >= med_real - 0.10


# --- 7: privacy ------------------------------------------------------------------


def test_criterion_7_privacy():
    with criterion(7, "privacy auditing"):
        # AUC equals brute-force pairwise win counting, ties at half credit
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = rng.integers(0, 5, rng.integers(1, 20)).astype(float)
            n = rng.integers(0, 5, rng.integers(1, 20)).astype(float)
            wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in m for b in n)
            assert roc_auc(m, n) == wins / (len(m) * len(n))
        assert roc_auc([0.7, 0.3], [0.5, 0.1]) == 0.75

        # a planted training-set copy is flagged with d1 = 0 and tiny NNDR
        pool = build_dataset(
            PhantomConfig(counts={"A": 40}, split_fractions=(1.0, 0.0, 0.0), seed=13)
        ).items
        train_imgs = [it.image for it in pool[:20]]
        synth = [it.image for it in pool[20:25]]
        synth[2] = train_imgs[7]
        matches = nearest_neighbors(synth, train_imgs, "L2")
        assert matches[2].d1 == 0.0
        assert matches[2].d1 / matches[2].d2 < 0.05
        stats = nndr_stats(matches, tau_copy=0.01 * train_self_scale(train_imgs))
        assert 2 in stats.copy_flags

        # membership inference nulls at 0.5 for an untrained model (100/group,
        # three init seeds): the zero-initialized head scores every image
        # identically, so the tie convention lands exactly on chance level
        items = build_dataset(
            PhantomConfig(counts={"A": 200}, split_fractions=(1.0, 0.0, 0.0), seed=9)
        ).items
        cfg = DiffusionTrainConfig(widths=(8, 16, 32))
        spec = unet_spec_for_role("image_generator", cfg)
        schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        for init_seed in range(3):
            torch.manual_seed(init_seed)
            params = ModelParams.from_module(
                UNet(spec), spec.to_dict(), {"role": "image_generator"}
            )
            res = run_mia(
                params, items[:100], items[100:200],
                schedule=schedule, repeats=2, seed=init_seed,
            )
            assert 0.45 <= res.auc <= 0.55

        # positive control: an overfit model leaks membership
        x0 = np.stack([it.image.grid for it in pool[:8]])[:, None]
        cond = np.stack([encode_mask_onehot(it.mask).onehot for it in pool[:8]])
        overfit = train(
            "image_generator",
            (x0, cond),
            DiffusionTrainConfig(epochs=300, batch_size=8, seed=0),
        )
        res = run_mia(
            overfit.params, pool[:8], pool[8:40],
            schedule=make_schedule(1000, 1e-4, 0.02), seed=0,
        )
        assert res.auc > 0.7


# --- 8: full pipeline ---------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_full_pipeline(tmp_path):
    with criterion(8, "full pipeline determinism and coverage"):
        config_path = tmp_path / "quickstart.toml"
        write_quickstart(config_path)
        for run in ("run1", "run2"):
            code = run_command(
                ["all", "--config", str(config_path), "--out", str(tmp_path / run)]
            )
            assert code == 0
        first = MetricReport.load_json(tmp_path / "run1" / "report" / "metrics.json")
        second = MetricReport.load_json(tmp_path / "run2" / "report" / "metrics.json")
        for axis in ("fidelity", "shape", "utility", "privacy"):
            for generator in ("ddpm", "ldm", "fm"):
                assert first.filter(axis=axis, generator=generator), (axis, generator)
        assert first == second
        csv1 = (tmp_path / "run1" / "report" / "metrics.csv").read_bytes()
        csv2 = (tmp_path / "run2" / "report" / "metrics.csv").read_bytes()
        assert csv1 == csv2
