import numpy as np
import pytest
import torch
from torch import nn

from cmrbench.backbone import ModelParams, UNet, UNetSpec, encode_mask_onehot
from cmrbench.core import Dataset, DatasetItem, Image, LabelMask
from cmrbench.ddpm import (
    DiffusionTrainConfig,
    NoiseSchedule,
    ddpm_loss,
    decode_mask,
    forward_sample,
    make_batch,
    make_schedule,
    posterior_mean,
    reverse_step,
    sample_loop,
    train,
)
from cmrbench.errors import ConfigError, NonFiniteLossError


class OracleEps(nn.Module):
    """Returns a fixed tensor: stands in for a perfect noise predictor."""

    def __init__(self, eps):
        super().__init__()
        self.eps = eps

    def forward(self, x, t, cond=None):
        return self.eps


class ZeroNet(nn.Module):
    def forward(self, x, t, cond=None):
        return torch.zeros_like(x)


def toy_dataset(n=8, size=8, seed=0):
    """Tiny two-valued images with random label masks."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        img = np.where(rng.random((size, size)) < 0.5, -0.8, 0.8).astype(np.float32)
        mask = rng.integers(0, 4, size=(size, size)).astype(np.uint8)
        items.append(
            DatasetItem(
                image=Image(grid=img),
                mask=LabelMask(grid=mask),
                subject_id=i,
                domain="A",
                split="train",
            )
        )
    return Dataset(items=items, provenance={"seed": seed})


# --- schedule ---------------------------------------------------------------


def test_schedule_single_step():
    sched = make_schedule(T=1, beta_start=0.01, beta_end=0.01)
    assert sched.alpha_bar(1) == pytest.approx(0.99, abs=1e-12)


def test_schedule_constant_beta_product():
    sched = make_schedule(T=100, beta_start=0.01, beta_end=0.01)
    assert sched.alpha_bar(100) == pytest.approx(0.99**100, rel=1e-12)
    assert sched.alpha_bar(100) == pytest.approx(0.3660, abs=1e-4)


def test_schedule_monotone_and_identity():
    sched = make_schedule(T=1000, beta_start=1e-4, beta_end=0.02)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert np.allclose(sched.alpha_bars[1:], sched.alpha_bars[:-1] * sched.alphas[1:])
    assert sched.alpha_bars[-1] < sched.alpha_bars[0]


def test_schedule_invalid():
    with pytest.raises(ConfigError):
        make_schedule(T=0)
    with pytest.raises(ConfigError):
        make_schedule(beta_start=0.0)
    with pytest.raises(ConfigError):
        make_schedule(beta_start=0.5, beta_end=0.1)
    with pytest.raises(ConfigError):
        make_schedule(beta_end=1.0)


# --- forward corruption ------------------------------------------------------


def test_forward_sample_zero_noise():
    sched = make_schedule(T=10, beta_start=0.01, beta_end=0.1)
    x0 = np.full((2, 1, 4, 4), 2.0)
    xt = forward_sample(x0, np.array([3, 7]), np.zeros_like(x0), sched)
    assert np.allclose(xt[0], np.sqrt(sched.alpha_bar(3)) * 2.0)
    assert np.allclose(xt[1], np.sqrt(sched.alpha_bar(7)) * 2.0)


def test_forward_sample_moments():
    sched = make_schedule(T=100, beta_start=1e-3, beta_end=0.05)
    t = 40
    rng = np.random.default_rng(123)
    eps = rng.standard_normal(10_000)
    xt = forward_sample(np.zeros(10_000), np.full(10_000, t), eps, sched)
    target_var = 1.0 - sched.alpha_bar(t)
    se_mean = np.sqrt(target_var / 10_000)
    se_var = target_var * np.sqrt(2.0 / 9_999)
    assert abs(xt.mean()) < 3 * se_mean
    assert abs(xt.var() - target_var) < 3 * se_var


def test_forward_sample_matches_markov_chain():
    # iterate q(x_t | x_{t-1}) = N(sqrt(1-b_t) x_{t-1}, b_t) for t=1..50 and
    # compare the first two moments against the closed form
    sched = make_schedule(T=50, beta_start=1e-4, beta_end=0.02)
    rng = np.random.default_rng(7)
    n = 50_000
    x = np.full(n, 1.0)
    for t in range(1, 51):
        b = sched.beta(t)
        x = np.sqrt(1.0 - b) * x + np.sqrt(b) * rng.standard_normal(n)
    closed_mean = np.sqrt(sched.alpha_bar(50)) * 1.0
    closed_var = 1.0 - sched.alpha_bar(50)
    assert abs(x.mean() - closed_mean) / closed_mean < 0.01
    assert abs(x.var() - closed_var) / closed_var < 0.01


def test_forward_sample_step_out_of_range():
    sched = make_schedule(T=10, beta_start=0.01, beta_end=0.1)
    x0 = np.zeros((1, 4, 4))
    with pytest.raises(IndexError):
        forward_sample(x0, 0, x0, sched)
    with pytest.raises(IndexError):
        forward_sample(x0, 11, x0, sched)


# --- loss --------------------------------------------------------------------


def test_loss_zero_for_oracle():
    sched = make_schedule(T=20, beta_start=0.01, beta_end=0.1)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 1, 8, 8)).astype(np.float32)
    batch = make_batch(x0, sched, rng)
    loss = ddpm_loss(OracleEps(batch.eps), batch, sched)
    assert float(loss) == 0.0


def test_loss_near_one_for_zero_model():
    sched = make_schedule(T=20, beta_start=0.01, beta_end=0.1)
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((32, 1, 16, 16)).astype(np.float32)
    batch = make_batch(x0, sched, rng)
    loss = float(ddpm_loss(ZeroNet(), batch, sched))
    assert abs(loss - 1.0) < 0.05


def test_loss_deterministic():
    sched = make_schedule(T=20, beta_start=0.01, beta_end=0.1)
    x0 = np.random.default_rng(2).standard_normal((4, 1, 8, 8)).astype(np.float32)
    losses = []
    for _ in range(2):
        batch = make_batch(x0, sched, np.random.default_rng(42))
        losses.append(float(ddpm_loss(ZeroNet(), batch, sched)))
    assert losses[0] == losses[1]


# --- reverse process ---------------------------------------------------------


def scalar_schedule():
    # two steps engineered so that alpha_2 = 0.99 and alpha_bar_2 = 0.9
    return NoiseSchedule(betas=np.array([1.0 - 0.9 / 0.99, 0.01]))


def test_posterior_mean_scalar_value():
    sched = scalar_schedule()
    assert sched.alpha(2) == pytest.approx(0.99, abs=1e-12)
    assert sched.alpha_bar(2) == pytest.approx(0.9, abs=1e-12)
    mu = posterior_mean(1.0, 0.5, 2, sched)
    assert mu == pytest.approx(0.98915, abs=1e-5)


def test_reverse_step_final_step_adds_no_noise():
    sched = make_schedule(T=5, beta_start=0.01, beta_end=0.1)
    x = torch.full((1, 1, 4, 4), 0.7)
    eps_hat = torch.full((1, 1, 4, 4), 0.2)
    out = reverse_step(OracleEps(eps_hat), x, 1, None, sched, np.random.default_rng(0))
    expected = posterior_mean(x.numpy(), eps_hat.numpy(), 1, sched)
    assert np.allclose(out.numpy(), expected)


def test_reverse_step_recovers_x0_at_t1():
    sched = make_schedule(T=5, beta_start=0.01, beta_end=0.1)
    x0 = torch.full((1, 1, 4, 4), 0.37)
    eps = torch.from_numpy(
        np.random.default_rng(3).standard_normal((1, 1, 4, 4)).astype(np.float32)
    )
    x1 = forward_sample(x0, 1, eps, sched).to(torch.float32)
    out = reverse_step(OracleEps(eps), x1, 1, None, sched, np.random.default_rng(0))
    assert torch.allclose(out, x0, atol=1e-6)


def test_reverse_step_single_step_algebra():
    # corrupt to t=2 with known noise, reverse with the oracle predictor and
    # z=0 (checked against the hand-evaluated posterior-mean expression)
    sched = scalar_schedule()
    x0, eps = 2.0, 0.3
    x2 = np.sqrt(0.9) * x0 + np.sqrt(0.1) * eps
    expected = (x2 - 0.01 / np.sqrt(0.1) * 0.3) / np.sqrt(0.99)
    mu = posterior_mean(x2, eps, 2, sched)
    assert mu == pytest.approx(expected, abs=1e-12)
    # remainder (sqrt(1-ab) - b/sqrt(1-ab)) * eps / sqrt(alpha) = 0.08581163
    assert mu == pytest.approx(np.sqrt(0.9 / 0.99) * x0 + 0.08581163, abs=1e-6)


def test_sample_loop_deterministic():
    spec = UNetSpec(
        in_channels=1,
        out_channels=1,
        widths=(8, 16),
        blocks_per_level=1,
        attention_levels=(),
        conditioning_mode="none",
    )
    torch.manual_seed(0)
    net = UNet(spec)
    with torch.no_grad():
        for p in net.parameters():
            p.normal_(0.0, 0.05)
    sched = make_schedule(T=5, beta_start=0.01, beta_end=0.1)
    s1 = sample_loop(net, None, sched, np.random.default_rng(9), (2, 1, 8, 8))
    s2 = sample_loop(net, None, sched, np.random.default_rng(9), (2, 1, 8, 8))
    assert np.array_equal(s1, s2)


def test_sample_loop_snapshot_count():
    sched = make_schedule(T=1000, beta_start=1e-4, beta_end=0.02)
    out, snaps = sample_loop(
        ZeroNet(), None, sched, np.random.default_rng(0), (1, 1, 8, 8), record_every=200
    )
    assert len(snaps) == 6
    assert np.array_equal(snaps[-1], out)


# --- mask decode -------------------------------------------------------------


def test_decode_mask_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(10):
        mask = LabelMask(grid=rng.integers(0, 4, size=(12, 12)).astype(np.uint8))
        assert np.array_equal(decode_mask(encode_mask_onehot(mask).onehot).grid, mask.grid)


def test_decode_mask_argmax_and_ties():
    x = np.zeros((4, 1, 1), dtype=np.float32)
    x[:, 0, 0] = [0.1, 0.9, -0.5, 0.2]
    assert decode_mask(x).grid[0, 0] == 1
    x[:, 0, 0] = [1.0, 1.0, -1.0, -1.0]
    assert decode_mask(x).grid[0, 0] == 0


# --- training ----------------------------------------------------------------

TOY_CONFIG = DiffusionTrainConfig(
    epochs=2,
    batch_size=4,
    lr=1e-3,
    seed=1,
    T=50,
    widths=(8, 16),
    blocks_per_level=1,
    attention_levels=(),
)


def test_train_rejects_bad_config():
    ds = toy_dataset()
    with pytest.raises(ConfigError):
        train("volume_generator", ds, TOY_CONFIG)
    bad = DiffusionTrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        train("mask_generator", ds, bad)


def test_train_deterministic_loss_curves():
    ds = toy_dataset(n=4)
    r1 = train("image_generator", ds, TOY_CONFIG)
    r2 = train("image_generator", ds, TOY_CONFIG)
    assert r1.step_losses == r2.step_losses
    for k in r1.params.arrays:
        assert np.array_equal(r1.params.arrays[k], r2.params.arrays[k])


def test_train_nonfinite_loss_aborts():
    ds = toy_dataset(n=4)
    x0 = np.stack([it.image.grid for it in ds.items])[:, None]
    x0[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError):
        train("mask_generator", (x0.repeat(4, axis=1), None), TOY_CONFIG)


@pytest.mark.slow
def test_train_single_batch_overfit():
    rng = np.random.default_rng(0)
    x0 = np.where(rng.random((4, 1, 8, 8)) < 0.5, -0.8, 0.8).astype(np.float32)
    config = DiffusionTrainConfig(
        epochs=500,
        batch_size=4,
        lr=3e-3,
        seed=3,
        T=100,
        beta_start=0.01,
        beta_end=0.2,
        widths=(16, 32),
        blocks_per_level=1,
        attention_levels=(),
    )
    result = train("image_generator", (x0, np.zeros((4, 4, 8, 8), dtype=np.float32)), config)
    assert np.mean([l for _, _, l in result.step_losses[-20:]]) < 0.05


@pytest.mark.slow
def test_train_loss_decreases():
    ds = toy_dataset(n=48, size=16, seed=4)
    config = DiffusionTrainConfig(
        epochs=15,
        batch_size=16,
        lr=1e-3,
        seed=5,
        T=200,
        widths=(8, 16),
        blocks_per_level=1,
        attention_levels=(),
    )
    result = train("image_generator", ds, config)
    assert result.epoch_losses[-1] < result.epoch_losses[0]
