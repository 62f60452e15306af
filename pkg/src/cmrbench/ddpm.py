"""Pixel-space denoising diffusion: schedule, losses, ancestral sampling.

The same machinery is specialized twice: an unconditional four-channel
model that generates one-hot label masks, and a mask-conditioned
one-channel model that generates images. Steps are 1-based in all public
interfaces (t ranges over [1, T]); internally arrays are 0-indexed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .backbone import (
    ConditioningInput,
    ModelParams,
    UNet,
    UNetSpec,
    encode_mask_onehot,
    module_from_params,
)
from .core import Dataset, LabelMask, config_hash, derive_seed
from .errors import ConfigError, NonFiniteLossError

# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Linear-beta corruption schedule with precomputed running products."""

    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise ConfigError("betas must be a non-empty 1-D array")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.sigmas = np.sqrt(self.betas)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check(self, t) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(t))
        if np.any(ts < 1) or np.any(ts > self.T):
            raise IndexError(f"step {t} outside [1, {self.T}]")
        return ts - 1

    def beta(self, t):
        return self.betas[self._check(t)].squeeze()

    def alpha(self, t):
        return self.alphas[self._check(t)].squeeze()

    def alpha_bar(self, t):
        return self.alpha_bars[self._check(t)].squeeze()

    def sigma(self, t):
        return self.sigmas[self._check(t)].squeeze()


def make_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, T))


# ---------------------------------------------------------------------------
# forward corruption and loss
# ---------------------------------------------------------------------------


def _per_sample(values: np.ndarray, like) -> Union[np.ndarray, torch.Tensor]:
    """Reshape per-sample scalars for broadcasting against (B, C, H, W)."""
    arr = np.atleast_1d(values).astype(np.float64)
    if torch.is_tensor(like):
        out = torch.from_numpy(arr).to(dtype=like.dtype)
        if like.dim() > 1 and arr.size > 1:
            out = out.reshape(-1, *([1] * (like.dim() - 1)))
        return out
    if np.ndim(like) > 1 and arr.size > 1:
        return arr.reshape(-1, *([1] * (np.ndim(like) - 1)))
    return arr if arr.size > 1 else arr[0]


def forward_sample(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form corruption x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    ab = schedule.alpha_bars[schedule._check(t)]
    a = _per_sample(np.sqrt(ab), x0)
    b = _per_sample(np.sqrt(1.0 - ab), x0)
    return a * x0 + b * eps


@dataclass
class DiffusionBatch:
    x0: torch.Tensor
    t: np.ndarray
    eps: torch.Tensor
    cond: Optional[torch.Tensor] = None


def make_batch(
    x0: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    cond: Optional[np.ndarray] = None,
) -> DiffusionBatch:
    """Draw uniform steps and standard normal noise from the seeded stream."""
    n = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    return DiffusionBatch(
        x0=torch.from_numpy(np.asarray(x0, dtype=np.float32)),
        t=t,
        eps=torch.from_numpy(eps),
        cond=None if cond is None else torch.from_numpy(np.asarray(cond, dtype=np.float32)),
    )


def _resolve_model(model) -> nn.Module:
    if isinstance(model, ModelParams):
        return module_from_params(model)
    return model


def ddpm_loss(model, batch: DiffusionBatch, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between injected and predicted noise."""
    net = _resolve_model(model)
    x_t = forward_sample(batch.x0, batch.t, batch.eps, schedule)
    ts = torch.from_numpy(batch.t.astype(np.float32))
    eps_hat = net(x_t.to(torch.float32), ts, batch.cond)
    return torch.mean((batch.eps - eps_hat) ** 2)


# ---------------------------------------------------------------------------
# reverse process
# ---------------------------------------------------------------------------


def posterior_mean(x_t, eps_hat, t: int, schedule: NoiseSchedule):
    """mu = (x_t - beta_t/sqrt(1-ab_t) * eps_hat) / sqrt(alpha_t)."""
    idx = schedule._check(t)
    beta = schedule.betas[idx]
    alpha = schedule.alphas[idx]
    ab = schedule.alpha_bars[idx]
    coef = _per_sample(beta / np.sqrt(1.0 - ab), x_t)
    scale = _per_sample(1.0 / np.sqrt(alpha), x_t)
    return scale * (x_t - coef * eps_hat)


def reverse_step(
    model,
    x_t: torch.Tensor,
    t: int,
    cond: Optional[torch.Tensor],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> torch.Tensor:
    """One ancestral step; adds sigma_t z for t > 1, none at the final step."""
    net = _resolve_model(model)
    ts = torch.full((x_t.shape[0],), float(t))
    with torch.no_grad():
        eps_hat = net(x_t, ts, cond)
    mu = posterior_mean(x_t, eps_hat, t, schedule)
    if t <= 1:
        return mu
    sigma = float(schedule.sigma(t))
    z = torch.from_numpy(rng.standard_normal(tuple(x_t.shape)).astype(np.float32))
    return mu + sigma * z


def sample_loop(
    model,
    cond: Optional[np.ndarray],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    shape: tuple,
    record_every: Optional[int] = None,
) -> Union[np.ndarray, tuple[np.ndarray, list[np.ndarray]]]:
    """Full ancestral sampling from pure noise over steps T..1.

    ``shape`` is (B, C, H, W). With ``record_every=k`` a list of snapshots
    is returned alongside: the initial noise, every k-th intermediate, and
    the final sample.
    """
    net = _resolve_model(model)
    x = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))
    ct = None
    if cond is not None:
        onehot = cond.onehot if isinstance(cond, ConditioningInput) else np.asarray(cond)
        if onehot.ndim == 3:
            onehot = np.broadcast_to(onehot, (shape[0],) + onehot.shape)
        ct = torch.from_numpy(onehot.astype(np.float32, copy=True))
    snapshots = [x.numpy().copy()] if record_every else None
    for t in range(schedule.T, 0, -1):
        x = reverse_step(net, x, t, ct, schedule, rng)
        if record_every and (t - 1) % record_every == 0:
            snapshots.append(x.numpy().copy())
    out = x.numpy()
    if record_every:
        return out, snapshots
    return out


def decode_mask(x: np.ndarray, spacing: tuple[float, float] = (1.25, 1.25)) -> LabelMask:
    """Per-pixel argmax over 4 channels; ties go to the lowest class index."""
    arr = np.asarray(x)
    if arr.ndim != 3 or arr.shape[0] != 4:
        raise ConfigError(f"expected (4, H, W), got {arr.shape}")
    return LabelMask(grid=np.argmax(arr, axis=0).astype(np.uint8), spacing=spacing)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

MODEL_ROLES = ("mask_generator", "image_generator")


@dataclass
class DiffusionTrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    widths: tuple = (16, 32, 64)
    blocks_per_level: int = 1
    attention_levels: tuple = (2,)
    conditioning_mode: str = "concat"
    ema_decay: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    step_losses: list  # (epoch, step, loss) rows
    epoch_losses: list


def training_arrays(dataset: Dataset, role: str, split: str = "train"):
    """Stack the model inputs for one role: (x0, cond_or_None)."""
    items = dataset.split(split)
    if not items:
        raise ConfigError(f"no items in split {split!r}")
    onehots = np.stack([encode_mask_onehot(it.mask).onehot for it in items])
    if role == "mask_generator":
        return onehots, None
    images = np.stack([it.image.grid for it in items])[:, None]
    return images, onehots


def unet_spec_for_role(role: str, config: DiffusionTrainConfig) -> UNetSpec:
    if role == "mask_generator":
        return UNetSpec(
            in_channels=4,
            out_channels=4,
            widths=config.widths,
            blocks_per_level=config.blocks_per_level,
            attention_levels=config.attention_levels,
            conditioning_mode="none",
        )
    return UNetSpec(
        in_channels=1,
        out_channels=1,
        widths=config.widths,
        blocks_per_level=config.blocks_per_level,
        attention_levels=config.attention_levels,
        conditioning_mode=config.conditioning_mode,
    )


def train(
    role: str,
    dataset: Union[Dataset, tuple],
    config: DiffusionTrainConfig,
    split: str = "train",
) -> TrainResult:
    """Train a denoiser for one role; deterministic under (config, seed).

    ``dataset`` may be a phantom Dataset or a prebuilt ``(x0, cond)`` array
    pair (cond None for the unconditional role).
    """
    if role not in MODEL_ROLES:
        raise ConfigError(f"role must be one of {MODEL_ROLES}, got {role!r}")
    if isinstance(dataset, Dataset):
        x0, cond = training_arrays(dataset, role, split)
    else:
        x0, cond = dataset
    spec = unet_spec_for_role(role, config)
    return train_denoiser(x0, cond, spec, config, extra_meta={"role": role})


def train_denoiser(
    x0: np.ndarray,
    cond: Optional[np.ndarray],
    spec: UNetSpec,
    config: DiffusionTrainConfig,
    extra_meta: Optional[dict] = None,
) -> TrainResult:
    """Core denoiser training loop, shared by pixel and latent diffusion."""
    if config.epochs < 1 or config.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    x0 = np.asarray(x0, dtype=np.float32)
    n = x0.shape[0]
    if n == 0:
        raise ConfigError("empty training set")

    role = (extra_meta or {}).get("role", "denoiser")
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    torch.manual_seed(derive_seed(config.seed, f"init:{role}"))
    net = UNet(spec)
    net.train()
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(n / config.batch_size)
    cosine = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, config.epochs * steps_per_epoch)
    )
    rng = np.random.default_rng(derive_seed(config.seed, f"batches:{role}"))
    ema = _Ema(net, config.ema_decay) if config.ema_decay else None

    step_losses = []
    epoch_losses = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        running = []
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            batch = make_batch(
                x0[idx], schedule, rng, None if cond is None else cond[idx]
            )
            loss = ddpm_loss(net, batch, schedule)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(role={role}, lr={cosine.get_last_lr()[0]:.2e})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            cosine.step()
            if ema:
                ema.update(net)
            val = float(loss.detach())
            step_losses.append((epoch, step, val))
            running.append(val)
        epoch_losses.append(float(np.mean(running)))

    if ema:
        ema.copy_to(net)
    meta = {
        "epoch": config.epochs,
        "seed": config.seed,
        "config_hash": config_hash(config.to_dict()),
        "T": config.T,
    }
    meta.update(extra_meta or {})
    params = ModelParams.from_module(net, spec.to_dict(), meta)
    return TrainResult(params=params, step_losses=step_losses, epoch_losses=epoch_losses)


class _Ema:
    """Exponential moving average of parameters (optional stabilizer)."""

    def __init__(self, net: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in net.state_dict().items()}

    def update(self, net: nn.Module) -> None:
        for k, v in net.state_dict().items():
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1 - self.decay)
            else:
                self.shadow[k] = v.detach().clone()

    def copy_to(self, net: nn.Module) -> None:
        net.load_state_dict(self.shadow)
