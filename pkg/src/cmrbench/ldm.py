"""Latent diffusion: VQ autoencoder + diffusion in the compressed space.

A small vector-quantized autoencoder compresses images by a configurable
factor (default 8, so 32x32 images become 4x4 latents with 4 channels).
Diffusion then runs on the continuous (pre-quantization) latents, scaled
to unit variance, with the mask conditioning average-pooled to latent
resolution and injected through SPADE modulation. The trained autoencoder
is frozen: the latent-diffusion checkpoint records the autoencoder's
content hash, and generation refuses mismatched pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from . import ddpm
from .backbone import (
    ModelParams,
    ResBlock,
    UNetSpec,
    encode_mask_onehot,
    module_from_params,
    register_network_kind,
    _groups,
)
from .core import Dataset, Image, LabelMask, config_hash, derive_seed
from .errors import (
    ConfigError,
    DimensionError,
    NonFiniteLossError,
    ProvenanceError,
    ShapeError,
)

# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------


@dataclass
class AESpec:
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 48, 64)
    latent_channels: int = 4
    codebook_size: int = 128
    factor: int = 8

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        n_down = int(round(math.log2(self.factor)))
        if 2**n_down != self.factor:
            raise ConfigError(f"compression factor must be a power of 2, got {self.factor}")
        if len(self.widths) != n_down + 1:
            raise ConfigError(
                f"need {n_down + 1} widths for factor {self.factor}, got {len(self.widths)}"
            )
        if self.codebook_size < 2:
            raise ConfigError("codebook needs at least 2 entries")

    @property
    def n_down(self) -> int:
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "vqvae"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AESpec":
        d = {k: v for k, v in d.items() if k != "kind"}
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class VQVAE(nn.Module):
    def __init__(self, spec: AESpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        enc = [nn.Conv2d(spec.in_channels, w[0], 3, padding=1)]
        for i in range(spec.n_down):
            enc.append(ResBlock(w[i], w[i]))
            enc.append(nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1))
        enc.append(ResBlock(w[-1], w[-1]))
        enc.append(nn.GroupNorm(_groups(w[-1]), w[-1]))
        enc.append(nn.SiLU())
        enc.append(nn.Conv2d(w[-1], spec.latent_channels, 1))
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(spec.latent_channels, w[-1], 1), ResBlock(w[-1], w[-1])]
        for i in reversed(range(spec.n_down)):
            dec.append(nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2))
            dec.append(ResBlock(w[i], w[i]))
        dec.append(nn.GroupNorm(_groups(w[0]), w[0]))
        dec.append(nn.SiLU())
        dec.append(nn.Conv2d(w[0], spec.in_channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

        self.codebook = nn.Parameter(torch.randn(spec.codebook_size, spec.latent_channels) * 0.5)
        self.register_buffer("usage", torch.zeros(spec.codebook_size, dtype=torch.long))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.spec.factor or x.shape[-2] % self.spec.factor:
            raise ShapeError(
                f"image size {tuple(x.shape[-2:])} not divisible by factor {self.spec.factor}"
            )
        return self.encoder(x)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        if z_q.shape[1] != self.spec.latent_channels:
            raise ShapeError(
                f"latent has {z_q.shape[1]} channels, spec says {self.spec.latent_channels}"
            )
        return self.decoder(z_q)

    def forward(self, x: torch.Tensor):
        z = self.encode(x)
        z_q, indices, cb_loss, commit_loss = vq_quantize(z, self.codebook)
        if self.training:
            self.usage += torch.bincount(
                indices.reshape(-1), minlength=self.spec.codebook_size
            )
        recon = self.decode(z_q)
        return recon, z, z_q, indices, cb_loss, commit_loss

    def reset_usage(self) -> None:
        self.usage.zero_()


register_network_kind("vqvae", lambda spec: VQVAE(AESpec.from_dict(spec)))


class _StraightThrough(torch.autograd.Function):
    """Forward emits the quantized values exactly; backward is identity to z.

    The usual ``z + (z_q - z).detach()`` trick leaves the output one ulp away
    from the codebook rows, which breaks exact idempotence of quantization.
    """

    @staticmethod
    def forward(ctx, z, hard):
        return hard

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def vq_quantize(z: torch.Tensor, codebook: torch.Tensor):
    """Snap each spatial vector to its nearest codebook entry.

    Returns (z_q, indices, codebook_loss, commitment_loss). Gradients pass
    straight through the quantization (dz_q/dz treated as identity). Ties
    resolve to the lowest codebook index.
    """
    if z.shape[1] != codebook.shape[1]:
        raise DimensionError(
            f"latent channels {z.shape[1]} != codebook dim {codebook.shape[1]}"
        )
    b, c, h, w = z.shape
    flat = z.permute(0, 2, 3, 1).reshape(-1, c)
    dists = torch.cdist(flat, codebook)
    indices = torch.argmin(dists, dim=1)
    hard = codebook[indices].reshape(b, h, w, c).permute(0, 3, 1, 2)
    codebook_loss = torch.mean((z.detach() - hard) ** 2)
    commitment_loss = torch.mean((z - hard.detach()) ** 2)
    z_q = _StraightThrough.apply(z, hard.detach())
    return z_q, indices.reshape(b, h, w), codebook_loss, commitment_loss


@dataclass
class AELossParts:
    reconstruction: float
    codebook: float
    commitment: float
    total: float


def autoencoder_loss(model, images: torch.Tensor, beta_c: float = 0.25):
    """Differentiable total plus the detached component breakdown."""
    net = model if isinstance(model, nn.Module) else module_from_params(model)
    recon, _, _, _, cb_loss, commit_loss = net(images)
    rec = torch.mean((recon - images) ** 2)
    total = rec + cb_loss + beta_c * commit_loss
    parts = AELossParts(
        reconstruction=float(rec.detach()), codebook=float(cb_loss.detach()),
        commitment=float(commit_loss.detach()), total=float(total.detach()),
    )
    return total, parts


def ae_encode(params: Union[ModelParams, VQVAE], image: Image) -> np.ndarray:
    """Continuous (pre-quantization) latent of one image, shape (C_z, h, w)."""
    net = params if isinstance(params, nn.Module) else module_from_params(params)
    x = torch.from_numpy(np.asarray(image.grid, dtype=np.float32))[None, None]
    with torch.no_grad():
        z = net.encode(x)
    return z[0].numpy()


def ae_decode(params: Union[ModelParams, VQVAE], z: np.ndarray) -> Image:
    net = params if isinstance(params, nn.Module) else module_from_params(params)
    zt = torch.from_numpy(np.asarray(z, dtype=np.float32))
    if zt.dim() == 3:
        zt = zt[None]
    with torch.no_grad():
        x = net.decode(zt)
    return Image(grid=x[0, 0].numpy())


# ---------------------------------------------------------------------------
# autoencoder training
# ---------------------------------------------------------------------------


@dataclass
class AETrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    beta_c: float = 0.25
    dead_code_fraction: float = 0.001  # usage below this share of assignments
    widths: tuple = (16, 32, 48, 64)
    latent_channels: int = 4
    codebook_size: int = 128
    factor: int = 8

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AETrainResult:
    params: ModelParams
    step_losses: list
    epoch_losses: list
    reseed_events: list  # (epoch, number of dead codes reseeded)


def train_autoencoder(
    dataset: Union[Dataset, np.ndarray], config: AETrainConfig, split: str = "train"
) -> AETrainResult:
    if config.epochs < 1 or config.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    if isinstance(dataset, Dataset):
        items = dataset.split(split)
        if not items:
            raise ConfigError(f"no items in split {split!r}")
        images = np.stack([it.image.grid for it in items])[:, None]
    else:
        images = np.asarray(dataset, dtype=np.float32)
    n = images.shape[0]

    spec = AESpec(
        in_channels=1,
        widths=config.widths,
        latent_channels=config.latent_channels,
        codebook_size=config.codebook_size,
        factor=config.factor,
    )
    torch.manual_seed(derive_seed(config.seed, "init:vqvae"))
    net = VQVAE(spec)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(derive_seed(config.seed, "batches:vqvae"))
    steps_per_epoch = math.ceil(n / config.batch_size)

    step_losses = []
    epoch_losses = []
    reseed_events = []
    for epoch in range(1, config.epochs + 1):
        net.reset_usage()
        order = rng.permutation(n)
        running = []
        last_z = None
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            x = torch.from_numpy(images[idx].astype(np.float32))
            total, parts = autoencoder_loss(net, x, beta_c=config.beta_c)
            if not torch.isfinite(total):
                raise NonFiniteLossError(f"non-finite AE loss at epoch {epoch} step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            with torch.no_grad():
                last_z = net.encode(x).permute(0, 2, 3, 1).reshape(-1, spec.latent_channels)
            step_losses.append(
                (epoch, step, parts.reconstruction, parts.codebook, parts.commitment)
            )
            running.append(parts.total)
        epoch_losses.append(float(np.mean(running)))
        n_reseeded = _reseed_dead_codes(net, config.dead_code_fraction, last_z, rng)
        if n_reseeded:
            reseed_events.append((epoch, n_reseeded))

    meta = {
        "epoch": config.epochs,
        "seed": config.seed,
        "config_hash": config_hash(config.to_dict()),
    }
    params = ModelParams.from_module(net, spec.to_dict(), meta)
    return AETrainResult(
        params=params,
        step_losses=step_losses,
        epoch_losses=epoch_losses,
        reseed_events=reseed_events,
    )


def _reseed_dead_codes(
    net: VQVAE, fraction: float, pool: Optional[torch.Tensor], rng: np.random.Generator
) -> int:
    """Replace rarely-used codebook entries with recent encoder outputs."""
    total = int(net.usage.sum())
    if total == 0 or pool is None or pool.shape[0] == 0:
        return 0
    dead = torch.nonzero(net.usage < fraction * total).reshape(-1)
    if dead.numel() == 0:
        return 0
    picks = rng.integers(0, pool.shape[0], size=dead.numel())
    with torch.no_grad():
        net.codebook[dead] = pool[torch.from_numpy(picks)]
    return int(dead.numel())


# ---------------------------------------------------------------------------
# latent diffusion
# ---------------------------------------------------------------------------


def pool_mask_to_latent(onehot: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool +/-1 one-hot channels to latent resolution (soft labels)."""
    t = torch.from_numpy(np.asarray(onehot, dtype=np.float32))
    squeeze = t.dim() == 3
    if squeeze:
        t = t[None]
    pooled = torch.nn.functional.avg_pool2d(t, factor)
    out = pooled.numpy()
    return out[0] if squeeze else out


@dataclass
class LatentDiffusionConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    widths: tuple = (32, 64)
    blocks_per_level: int = 1
    attention_levels: tuple = (1,)
    ema_decay: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def diffusion_config(self) -> ddpm.DiffusionTrainConfig:
        return ddpm.DiffusionTrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.seed,
            T=self.T,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            widths=self.widths,
            blocks_per_level=self.blocks_per_level,
            attention_levels=self.attention_levels,
            conditioning_mode="spade",
            ema_decay=self.ema_decay,
        )


def encode_dataset_latents(ae_params: ModelParams, dataset: Dataset, split: str = "train"):
    """Frozen-encoder latents and pooled mask conditioning for one split."""
    ae = module_from_params(ae_params)
    factor = ae.spec.factor
    items = dataset.split(split)
    if not items:
        raise ConfigError(f"no items in split {split!r}")
    images = torch.from_numpy(
        np.stack([it.image.grid for it in items]).astype(np.float32)
    )[:, None]
    with torch.no_grad():
        z = ae.encode(images).numpy()
    onehots = np.stack([encode_mask_onehot(it.mask).onehot for it in items])
    cond = pool_mask_to_latent(onehots, factor)
    return z, cond


def train_latent_diffusion(
    ae_params: ModelParams, dataset: Union[Dataset, tuple], config: LatentDiffusionConfig
) -> ddpm.TrainResult:
    """Diffusion over frozen-AE latents; reuses the pixel-space train loop."""
    ae_hash_before = ae_params.content_hash()
    if isinstance(dataset, Dataset):
        z, cond = encode_dataset_latents(ae_params, dataset)
    else:
        z, cond = dataset
    scale = float(np.std(z))
    if scale == 0:
        raise ConfigError("degenerate latents: zero variance")
    z_scaled = (z / scale).astype(np.float32)

    c_z = z.shape[1]
    spec = UNetSpec(
        in_channels=c_z,
        out_channels=c_z,
        widths=config.widths,
        blocks_per_level=config.blocks_per_level,
        attention_levels=config.attention_levels,
        conditioning_mode="spade",
    )
    result = ddpm.train_denoiser(
        z_scaled,
        cond,
        spec,
        config.diffusion_config(),
        extra_meta={
            "role": "latent_image_generator",
            "ae_hash": ae_hash_before,
            "latent_scale": scale,
        },
    )
    if ae_params.content_hash() != ae_hash_before:
        raise ProvenanceError("autoencoder parameters changed during diffusion training")
    return result


def generate_latent_image(
    ae_params: ModelParams,
    diffusion_params: ModelParams,
    mask: LabelMask,
    schedule: ddpm.NoiseSchedule,
    rng: np.random.Generator,
) -> Image:
    """Sample one latent trajectory for the given mask and decode it."""
    recorded = diffusion_params.meta.get("ae_hash")
    if recorded != ae_params.content_hash():
        raise ProvenanceError(
            "latent-diffusion checkpoint was trained against a different autoencoder"
        )
    ae = module_from_params(ae_params)
    factor = ae.spec.factor
    h, w = mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask size {(h, w)} not divisible by factor {factor}")
    net = module_from_params(diffusion_params)
    c_z = ae.spec.latent_channels
    cond = pool_mask_to_latent(encode_mask_onehot(mask).onehot, factor)

    z = ddpm.sample_loop(
        net, cond, schedule, rng, shape=(1, c_z, h // factor, w // factor)
    )
    z = torch.from_numpy(z * float(diffusion_params.meta["latent_scale"])).to(torch.float32)
    with torch.no_grad():
        z_q, _, _, _ = vq_quantize(z, ae.codebook)
        x = ae.decode(z_q)
    grid = np.clip(x[0, 0].numpy(), -1.0, 1.0)
    return Image(grid=grid, spacing=mask.spacing, intensity_range=(-1.0, 1.0))
