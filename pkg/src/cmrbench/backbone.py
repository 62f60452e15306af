"""Conditional U-Net building blocks shared by all three generators.

One network class covers the four conditioning modes:

* ``concat``    — one-hot mask channels appended to the network input
* ``spade``     — mask channels appended *and* spatially-adaptive
                  modulation layers at every resolution level
* ``controlnet``— a side branch encodes the mask and injects additive
                  residuals into the skip connections and bottleneck;
                  its output projections start at zero so a fresh branch
                  is a no-op
* ``none``      — unconditional

Timestep embeddings use geometric frequencies 10000^-((k+1)/half) so that
even the two-dimensional embedding is injective over a thousand steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import N_CLASSES, LabelMask
from .errors import ConfigError, ShapeError

COND_CHANNELS = N_CLASSES
CONDITIONING_MODES = ("concat", "spade", "controlnet", "none")


# ---------------------------------------------------------------------------
# mask encoding and timestep embedding
# ---------------------------------------------------------------------------


@dataclass
class ConditioningInput:
    """One-hot mask scaled to {-1, +1}, channels-first (4, H, W)."""

    onehot: np.ndarray

    def __post_init__(self):
        self.onehot = np.ascontiguousarray(self.onehot, dtype=np.float32)
        if self.onehot.ndim != 3 or self.onehot.shape[0] != COND_CHANNELS:
            raise ShapeError(f"conditioning must be ({COND_CHANNELS}, H, W)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.onehot.shape[1:]

    def downsampled(self, factor: int) -> "ConditioningInput":
        """Nearest-neighbor subsampling; stays exactly one-hot in {-1,+1}."""
        return ConditioningInput(onehot=self.onehot[:, ::factor, ::factor].copy())


def encode_mask_onehot(mask: LabelMask) -> ConditioningInput:
    """Channel k is +1 where mask==k, else -1; argmax recovers the mask."""
    grid = mask.grid
    onehot = -np.ones((COND_CHANNELS,) + grid.shape, dtype=np.float32)
    for k in range(COND_CHANNELS):
        onehot[k][grid == k] = 1.0
    return ConditioningInput(onehot=onehot)


def decode_onehot(cond: ConditioningInput) -> np.ndarray:
    return np.argmax(cond.onehot, axis=0).astype(np.uint8)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps.

    Accepts a scalar (returns shape (dim,)) or a 1-D array (returns
    (len(t), dim)). Components are sin(t*f_k) for the first half and
    cos(t*f_k) for the second, f_k = 10000^-((k+1)/half).
    """
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 10000.0 ** (-(np.arange(1, half + 1)) / half)
    angles = ts[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if np.isscalar(t) or np.ndim(t) == 0:
        return emb[0]
    return emb


# ---------------------------------------------------------------------------
# network spec and parameter container
# ---------------------------------------------------------------------------


@dataclass
class UNetSpec:
    in_channels: int = 1
    out_channels: int = 1
    widths: tuple[int, ...] = (32, 64, 128)
    blocks_per_level: int = 2
    attention_levels: tuple[int, ...] = (2,)
    conditioning_mode: str = "concat"
    cond_channels: int = COND_CHANNELS

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        if not self.widths:
            raise ConfigError("widths must be non-empty")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ConfigError(
                f"conditioning_mode must be one of {CONDITIONING_MODES}, "
                f"got {self.conditioning_mode!r}"
            )
        if any(a >= len(self.widths) for a in self.attention_levels):
            raise ConfigError("attention level index out of range")

    @property
    def levels(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "unet"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        d = {k: v for k, v in d.items() if k != "kind"}
        for key in ("widths", "attention_levels"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelParams:
    """Named float32 parameter arrays plus the spec and training metadata."""

    arrays: dict
    spec: dict
    meta: dict = field(default_factory=dict)

    def content_hash(self) -> str:
        """SHA-256 over parameter names, shapes and raw bytes (meta excluded)."""
        import hashlib

        digest = hashlib.sha256()
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype=np.float32)
            digest.update(name.encode("utf-8"))
            digest.update(str(arr.shape).encode("utf-8"))
            digest.update(arr.tobytes())
        return digest.hexdigest()

    @classmethod
    def from_module(cls, module: nn.Module, spec: dict, meta: Optional[dict] = None):
        arrays = {
            name: tensor.detach().cpu().numpy().astype(np.float32)
            for name, tensor in module.state_dict().items()
        }
        return cls(arrays=arrays, spec=dict(spec), meta=dict(meta or {}))

    def load_into(self, module: nn.Module) -> nn.Module:
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.arrays.items()}
        module.load_state_dict(state)
        return module


def build_network(spec: dict) -> nn.Module:
    """Instantiate a network from its serialized spec dict."""
    kind = spec.get("kind")
    builder = _NETWORK_KINDS.get(kind)
    if builder is None:
        raise ConfigError(f"unknown network kind {kind!r}")
    return builder(spec)


_NETWORK_KINDS: dict = {}


def register_network_kind(kind: str, builder) -> None:
    _NETWORK_KINDS[kind] = builder


def module_from_params(params: ModelParams) -> nn.Module:
    net = build_network(params.spec)
    params.load_into(net)
    net.eval()
    return net


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class TimeMLP(nn.Module):
    """Maps raw sinusoidal embeddings to the shared conditioning width."""

    def __init__(self, base_dim: int, emb_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.net = nn.Sequential(
            nn.Linear(base_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        raw = timestep_embedding(t.detach().cpu().numpy().astype(np.float64), self.base_dim)
        raw_t = torch.from_numpy(np.atleast_2d(raw)).to(
            device=t.device, dtype=self.net[0].weight.dtype
        )
        return self.net(raw_t)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, h: torch.Tensor, emb: Optional[torch.Tensor] = None) -> torch.Tensor:
        out = self.conv1(torch.nn.functional.silu(self.norm1(h)))
        if self.emb_proj is not None and emb is not None:
            out = out + self.emb_proj(emb)[:, :, None, None]
        out = self.conv2(torch.nn.functional.silu(self.norm2(out)))
        return out + self.skip(h)


class SelfAttention2d(nn.Module):
    """Single-head spatial self-attention with a zero-initialized output."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = h.shape
        q, k, v = self.qkv(self.norm(h)).chunk(3, dim=1)
        q = q.reshape(b, c, hh * ww).transpose(1, 2)
        k = k.reshape(b, c, hh * ww)
        v = v.reshape(b, c, hh * ww).transpose(1, 2)
        attn = torch.softmax(q @ k / math.sqrt(c), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, hh, ww)
        return h + self.proj(out)


class SpadeLayer(nn.Module):
    """Spatially-adaptive modulation: (1 + dgamma(c)) * standardize(h) + beta(c).

    Standardization is per channel over spatial dims; channels whose spatial
    variance is below 1e-8 are defined to standardize to zero.
    """

    VAR_FLOOR = 1e-8

    def __init__(self, channels: int, cond_channels: int, hidden: int = 32):
        super().__init__()
        self.shared = nn.Sequential(nn.Conv2d(cond_channels, hidden, 3, padding=1), nn.SiLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.gamma.weight)
        nn.init.zeros_(self.gamma.bias)
        nn.init.zeros_(self.beta.weight)
        nn.init.zeros_(self.beta.bias)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-2:] != h.shape[-2:]:
            raise ShapeError(
                f"conditioning spatial size {tuple(cond.shape[-2:])} does not "
                f"match features {tuple(h.shape[-2:])}"
            )
        mean = h.mean(dim=(2, 3), keepdim=True)
        var = h.var(dim=(2, 3), keepdim=True, unbiased=False)
        normed = (h - mean) / torch.sqrt(var + 1e-12)
        normed = torch.where(var < self.VAR_FLOOR, torch.zeros_like(normed), normed)
        shared = self.shared(cond)
        return (1.0 + self.gamma(shared)) * normed + self.beta(shared)


def spade_modulate(
    h: torch.Tensor, cond: torch.Tensor, params: SpadeLayer
) -> torch.Tensor:
    """Functional form of SpadeLayer for a prebuilt parameter module."""
    return params(h, cond)


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------


class _Encoder(nn.Module):
    """Shared topology for the host encoder and the control branch."""

    def __init__(self, in_ch: int, spec: UNetSpec, emb_dim: int, with_spade: bool):
        super().__init__()
        self.spec = spec
        self.conv_in = nn.Conv2d(in_ch, spec.widths[0], 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.attns = nn.ModuleList()
        self.spades = nn.ModuleList() if with_spade else None
        ch = spec.widths[0]
        for i, w in enumerate(spec.widths):
            blocks = nn.ModuleList()
            for b in range(spec.blocks_per_level):
                blocks.append(ResBlock(ch if b == 0 else w, w, emb_dim))
            self.levels.append(blocks)
            self.attns.append(
                SelfAttention2d(w) if i in spec.attention_levels else nn.Identity()
            )
            if self.spades is not None:
                self.spades.append(SpadeLayer(ch, spec.cond_channels))
            self.downs.append(
                nn.Conv2d(w, spec.widths[i + 1], 3, stride=2, padding=1)
                if i < spec.levels - 1
                else nn.Identity()
            )
            ch = spec.widths[i + 1] if i < spec.levels - 1 else w
        w_last = spec.widths[-1]
        self.mid1 = ResBlock(w_last, w_last, emb_dim)
        self.mid_attn = SelfAttention2d(w_last)
        self.mid2 = ResBlock(w_last, w_last, emb_dim)

    def forward(self, h, emb, cond=None):
        """Returns (per-level skip features, bottleneck feature)."""
        h = self.conv_in(h)
        skips = []
        for i, blocks in enumerate(self.levels):
            if self.spades is not None:
                h = self.spades[i](h, _resize_cond(cond, h.shape[-2:]))
            for block in blocks:
                h = block(h, emb)
            h = self.attns[i](h)
            skips.append(h)
            h = self.downs[i](h)
        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)
        return skips, h


def _resize_cond(cond: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if cond.shape[-2:] == tuple(size):
        return cond
    return torch.nn.functional.interpolate(cond, size=size, mode="nearest")


class ControlBranch(nn.Module):
    """Mask-only encoder whose projected outputs start at exactly zero."""

    def __init__(self, spec: UNetSpec, emb_dim: int):
        super().__init__()
        self.encoder = _Encoder(spec.cond_channels, spec, emb_dim, with_spade=False)
        self.projections = nn.ModuleList(
            [nn.Conv2d(w, w, 1) for w in spec.widths]
            + [nn.Conv2d(spec.widths[-1], spec.widths[-1], 1)]
        )
        for proj in self.projections:
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)

    def forward(self, cond, emb):
        skips, mid = self.encoder(cond, emb)
        feats = skips + [mid]
        return [proj(f) for proj, f in zip(self.projections, feats)]


class UNet(nn.Module):
    """Conditional U-Net; see the module docstring for the four modes."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        mode = spec.conditioning_mode
        extra = spec.cond_channels if mode in ("concat", "spade") else 0
        emb_dim = 4 * spec.widths[0]
        self.time_mlp = TimeMLP(spec.widths[0], emb_dim)
        self.encoder = _Encoder(
            spec.in_channels + extra, spec, emb_dim, with_spade=(mode == "spade")
        )
        self.dec_levels = nn.ModuleList()
        self.dec_attns = nn.ModuleList()
        self.ups = nn.ModuleList()
        widths = spec.widths
        ch = widths[-1]
        for i in reversed(range(spec.levels)):
            w = widths[i]
            blocks = nn.ModuleList()
            for b in range(spec.blocks_per_level):
                blocks.append(ResBlock(ch + w if b == 0 else w, w, emb_dim))
            self.dec_levels.append(blocks)
            self.dec_attns.append(
                SelfAttention2d(w) if i in spec.attention_levels else nn.Identity()
            )
            self.ups.append(
                nn.ConvTranspose2d(w, widths[i - 1], 2, stride=2) if i > 0 else nn.Identity()
            )
            ch = widths[i - 1] if i > 0 else w
        self.out_norm = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.out_conv = nn.Conv2d(widths[0], spec.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        if mode == "controlnet":
            self.control = ControlBranch(spec, emb_dim)
            self._share_host_weights()
        else:
            self.control = None

    def _share_host_weights(self) -> None:
        """Copy host encoder weights into the branch where shapes match."""
        host = self.encoder.state_dict()
        branch = self.control.encoder.state_dict()
        copied = {
            k: host[k] for k in branch if k in host and host[k].shape == branch[k].shape
        }
        branch.update(copied)
        self.control.encoder.load_state_dict(branch)

    def control_residuals(self, cond: torch.Tensor, t: torch.Tensor) -> list:
        if self.control is None:
            raise ConfigError("network was not built in controlnet mode")
        emb = self.time_mlp(t)
        return self.control(cond, emb)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        cond: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        mode = self.spec.conditioning_mode
        stride = 2 ** (self.spec.levels - 1)
        if x.shape[-1] % stride != 0 or x.shape[-2] % stride != 0:
            raise ShapeError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {stride}"
            )
        if mode in ("concat", "spade"):
            if cond is None:
                raise ShapeError(f"mode {mode!r} requires conditioning input")
            if cond.shape[-2:] != x.shape[-2:]:
                raise ShapeError("conditioning spatial size must match input")
            h = torch.cat([x, cond], dim=1)
        else:
            h = x
        emb = self.time_mlp(t)
        skips, mid = self.encoder(h, emb, cond)

        if mode == "controlnet" and cond is not None:
            residuals = self.control(cond, emb)
            skips = [s + r for s, r in zip(skips, residuals[:-1])]
            mid = mid + residuals[-1]

        out = mid
        for j, blocks in enumerate(self.dec_levels):
            out = torch.cat([out, skips[-(j + 1)]], dim=1)
            for block in blocks:
                out = block(out, emb)
            out = self.dec_attns[j](out)
            out = self.ups[j](out)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(out)))


register_network_kind("unet", lambda spec: UNet(UNetSpec.from_dict(spec)))


# ---------------------------------------------------------------------------
# functional contract ops
# ---------------------------------------------------------------------------


def _as_batched_tensor(x: np.ndarray) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if t.dim() == 3:
        return t[None], True
    if t.dim() == 4:
        return t, False
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(t.shape)}")


def denoiser_forward(params: ModelParams, x, t, cond=None) -> np.ndarray:
    """Functional forward pass through a network described by ``params``."""
    net = module_from_params(params)
    xt, squeezed = _as_batched_tensor(x)
    ct = None
    if cond is not None:
        onehot = cond.onehot if isinstance(cond, ConditioningInput) else cond
        ct, _ = _as_batched_tensor(onehot)
        if ct.shape[0] != xt.shape[0]:
            ct = ct.expand(xt.shape[0], -1, -1, -1)
    ts = torch.atleast_1d(torch.as_tensor(t, dtype=torch.float32))
    if ts.shape[0] != xt.shape[0]:
        ts = ts.expand(xt.shape[0])
    with torch.no_grad():
        out = net(xt, ts, ct)
    out_np = out.numpy()
    return out_np[0] if squeezed else out_np


def controlnet_residuals(cond, t, params: ModelParams) -> list:
    """Multi-scale residual features of the mask branch (one per level + mid)."""
    net = module_from_params(params)
    onehot = cond.onehot if isinstance(cond, ConditioningInput) else cond
    ct, squeezed = _as_batched_tensor(onehot)
    ts = torch.atleast_1d(torch.as_tensor(t, dtype=torch.float32))
    if ts.shape[0] != ct.shape[0]:
        ts = ts.expand(ct.shape[0])
    with torch.no_grad():
        feats = net.control_residuals(ct, ts)
    return [f.numpy()[0] if squeezed else f.numpy() for f in feats]
