"""Fidelity metrics and the shared feature embedder.

Pixel level: SSIM / MS-SSIM / PSNR. Distribution level: FID and KID over
features from a small convolutional classifier trained on phantom
attributes (domain and LV-size bucket) — there is no pretrained
natural-image network at this scale, so FID/KID values are comparable only
across runs of this repo, never against published numbers. Perceptual:
LPIPS over the same embedder's intermediate layers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn
from scipy import ndimage

from .backbone import ModelParams, module_from_params, register_network_kind, _groups
from .core import Dataset, Image, config_hash, derive_seed
from .errors import (
    ConfigError,
    HashError,
    NonFiniteLossError,
    SampleSizeError,
    ScaleError,
    ShapeError,
    SingularityWarning,
)

# standard five-scale weights; truncated and renormalized when fewer fit
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _as_grid(x) -> np.ndarray:
    grid = x.grid if isinstance(x, Image) else np.asarray(x)
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {grid.shape}")
    return np.asarray(grid, dtype=np.float64)


def _gaussian_kernel(window: int, sigma: float = 1.5) -> np.ndarray:
    half = (window - 1) / 2
    x = np.arange(window) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _local_stats(a: np.ndarray, b: np.ndarray, window: int):
    """Gaussian-window means/variances/covariance, valid region only."""
    kernel = _gaussian_kernel(window)
    trim = (window - 1) // 2

    def smooth(img):
        out = ndimage.correlate(img, kernel, mode="constant")
        return out[trim : img.shape[0] - trim, trim : img.shape[1] - trim]

    mu_a, mu_b = smooth(a), smooth(b)
    s_aa = smooth(a * a) - mu_a * mu_a
    s_bb = smooth(b * b) - mu_b * mu_b
    s_ab = smooth(a * b) - mu_a * mu_b
    return mu_a, mu_b, s_aa, s_bb, s_ab


def _ssim_maps(a, b, window, K1, K2, data_range):
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ShapeError(f"image {a.shape} smaller than the {window}-pixel window")
    if data_range <= 0:
        raise ConfigError(f"data_range must be positive, got {data_range}")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b, s_aa, s_bb, s_ab = _local_stats(a, b, window)
    luminance = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    return luminance, cs


def ssim(a, b, window: int = 7, K1: float = 0.01, K2: float = 0.03,
         data_range: float = 2.0) -> float:
    """Mean local structural similarity; 1.0 iff the images are identical."""
    luminance, cs = _ssim_maps(_as_grid(a), _as_grid(b), window, K1, K2, data_range)
    return float(np.mean(luminance * cs))


def ms_ssim(a, b, scales: Optional[int] = None, weights: Optional[Sequence[float]] = None,
            window: int = 7, K1: float = 0.01, K2: float = 0.03,
            data_range: float = 2.0) -> float:
    """Multi-scale SSIM: contrast-structure across scales, luminance at the last.

    Each scale halves the resolution by 2x2 average pooling. With
    ``scales=None`` the count is auto-reduced so the window still fits at
    the coarsest scale; an explicit count that does not fit raises
    ScaleError. Weights default to the standard five, truncated and
    renormalized to sum 1.
    """
    ga, gb = _as_grid(a), _as_grid(b)
    max_fit = 0
    size = min(ga.shape)
    while size >= window and max_fit < len(MS_SSIM_WEIGHTS):
        max_fit += 1
        size //= 2
    if max_fit == 0:
        raise ScaleError(f"image {ga.shape} smaller than the {window}-pixel window")
    n = min(max_fit, len(MS_SSIM_WEIGHTS)) if scales is None else int(scales)
    if n < 1:
        raise ConfigError("need at least one scale")
    if n > max_fit:
        raise ScaleError(
            f"{n} scales need {window * 2 ** (n - 1)} pixels, image is {ga.shape}"
        )
    if weights is None:
        w = np.asarray(MS_SSIM_WEIGHTS[:n], dtype=np.float64)
        w = w / w.sum()
    else:
        w = np.asarray(list(weights), dtype=np.float64)
        if w.size != n:
            raise ConfigError(f"{n} scales but {w.size} weights")

    value = 1.0
    for level in range(n):
        luminance, cs = _ssim_maps(ga, gb, window, K1, K2, data_range)
        term = float(np.mean(luminance * cs)) if level == n - 1 else float(np.mean(cs))
        value *= max(term, 0.0) ** w[level]
        if level < n - 1:
            ga = _downsample2(ga)
            gb = _downsample2(gb)
    return float(value)


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2]) / 4.0


def psnr(a, b, data_range: float = 2.0, cap: float = 100.0) -> float:
    """10 log10(range^2 / MSE), clipped at ``cap`` so identical images stay finite."""
    ga, gb = _as_grid(a), _as_grid(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    if data_range <= 0:
        raise ConfigError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((ga - gb) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(min(10.0 * math.log10(data_range**2 / mse), cap))


# ---------------------------------------------------------------------------
# feature embedder
# ---------------------------------------------------------------------------


@dataclass
class EmbedderSpec:
    in_channels: int = 1
    widths: tuple = (8, 16, 32, 64)
    n_classes: int = 6

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ConfigError("embedder needs at least one conv block")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "embedder"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderSpec":
        d = {k: v for k, v in d.items() if k != "kind"}
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class EmbedderNet(nn.Module):
    """Strided conv classifier; block outputs double as LPIPS tap layers."""

    def __init__(self, spec: EmbedderSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        ch = spec.in_channels
        for w in spec.widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(ch, w, 3, stride=2, padding=1),
                    nn.GroupNorm(_groups(w), w),
                    nn.SiLU(),
                )
            )
            ch = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(spec.widths[-1], spec.n_classes)

    def taps(self, x: torch.Tensor) -> list:
        outs = []
        h = x
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return outs

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.taps(x)[-1].mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


register_network_kind("embedder", lambda spec: EmbedderNet(EmbedderSpec.from_dict(spec)))


@dataclass
class FeatureEmbedder:
    """Frozen trained embedder; every consumer re-checks the recorded hash."""

    params: ModelParams

    def __post_init__(self):
        self._module = None

    @property
    def feature_dim(self) -> int:
        return int(self.params.spec["widths"][-1])

    @property
    def frozen_hash(self) -> str:
        return self.params.meta["frozen_hash"]

    def check_frozen(self) -> None:
        if self.params.content_hash() != self.frozen_hash:
            raise HashError("embedder parameters changed after freezing")

    def module(self) -> EmbedderNet:
        if self._module is None:
            self.check_frozen()
            self._module = module_from_params(self.params)
        return self._module


@dataclass
class FeatureSet:
    features: np.ndarray  # (N, d)
    embedder_hash: Optional[str] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be (N, d), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ShapeError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _stack_images(images) -> torch.Tensor:
    grids = [np.asarray(im.grid if isinstance(im, Image) else im, dtype=np.float32)
             for im in images]
    shapes = {g.shape for g in grids}
    if len(shapes) != 1:
        raise ShapeError(f"images have mixed shapes: {sorted(shapes)}")
    return torch.from_numpy(np.stack(grids)[:, None])


def embed_features(embedder: FeatureEmbedder, images, batch_size: int = 64) -> FeatureSet:
    """Deterministic (N, d) features with the embedder hash stamped on."""
    embedder.check_frozen()
    net = embedder.module()
    x = _stack_images(images)
    rows = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            rows.append(net.features(x[start : start + batch_size]).numpy())
    return FeatureSet(features=np.concatenate(rows), embedder_hash=embedder.frozen_hash)


@dataclass
class EmbedderTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    widths: tuple = (8, 16, 32, 64)
    n_area_buckets: int = 3
    augment_noise: float = 0.02  # train-time additive noise sigma
    augment_flips: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def embedder_labels(dataset: Dataset, split: str, n_buckets: int):
    """Class = (domain index) x buckets + (LV-area bucket); thresholds from data."""
    items = dataset.split(split)
    if not items:
        raise ConfigError(f"no items in split {split!r}")
    domains = sorted({it.domain for it in items})
    areas = np.array([int(np.sum(it.mask.grid == 1)) for it in items], dtype=np.float64)
    qs = np.quantile(areas, np.linspace(0, 1, n_buckets + 1)[1:-1]) if n_buckets > 1 else []
    buckets = np.digitize(areas, qs)
    labels = np.array(
        [domains.index(it.domain) * n_buckets + b for it, b in zip(items, buckets)],
        dtype=np.int64,
    )
    return items, labels, {"domains": domains, "area_quantiles": [float(q) for q in qs]}


def train_embedder(dataset: Dataset, config: EmbedderTrainConfig,
                   split: str = "train") -> FeatureEmbedder:
    """Train the attribute classifier, then freeze it (hash recorded in meta)."""
    items, labels, label_info = embedder_labels(dataset, split, config.n_area_buckets)
    n_classes = len(label_info["domains"]) * config.n_area_buckets
    spec = EmbedderSpec(in_channels=1, widths=config.widths, n_classes=n_classes)
    torch.manual_seed(derive_seed(config.seed, "init:embedder"))
    net = EmbedderNet(spec)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr,
                           weight_decay=config.weight_decay)
    rng = np.random.default_rng(derive_seed(config.seed, "batches:embedder"))
    images = np.stack([it.image.grid for it in items])[:, None]
    targets = torch.from_numpy(labels)
    n = len(items)
    steps_per_epoch = math.ceil(n / config.batch_size)
    ce = nn.CrossEntropyLoss()

    epoch_losses = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        running = []
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            x = images[idx].astype(np.float32)
            if config.augment_flips:
                if rng.random() < 0.5:
                    x = x[:, :, ::-1, :]
                if rng.random() < 0.5:
                    x = x[:, :, :, ::-1]
            if config.augment_noise > 0:
                x = x + config.augment_noise * rng.standard_normal(x.shape)
            logits = net(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)))
            loss = ce(logits, targets[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(running)))

    meta = {
        "epoch": config.epochs,
        "seed": config.seed,
        "config_hash": config_hash(config.to_dict()),
        "label_info": label_info,
        "epoch_losses": epoch_losses,
    }
    params = ModelParams.from_module(net, spec.to_dict(), meta)
    params.meta["frozen_hash"] = params.content_hash()
    return FeatureEmbedder(params=params)


# ---------------------------------------------------------------------------
# distribution metrics
# ---------------------------------------------------------------------------


def _check_pair(fa: FeatureSet, fb: FeatureSet, min_n: int = 2):
    if fa.embedder_hash is not None and fb.embedder_hash is not None:
        if fa.embedder_hash != fb.embedder_hash:
            raise HashError("feature sets come from different embedders")
    if fa.dim != fb.dim:
        raise ShapeError(f"feature dims differ: {fa.dim} vs {fb.dim}")
    if fa.n < min_n or fb.n < min_n:
        raise SampleSizeError(f"need at least {min_n} rows per side, got {fa.n}/{fb.n}")


def _canonical_order(fa: FeatureSet, fb: FeatureSet):
    # sort the pair by content so metric(a, b) and metric(b, a) run the
    # bit-identical computation — makes symmetry exact, not just approximate
    ka = (fa.n, fa.features.tobytes())
    kb = (fb.n, fb.features.tobytes())
    return (fa, fb) if ka <= kb else (fb, fa)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid(fa: FeatureSet, fb: FeatureSet) -> float:
    """Fréchet distance between Gaussians fitted to the two feature sets.

    The covariance square root uses symmetric eigendecomposition with
    negative eigenvalues clipped at zero; a clip heavier than 1e-6 of the
    trace raises SingularityWarning (rank-deficient covariance at small N).
    """
    _check_pair(fa, fb)
    fa, fb = _canonical_order(fa, fb)
    d = fa.dim
    if fa.n < d + 1 or fb.n < d + 1:
        warnings.warn(
            f"fewer samples ({fa.n}/{fb.n}) than feature dim + 1 ({d + 1}); "
            "covariances are rank deficient",
            UserWarning,
        )
    xa, xb = fa.features, fb.features
    mu_a, mu_b = xa.mean(axis=0), xb.mean(axis=0)
    cov_a = np.cov(xa, rowvar=False, ddof=1).reshape(d, d)
    cov_b = np.cov(xb, rowvar=False, ddof=1).reshape(d, d)

    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    clipped = float(-vals[vals < 0].sum())
    trace_scale = float(np.trace(cov_a) + np.trace(cov_b))
    if clipped > 1e-6 * max(trace_scale, 1e-30):
        warnings.warn(
            f"clipped negative eigenvalue mass {clipped:.3e} "
            f"(trace scale {trace_scale:.3e})",
            SingularityWarning,
        )
    cross = float(np.sum(np.sqrt(np.clip(vals, 0, None))))
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    return mean_term + float(np.trace(cov_a)) + float(np.trace(cov_b)) - 2.0 * cross


def _poly_kernel(x: np.ndarray, y: np.ndarray, degree: int) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** degree


def kid_mmd2(x: np.ndarray, y: np.ndarray, degree: int = 3) -> float:
    """Unbiased squared MMD with the polynomial kernel, equal sample sizes.

    All three terms exclude the i == j diagonal (complete U-statistic), so
    byte-identical inputs give exactly 0.
    """
    m = x.shape[0]
    if y.shape[0] != m:
        raise ConfigError(f"subset sizes differ: {m} vs {y.shape[0]}")
    if m < 2:
        raise SampleSizeError("unbiased MMD needs at least 2 samples per side")
    kxx = _poly_kernel(x, x, degree)
    kyy = _poly_kernel(y, y, degree)
    kxy = _poly_kernel(x, y, degree)
    s_xx = float(kxx.sum() - np.trace(kxx))
    s_yy = float(kyy.sum() - np.trace(kyy))
    s_xy = float(kxy.sum() - np.trace(kxy))
    return (s_xx + s_yy - 2.0 * s_xy) / (m * (m - 1))


def kid(fa: FeatureSet, fb: FeatureSet, kernel_degree: int = 3, subsets: int = 10,
        subset_size: Optional[int] = None, seed: int = 0) -> tuple[float, float]:
    """Subset-averaged unbiased MMD^2; returns (mean, std over subsets)."""
    _check_pair(fa, fb)
    fa, fb = _canonical_order(fa, fb)
    n_min = min(fa.n, fb.n)
    size = min(100, n_min) if subset_size is None else int(subset_size)
    if size < 2:
        raise ConfigError(f"subset_size must be >= 2, got {size}")
    if size > n_min:
        raise ConfigError(f"subset_size {size} exceeds smaller set ({n_min})")
    if subsets < 1:
        raise ConfigError("need at least one subset")
    rng = np.random.default_rng(derive_seed(seed, "kid-subsets"))
    identical = fa.n == fb.n and fa.features.tobytes() == fb.features.tobytes()
    values = []
    for _ in range(subsets):
        ia = rng.choice(fa.n, size=size, replace=False)
        # identical sets share the draw so the paired U-statistic is exactly 0
        ib = ia if identical else rng.choice(fb.n, size=size, replace=False)
        values.append(kid_mmd2(fa.features[ia], fb.features[ib], kernel_degree))
    return float(np.mean(values)), float(np.std(values))


# ---------------------------------------------------------------------------
# perceptual metric
# ---------------------------------------------------------------------------


def lpips(a, b, embedder: FeatureEmbedder) -> float:
    """Sum over tap layers of mean squared channel-unit-normalized differences."""
    ga, gb = _as_grid(a), _as_grid(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    net = embedder.module()
    x = torch.from_numpy(np.stack([ga, gb]).astype(np.float32))[:, None]
    with torch.no_grad():
        taps = net.taps(x)
    total = 0.0
    for tap in taps:
        norm = torch.sqrt(torch.sum(tap**2, dim=1, keepdim=True) + 1e-10)
        unit = tap / norm
        total += float(torch.mean((unit[0] - unit[1]) ** 2))
    return total
