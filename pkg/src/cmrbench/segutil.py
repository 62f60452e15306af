"""Downstream segmentation utility of generated images.

A small U-Net segmenter (4-class head, no conditioning branch) is trained
with a combined soft-Dice + cross-entropy loss on real or synthetic image
populations, then every trained model is evaluated on every test domain to
build the setup x domain utility grid: overlap metrics (Dice, IoU) plus
boundary-distance metrics (HD95, ASD) per foreground structure.
"""

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .backbone import ModelParams, UNet, UNetSpec, module_from_params
from .core import CLASS_NAMES, LabelMask, config_hash, derive_seed
from .ddpm import TrainResult
from .errors import ConfigError, NonFiniteLossError, ShapeError

FOREGROUND_CLASSES = (1, 2, 3)
DICE_SMOOTH = 1e-5
GENERATORS = ("ddpm", "ldm", "fm")
_SETUP_PATTERN = re.compile(r"^(RealA|RealB|(FullSyn|ASyn|BSyn)-(ddpm|ldm|fm))$")


@dataclass
class TrainingSetup:
    """Named provenance of a segmenter's training data.

    ``RealA``/``RealB`` train on real images of one domain; ``FullSyn-<gen>``
    on images generated from synthetic masks; ``ASyn-<gen>``/``BSyn-<gen>``
    on images generated from real domain-A / domain-B training masks.
    """

    name: str
    source: str = ""

    def __post_init__(self):
        if not _SETUP_PATTERN.match(self.name):
            raise ConfigError(
                f"invalid setup name {self.name!r}; expected RealA, RealB or "
                f"(FullSyn|ASyn|BSyn)-(ddpm|ldm|fm)"
            )


@dataclass
class SegPrediction:
    logits: np.ndarray
    label: LabelMask


@dataclass
class SegTrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    widths: tuple = (16, 32, 64)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _to_logit_batch(logits) -> torch.Tensor:
    if isinstance(logits, np.ndarray):
        logits = torch.from_numpy(np.ascontiguousarray(logits, dtype=np.float32))
    if logits.ndim == 3:
        logits = logits[None]
    if logits.ndim != 4 or logits.shape[1] != len(CLASS_NAMES):
        raise ShapeError(
            f"logits must be (B, {len(CLASS_NAMES)}, H, W), got {tuple(logits.shape)}"
        )
    return logits


def _to_target_batch(target, spatial) -> torch.Tensor:
    if isinstance(target, LabelMask):
        target = target.grid
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(np.ascontiguousarray(target, dtype=np.int64))
    target = target.long()
    if target.ndim == 2:
        target = target[None]
    if target.ndim != 3 or target.shape[-2:] != spatial:
        raise ShapeError(
            f"target spatial shape {tuple(target.shape)} does not match logits {spatial}"
        )
    return target


@dataclass
class DiceCEParts:
    dice: float
    ce: float
    total: float


def dicece_loss(logits, target) -> torch.Tensor:
    """Soft-Dice loss over foreground classes plus mean cross-entropy.

    The Dice term aggregates intersections over the whole batch per class
    (smooth term in numerator and denominator), then averages the three
    foreground classes; an absent class with near-zero predicted mass
    contributes no loss.
    """
    logits = _to_logit_batch(logits)
    target = _to_target_batch(target, logits.shape[-2:])
    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, num_classes=len(CLASS_NAMES)).permute(0, 3, 1, 2)
    dices = []
    for cls in FOREGROUND_CLASSES:
        p = probs[:, cls]
        g = onehot[:, cls].to(probs.dtype)
        num = 2.0 * (p * g).sum() + DICE_SMOOTH
        den = p.sum() + g.sum() + DICE_SMOOTH
        dices.append(num / den)
    dice_loss = 1.0 - torch.stack(dices).mean()
    return dice_loss + ce


def dicece_parts(logits, target) -> DiceCEParts:
    """The two loss components separately (for diagnostics and tests)."""
    logits = _to_logit_batch(logits)
    target = _to_target_batch(target, logits.shape[-2:])
    ce = float(F.cross_entropy(logits, target))
    total = float(dicece_loss(logits, target))
    return DiceCEParts(dice=total - ce, ce=ce, total=total)


# ---------------------------------------------------------------------------
# overlap metrics
# ---------------------------------------------------------------------------


def _foreground_name(cls: int) -> str:
    return CLASS_NAMES[cls]


def _mean_or_none(values: list) -> Optional[float]:
    return float(np.mean(values)) if values else None


@dataclass
class OverlapMetrics:
    dice: dict
    iou: dict
    mean_dice: Optional[float]
    mean_iou: Optional[float]
    excluded: tuple


def overlap_metrics(pred: LabelMask, gt: LabelMask) -> OverlapMetrics:
    """Per-class Dice and IoU; classes absent in both masks are excluded."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    dice, iou, excluded = {}, {}, []
    for cls in FOREGROUND_CLASSES:
        name = _foreground_name(cls)
        p = pred.grid == cls
        g = gt.grid == cls
        p_sum, g_sum = int(p.sum()), int(g.sum())
        if p_sum == 0 and g_sum == 0:
            dice[name] = iou[name] = None
            excluded.append(name)
            continue
        inter = int((p & g).sum())
        dice[name] = 2.0 * inter / (p_sum + g_sum)
        iou[name] = inter / (p_sum + g_sum - inter)
    present = [n for n in dice if dice[n] is not None]
    return OverlapMetrics(
        dice=dice,
        iou=iou,
        mean_dice=_mean_or_none([dice[n] for n in present]),
        mean_iou=_mean_or_none([iou[n] for n in present]),
        excluded=tuple(excluded),
    )


# ---------------------------------------------------------------------------
# surface metrics
# ---------------------------------------------------------------------------


def boundary_pixels(binary: np.ndarray) -> np.ndarray:
    """Class pixels with at least one non-class 4-neighbor (grid edge counts)."""
    padded = np.pad(binary, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return binary & ~interior


def _directed_distances(from_b: np.ndarray, to_b: np.ndarray, spacing) -> np.ndarray:
    edt = ndimage.distance_transform_edt(~to_b, sampling=spacing)
    return edt[from_b]


@dataclass
class SurfaceMetrics:
    hd95: dict
    asd: dict
    mean_hd95: Optional[float]
    mean_asd: Optional[float]
    undefined: tuple


def surface_metrics(pred: LabelMask, gt: LabelMask, spacing=None) -> SurfaceMetrics:
    """Boundary-distance metrics per class, in spacing units.

    HD95 is the 95th percentile and ASD the mean of the pooled directed
    boundary distances (both directions). A class missing on either side has
    no defined boundary distance; it is recorded in ``undefined`` rather than
    raising.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    spacing = tuple(gt.spacing if spacing is None else spacing)
    hd95, asd, undefined = {}, {}, []
    for cls in FOREGROUND_CLASSES:
        name = _foreground_name(cls)
        p = pred.grid == cls
        g = gt.grid == cls
        if not p.any() or not g.any():
            hd95[name] = asd[name] = None
            undefined.append(name)
            continue
        pb, gb = boundary_pixels(p), boundary_pixels(g)
        pooled = np.concatenate(
            [_directed_distances(pb, gb, spacing), _directed_distances(gb, pb, spacing)]
        )
        hd95[name] = float(np.percentile(pooled, 95))
        asd[name] = float(pooled.mean())
    defined = [n for n in hd95 if hd95[n] is not None]
    return SurfaceMetrics(
        hd95=hd95,
        asd=asd,
        mean_hd95=_mean_or_none([hd95[n] for n in defined]),
        mean_asd=_mean_or_none([asd[n] for n in defined]),
        undefined=tuple(undefined),
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _dataset_items(dataset):
    if hasattr(dataset, "split"):
        return dataset.split("train")
    return list(dataset)


def _stack_training_arrays(items):
    images = np.stack([it.image.grid for it in items]).astype(np.float32)[:, None]
    masks = np.stack([it.mask.grid for it in items]).astype(np.int64)
    return images, masks


def seg_spec(config: SegTrainConfig) -> UNetSpec:
    return UNetSpec(
        in_channels=1,
        out_channels=len(CLASS_NAMES),
        widths=config.widths,
        blocks_per_level=1,
        attention_levels=(len(config.widths) - 1,),
        conditioning_mode="none",
    )


def _zero_times(n: int) -> torch.Tensor:
    return torch.zeros(n, dtype=torch.float32)


def train_segmenter(setup: TrainingSetup, dataset, config: SegTrainConfig) -> TrainResult:
    """Train the 4-class segmenter on one setup's images.

    The backbone U-Net is reused with its time input pinned to zero (the
    embedding becomes a learned constant), so the generators and the
    segmenter share one architecture and optimizer family.
    """
    if config.epochs < 1 or config.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    items = _dataset_items(dataset)
    if not items:
        raise ConfigError("empty training set")
    images, masks = _stack_training_arrays(items)
    n = images.shape[0]

    torch.manual_seed(derive_seed(config.seed, "init:segmenter"))
    net = UNet(seg_spec(config))
    net.train()
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(n / config.batch_size)
    cosine = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, config.epochs * steps_per_epoch)
    )
    rng = np.random.default_rng(derive_seed(config.seed, "batches:segmenter"))

    step_losses = []
    epoch_losses = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        running = []
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            x = torch.from_numpy(images[idx])
            y = torch.from_numpy(masks[idx])
            logits = net(x, _zero_times(len(idx)))
            loss = dicece_loss(logits, y)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} step {step} (setup={setup.name})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            cosine.step()
            val = float(loss.detach())
            step_losses.append((epoch, step, val))
            running.append(val)
        epoch_losses.append(float(np.mean(running)))

    meta = {
        "role": "segmenter",
        "setup": setup.name,
        "source": setup.source,
        "epoch": config.epochs,
        "seed": config.seed,
        "config_hash": config_hash(config.to_dict()),
    }
    params = ModelParams.from_module(net, seg_spec(config).to_dict(), meta)
    return TrainResult(params=params, step_losses=step_losses, epoch_losses=epoch_losses)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _predict_logits(net: torch.nn.Module, grids: np.ndarray, batch_size: int = 32):
    outs = []
    with torch.no_grad():
        for start in range(0, len(grids), batch_size):
            x = torch.from_numpy(grids[start : start + batch_size])
            outs.append(net(x, _zero_times(x.shape[0])).numpy())
    return np.concatenate(outs)


def seg_predict(model, image) -> SegPrediction:
    """Segment one image; accepts ModelParams or an instantiated module."""
    net = module_from_params(model) if isinstance(model, ModelParams) else model
    grid = image.grid if hasattr(image, "grid") else np.asarray(image)
    logits = _predict_logits(net, grid.astype(np.float32)[None, None])[0]
    label = LabelMask(grid=np.argmax(logits, axis=0).astype(np.uint8))
    return SegPrediction(logits=logits, label=label)


@dataclass
class UtilityRow:
    setup: str
    test_domain: str
    n_images: int
    dice: Optional[float]
    iou: Optional[float]
    hd95: Optional[float]
    asd: Optional[float]
    per_class: dict = field(default_factory=dict)
    undefined_count: int = 0


@dataclass
class UtilityReport:
    """Grid of segmentation quality per (training setup x test domain)."""

    rows: list

    def row(self, setup: str, test_domain: str) -> UtilityRow:
        for r in self.rows:
            if r.setup == setup and r.test_domain == test_domain:
                return r
        raise KeyError(f"no row for ({setup!r}, {test_domain!r})")

    def to_rows(self) -> list:
        out = []
        for r in self.rows:
            row = {
                "setup": r.setup,
                "test_domain": r.test_domain,
                "n_images": r.n_images,
                "dice": r.dice,
                "iou": r.iou,
                "hd95": r.hd95,
                "asd": r.asd,
                "undefined_count": r.undefined_count,
            }
            for name, metrics in r.per_class.items():
                for metric, value in metrics.items():
                    row[f"{name}_{metric}"] = value
            out.append(row)
        return out


def _evaluate_model(net: torch.nn.Module, items) -> dict:
    grids = np.stack([it.image.grid for it in items]).astype(np.float32)[:, None]
    logits = _predict_logits(net, grids)
    labels = np.argmax(logits, axis=1).astype(np.uint8)
    per_image = {"dice": [], "iou": [], "hd95": [], "asd": []}
    per_class = {
        _foreground_name(c): {"dice": [], "iou": [], "hd95": [], "asd": []}
        for c in FOREGROUND_CLASSES
    }
    undefined = 0
    for label_grid, item in zip(labels, items):
        pred = LabelMask(grid=label_grid, spacing=item.mask.spacing)
        ov = overlap_metrics(pred, item.mask)
        sf = surface_metrics(pred, item.mask)
        undefined += len(sf.undefined)
        for key, value in (("dice", ov.mean_dice), ("iou", ov.mean_iou),
                           ("hd95", sf.mean_hd95), ("asd", sf.mean_asd)):
            if value is not None:
                per_image[key].append(value)
        for name in per_class:
            for metric, source in (("dice", ov.dice), ("iou", ov.iou),
                                   ("hd95", sf.hd95), ("asd", sf.asd)):
                if source[name] is not None:
                    per_class[name][metric].append(source[name])
    return {
        "n_images": len(items),
        "means": {k: _mean_or_none(v) for k, v in per_image.items()},
        "per_class": {
            name: {metric: _mean_or_none(vals) for metric, vals in metrics.items()}
            for name, metrics in per_class.items()
        },
        "undefined_count": undefined,
    }


def evaluate_cross(models: dict, test_sets: dict) -> UtilityReport:
    """Evaluate every trained setup on every test domain.

    ``models`` maps setup name to trained ModelParams; ``test_sets`` maps
    domain name to a list of dataset items. Returns one row per combination
    with mean and per-class Dice/IoU/HD95/ASD plus undefined-metric counts.
    """
    rows = []
    for setup_name, params in models.items():
        net = module_from_params(params) if isinstance(params, ModelParams) else params
        for domain, items in test_sets.items():
            items = list(items)
            if not items:
                raise ConfigError(f"empty test set for domain {domain!r}")
            result = _evaluate_model(net, items)
            rows.append(
                UtilityRow(
                    setup=setup_name,
                    test_domain=domain,
                    n_images=result["n_images"],
                    dice=result["means"]["dice"],
                    iou=result["means"]["iou"],
                    hd95=result["means"]["hd95"],
                    asd=result["means"]["asd"],
                    per_class=result["per_class"],
                    undefined_count=result["undefined_count"],
                )
            )
    return UtilityReport(rows=rows)
