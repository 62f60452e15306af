"""Shared domain types: label masks, images, domain profiles, datasets.

Class convention used throughout the benchmark:

    0 = background, 1 = LV cavity, 2 = myocardium, 3 = RV cavity
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError, SplitLeakError

N_CLASSES = 4
CLASS_NAMES = ("background", "LV", "MYO", "RV")
SPLITS = ("train", "val", "test")

# one fixed color per class, used by every mask rendering (RGB, 0-255)
CLASS_PALETTE = np.array(
    [[0, 0, 0], [214, 69, 65], [77, 175, 94], [66, 114, 219]], dtype=np.uint8
)


def mask_to_rgb(grid: np.ndarray) -> np.ndarray:
    """Render a label grid as an (H, W, 3) uint8 image with the fixed palette."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ShapeError(f"mask grid must be 2-D, got shape {grid.shape}")
    if grid.max(initial=0) >= N_CLASSES:
        raise ValueError(f"mask values must be < {N_CLASSES}")
    return CLASS_PALETTE[grid.astype(np.intp)]


def config_hash(obj) -> str:
    """SHA-256 hex digest of a JSON-serializable object, key-order independent."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def derive_seed(master_seed: int, label: str) -> int:
    """Derive a stable per-stage seed from a master seed and a text label.

    Different labels give independent streams; the mapping is stable across
    runs and platforms (SHA-256 based, not hash()).
    """
    digest = hashlib.sha256(f"{master_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def subject_rng(master_seed: int, subject_id: int) -> np.random.Generator:
    """Independent random stream for one subject: seed = master_seed XOR id."""
    return np.random.default_rng(master_seed ^ subject_id)


@dataclass
class LabelMask:
    """Single-label segmentation grid with values in {0,1,2,3}."""

    grid: np.ndarray
    spacing: tuple[float, float] = (1.25, 1.25)

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.uint8)
        if self.grid.ndim != 2:
            raise ShapeError(f"mask grid must be 2-D, got shape {self.grid.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def validate(self) -> None:
        """Check the mask invariants; raise ValueError on violation."""
        if self.grid.max(initial=0) >= N_CLASSES:
            raise ValueError(f"mask values must be < {N_CLASSES}")
        if not lv_enclosed(self.grid):
            raise ValueError("LV is not enclosed by myocardium")

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.grid.ravel(), minlength=N_CLASSES)


def lv_enclosed(grid: np.ndarray) -> bool:
    """True when every 4-neighbor of an LV pixel is LV or MYO.

    Pixels outside the grid count as background, so LV touching the border
    fails the check.
    """
    lv = grid == 1
    if not lv.any():
        return True
    ok = (grid == 1) | (grid == 2)
    padded = np.zeros((grid.shape[0] + 2, grid.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = ok
    good = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return bool(np.all(good[lv]))


@dataclass
class Image:
    """2-D intensity image with spacing and a declared intensity range."""

    grid: np.ndarray
    spacing: tuple[float, float] = (1.25, 1.25)
    intensity_range: Optional[tuple[float, float]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise ShapeError(f"image grid must be 2-D, got shape {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("image contains non-finite values")
        if self.intensity_range is None:
            self.intensity_range = (float(self.grid.min()), float(self.grid.max()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass
class DomainProfile:
    """Appearance parameters of one synthetic acquisition domain."""

    name: str
    tissue_intensities: tuple[float, float, float, float]
    texture_scale: float
    noise_sigma: float
    bias_strength: float
    contrast_gamma: float = 1.0

    def validate(self) -> None:
        if len(self.tissue_intensities) != N_CLASSES:
            raise ConfigError("tissue_intensities needs one entry per class")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.bias_strength < 0:
            raise ConfigError("bias_strength must be >= 0")
        if self.contrast_gamma <= 0:
            raise ConfigError("contrast_gamma must be > 0")

    def differs_from(self, other: "DomainProfile") -> int:
        """Number of appearance fields on which the two profiles differ."""
        n = 0
        n += self.tissue_intensities != other.tissue_intensities
        n += self.texture_scale != other.texture_scale
        n += self.noise_sigma != other.noise_sigma
        n += self.bias_strength != other.bias_strength
        n += self.contrast_gamma != other.contrast_gamma
        return n


@dataclass
class DatasetItem:
    image: Image
    mask: LabelMask
    subject_id: int
    domain: str
    split: str


@dataclass
class Dataset:
    """List of phantom items plus the provenance needed to regenerate them."""

    items: list[DatasetItem]
    provenance: dict

    def split(self, name: str) -> list[DatasetItem]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [it for it in self.items if it.split == name]

    def domain(self, name: str) -> "Dataset":
        return Dataset(
            items=[it for it in self.items if it.domain == name],
            provenance=self.provenance,
        )

    def validate(self) -> None:
        """Split disjointness by subject id, plus per-item invariants."""
        seen: dict[int, str] = {}
        for it in self.items:
            prev = seen.get(it.subject_id)
            if prev is not None and prev != it.split:
                raise SplitLeakError(
                    f"subject {it.subject_id} appears in splits {prev} and {it.split}"
                )
            seen[it.subject_id] = it.split
            it.mask.validate()
            if it.mask.grid.max() == 0:
                raise ValueError(f"subject {it.subject_id}: empty mask")

    def images(self) -> np.ndarray:
        """Stack all item images into an (N, H, W) float32 array."""
        return np.stack([it.image.grid for it in self.items]).astype(np.float32)

    def masks(self) -> np.ndarray:
        return np.stack([it.mask.grid for it in self.items]).astype(np.uint8)
