"""Dataset directory persistence and PNG export.

A dataset directory holds one ``manifest.json`` plus two raw files per item:

    <subject_id>.img   float32 little-endian image grid
    <subject_id>.msk   uint8 label grid

Each raw file starts with a 16-byte header: 4-byte magic, uint32 height,
uint32 width, 4-byte dtype tag. The manifest records provenance (seed,
config hash), per-split counts, spacing and one entry per item, so every
file in the directory is reachable from it. Externally converted real data
uses the same layout.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .core import Dataset, DatasetItem, Image, LabelMask, mask_to_rgb
from .errors import FormatError

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
IMAGE_MAGIC = b"CMRI"
MASK_MAGIC = b"CMRM"
_ITEM_HEAD = struct.Struct("<4sII4s")
_DTYPE_TAGS = {IMAGE_MAGIC: b"f32\0", MASK_MAGIC: b"u8\0\0"}
_DTYPES = {IMAGE_MAGIC: np.dtype("<f4"), MASK_MAGIC: np.dtype(np.uint8)}


def _write_grid(path: Path, magic: bytes, grid: np.ndarray) -> None:
    arr = np.ascontiguousarray(grid, dtype=_DTYPES[magic])
    h, w = arr.shape
    path.write_bytes(_ITEM_HEAD.pack(magic, h, w, _DTYPE_TAGS[magic]) + arr.tobytes())


def _read_grid(path: Path, magic: bytes) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < _ITEM_HEAD.size:
        raise FormatError(f"{path}: file too short for its header")
    got_magic, h, w, tag = _ITEM_HEAD.unpack_from(blob, 0)
    if got_magic != magic or tag != _DTYPE_TAGS[magic]:
        raise FormatError(f"{path}: bad magic/dtype {got_magic!r}/{tag!r}")
    dtype = _DTYPES[magic]
    expected = _ITEM_HEAD.size + h * w * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"{path}: {len(blob)} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=_ITEM_HEAD.size).reshape(h, w).copy()


def save_dataset(dataset: Dataset, dirpath) -> Path:
    """Write the dataset directory; output bytes depend only on the dataset."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    entries = []
    for item in dataset.items:
        stem = f"{item.subject_id:06d}"
        _write_grid(dirpath / f"{stem}.img", IMAGE_MAGIC, item.image.grid)
        _write_grid(dirpath / f"{stem}.msk", MASK_MAGIC, item.mask.grid)
        entries.append(
            {
                "subject_id": item.subject_id,
                "domain": item.domain,
                "split": item.split,
                "image": f"{stem}.img",
                "mask": f"{stem}.msk",
                "spacing": list(item.image.spacing),
                "intensity_range": list(item.image.intensity_range),
                "image_meta": json.loads(json.dumps(item.image.meta, default=str)),
            }
        )
    splits = {}
    for item in dataset.items:
        splits[item.split] = splits.get(item.split, 0) + 1
    manifest = {
        "format_version": MANIFEST_VERSION,
        "provenance": json.loads(json.dumps(dataset.provenance, default=str)),
        "spacing": entries[0]["spacing"] if entries else None,
        "splits": splits,
        "items": entries,
    }
    (dirpath / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return dirpath


def load_dataset(dirpath) -> Dataset:
    """Rebuild a Dataset from a directory written by save_dataset."""
    dirpath = Path(dirpath)
    manifest_path = dirpath / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"{dirpath}: no {MANIFEST_NAME}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise FormatError(
            f"{manifest_path}: unsupported format_version {manifest.get('format_version')!r}"
        )
    items = []
    for entry in manifest["items"]:
        spacing = tuple(entry["spacing"])
        image = Image(
            grid=_read_grid(dirpath / entry["image"], IMAGE_MAGIC),
            spacing=spacing,
            intensity_range=tuple(entry["intensity_range"]),
            meta=dict(entry.get("image_meta", {})),
        )
        mask = LabelMask(grid=_read_grid(dirpath / entry["mask"], MASK_MAGIC), spacing=spacing)
        items.append(
            DatasetItem(
                image=image,
                mask=mask,
                subject_id=int(entry["subject_id"]),
                domain=entry["domain"],
                split=entry["split"],
            )
        )
    return Dataset(items=items, provenance=manifest["provenance"])


def export_png(dataset: Dataset, dirpath, limit: int = None) -> list:
    """Write grayscale image PNGs and palette mask PNGs for inspection."""
    from matplotlib import image as mpimage

    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    written = []
    for item in dataset.items[: limit if limit is not None else len(dataset.items)]:
        stem = f"{item.subject_id:06d}_{item.domain}_{item.split}"
        img_path = dirpath / f"{stem}_img.png"
        lo, hi = item.image.intensity_range
        mpimage.imsave(img_path, item.image.grid, cmap="gray", vmin=lo, vmax=hi)
        msk_path = dirpath / f"{stem}_msk.png"
        mpimage.imsave(msk_path, mask_to_rgb(item.mask.grid))
        written += [img_path, msk_path]
    return written
