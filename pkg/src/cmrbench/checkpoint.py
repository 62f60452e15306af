"""Versioned, hash-verified persistence for model parameters.

File layout (little-endian):

    bytes 0:4    magic ``CMRB``
    bytes 4:6    format version (uint16)
    bytes 6:10   header length in bytes (uint32)
    header       JSON: spec, meta, content hash and an array index
                 (name, shape, byte offset into the payload)
    payload      concatenated float32 array data, C-order, sorted by name
    trailer      SHA-256 digest of everything above (32 bytes)

The trailer digest makes any single-byte corruption detectable; the stored
content hash additionally ties the payload to ``ModelParams.content_hash()``.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .backbone import ModelParams
from .errors import FormatError, HashMismatchError

MAGIC = b"CMRB"
VERSION = 1
_HEAD = struct.Struct("<4sHI")
_DIGEST_SIZE = 32


def _jsonable(value):
    """Canonicalize tuples to lists so saved and loaded metadata compare equal."""
    return json.loads(json.dumps(value))


def save_checkpoint(params: ModelParams, path) -> Path:
    """Write ``params`` to ``path``; the byte stream is a pure function of params."""
    path = Path(path)
    names = sorted(params.arrays)
    chunks = []
    index = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params.arrays[name], dtype=np.float32)
        data = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "arrays": index,
        "content_hash": params.content_hash(),
        "meta": _jsonable(params.meta),
        "payload_bytes": offset,
        "spec": _jsonable(params.spec),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEAD.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + digest)
    return path


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint, verifying magic, version and both hashes."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size + _DIGEST_SIZE:
        raise FormatError(f"{path}: file too short to be a checkpoint")
    magic, version, header_len = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise HashMismatchError(f"{path}: checksum mismatch, file corrupted")
    header_end = _HEAD.size + header_len
    if header_end > len(body):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(body[_HEAD.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    payload = body[header_end:]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}"
        )
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    params = ModelParams(arrays=arrays, spec=header["spec"], meta=header["meta"])
    if params.content_hash() != header["content_hash"]:
        raise HashMismatchError(f"{path}: parameter hash mismatch")
    return params
