"""Single-file parameter archive: JSON manifest plus raw little-endian blobs.

Layout: 8-byte magic, 8-byte little-endian manifest length, the UTF-8 JSON
manifest, then the concatenated tensor bytes. The manifest maps each tensor
name to shape, dtype, and byte offset into the blob section, and carries a
free-form ``meta`` dict (config hash, training progress, and so on).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, LoadError

MAGIC = b"VGCKPT01"
FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def save_archive(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays and metadata; overwrites any existing file."""
    entries = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPE_CODES:
            raise FormatError(f"unsupported dtype {dtype} for tensor {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[dtype]).tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, meta); raises FormatError on any structural damage."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path} is not a parameter archive (bad magic)")
    (manifest_len,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    header_end = len(MAGIC) + 8 + manifest_len
    if len(blob) < header_end:
        raise FormatError(f"{path} is truncated inside the manifest")
    try:
        manifest = json.loads(blob[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path} has a corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path} has format_version {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        start = header_end + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise FormatError(f"{path} is truncated inside tensor {name}")
        arr = np.frombuffer(blob[start:end], dtype=_DTYPE_CODES[entry["dtype"]])
        tensors[name] = arr.reshape(entry["shape"]).astype(entry["dtype"], copy=True)
    return tensors, manifest.get("meta", {})


def assign_tensors(archive: dict[str, np.ndarray], named, context: str = "archive") -> None:
    """Overwrite parameter tensors from archive arrays; names must match exactly.

    ``named`` is an iterable of (name, Tensor). Missing keys, extra keys, and
    shape or dtype mismatches all raise LoadError naming the offender.
    """
    named = dict(named)
    for name in named:
        if name not in archive:
            raise LoadError(f"{context} is missing key {name}")
    for name in archive:
        if name not in named:
            raise LoadError(f"{context} has unexpected key {name}")
    for name, tensor in named.items():
        arr = archive[name]
        if tuple(arr.shape) != tensor.shape:
            raise LoadError(
                f"{context} key {name} has shape {tuple(arr.shape)}, parameter expects {tensor.shape}"
            )
        if arr.dtype != tensor.data.dtype:
            raise LoadError(
                f"{context} key {name} has dtype {arr.dtype}, parameter expects {tensor.data.dtype}"
            )
        tensor.data = arr.copy()
