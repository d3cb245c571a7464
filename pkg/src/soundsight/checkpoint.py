"""Tensor checkpoints: a JSON manifest plus a raw little-endian sidecar blob.

``<path>`` holds ``{"format_version", "kind", "config", "tensors": [...]}``
where each tensor entry is ``{name, shape, dtype, offset}`` (offset in bytes
into ``<path>.bin``).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, array in tensors.items():
        array = np.ascontiguousarray(array)
        dtype = array.dtype.newbyteorder("<")
        raw = array.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": dtype.str, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "config": config, "tensors": entries}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    Path(str(path) + ".bin").write_bytes(b"".join(blobs))
    return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {manifest.get('kind')}")
    blob = Path(str(path) + ".bin").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the blob")
        tensors[entry["name"]] = (
            np.frombuffer(blob, dtype=dtype, count=count, offset=entry["offset"]).reshape(entry["shape"]).copy()
        )
    return manifest["config"], tensors


def file_digest(path: str | Path) -> str:
    """SHA-256 over the manifest and its blob."""
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    digest.update(Path(str(path) + ".bin").read_bytes())
    return digest.hexdigest()
