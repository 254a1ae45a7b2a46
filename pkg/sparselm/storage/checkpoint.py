import json
import logging
import os
from typing import Dict, Sequence, Tuple

import numpy as np

from sparselm.errors import ShapeMismatchError
from sparselm.models.checkpoint import CHECKPOINT_VERSION, ArrayEntry, CheckpointManifest

log = logging.getLogger("checkpoint")

MANIFEST_FILE = "checkpoint.json"
ARRAYS_FILE = "checkpoint.bin"


def checkpoint_paths(directory: str) -> Tuple[str, str]:
    return os.path.join(directory, MANIFEST_FILE), os.path.join(directory, ARRAYS_FILE)


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_checkpoint(directory: str, manifest: CheckpointManifest, named_arrays: Sequence[Tuple[str, np.ndarray]]) -> str:
    """Write every array back to back as little-endian float64, then the manifest that indexes them."""
    os.makedirs(directory, exist_ok=True)
    manifest_path, arrays_path = checkpoint_paths(directory)
    entries, chunks, offset = [], [], 0
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append(ArrayEntry(name=name, shape=list(arr.shape), offset=offset))
        chunks.append(arr.reshape(-1))
        offset += arr.size
    manifest = manifest.model_copy(update={"arrays": entries})
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    _atomic_write(arrays_path, flat.astype("<f8").tobytes())
    _atomic_write(manifest_path, json.dumps(manifest.model_dump(), ensure_ascii=False).encode("utf-8"))
    log.debug(f"Checkpoint written: {len(entries)} arrays, {offset} values -> {directory}")
    return manifest_path


def load_checkpoint(path: str) -> Tuple[CheckpointManifest, Dict[str, np.ndarray]]:
    """``path`` is the checkpoint directory or its manifest file."""
    directory = path if os.path.isdir(path) else os.path.dirname(path)
    manifest_path, arrays_path = checkpoint_paths(directory)
    if not (os.path.exists(manifest_path) and os.path.exists(arrays_path)):
        raise FileNotFoundError(f"no checkpoint in {directory}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = CheckpointManifest.model_validate(json.load(f))
    if manifest.version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.version!r}")
    flat = np.fromfile(arrays_path, dtype=manifest.dtype)
    if flat.size != manifest.total_elements:
        raise ShapeMismatchError(f"{arrays_path} holds {flat.size} values, manifest expects {manifest.total_elements}")
    arrays = {
        e.name: flat[e.offset:e.offset + e.size].astype(np.float64).reshape(e.shape) for e in manifest.arrays
    }
    return manifest, arrays


def restore_parameters(model, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
    for name, p in model.named_parameters():
        if name not in arrays:
            if strict:
                raise ShapeMismatchError(f"checkpoint has no array {name!r}")
            continue
        value = arrays[name]
        if tuple(value.shape) != tuple(p.shape):
            raise ShapeMismatchError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
        p.data = value.copy()
