"""MOMA binary tensor files and tensor manifests.

File layout (all little-endian)::

    b"MOMA" | version:u16 | rank:u16 | dims:u64 * rank | data:f64 * prod(dims)

A manifest directory holds one ``.moma`` file per tensor plus
``manifest.json`` mapping tensor names to files, shapes and roles.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from moma.errors import ContractError

MAGIC = b"MOMA"
VERSION = 1
MANIFEST = "manifest.json"


def write_tensor(f: BinaryIO, array) -> None:
    arr = np.array(array, dtype="<f8", order="C")
    f.write(MAGIC)
    f.write(struct.pack("<HH", VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ContractError(f"not a MOMA tensor file (magic {magic!r})")
    version, rank = struct.unpack("<HH", f.read(4))
    if version != VERSION:
        raise ContractError(f"unsupported MOMA format version {version}")
    dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise ContractError("truncated MOMA tensor data")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)


def save(path, array) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def _filename(name: str) -> str:
    return name.replace("/", "__") + ".moma"


def save_manifest(directory, tensors: Mapping[str, np.ndarray], roles: Mapping[str, str]) -> Path:
    """Write every tensor to ``directory`` and index them in ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        fname = _filename(name)
        save(directory / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape),
                        "role": roles.get(name, "trainable")})
    path = directory / MANIFEST
    path.write_text(json.dumps({"format": "MOMA", "version": VERSION, "tensors": entries}, indent=1))
    return path


def load_manifest(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    meta = json.loads((directory / MANIFEST).read_text())
    tensors, roles = {}, {}
    for entry in meta["tensors"]:
        arr = load(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ContractError(f"{entry['name']}: shape {arr.shape} disagrees with manifest")
        tensors[entry["name"]] = arr
        roles[entry["name"]] = entry["role"]
    return tensors, roles


def digest(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw float64 bytes, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        h.update(name.encode())
        h.update(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        h.update(arr.tobytes())
    return h.hexdigest()
