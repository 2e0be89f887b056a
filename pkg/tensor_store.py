#!/usr/bin/env python3
"""
MXT1 binary tensor files and JSON manifests

Layout of a tensor file:
    bytes 0-3    magic b"MXT1"
    bytes 4-7    rank (u32, little-endian)
    bytes 8-15   dim0, dim1 (u32 each; unused dims are 0)
    payload      float64 little-endian, C order
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable

import numpy as np

from mixft_errors import DataError, MissingArtifactError

MAGIC = b"MXT1"
HEADER = struct.Struct("<4sIII")
MAX_RANK = 2


def save_tensor(path, array) -> str:
    """Write one array as an MXT1 file and return its SHA-256"""
    # rank 0 stays rank 0
    array = np.asarray(array, dtype="<f8").copy(order="C")
    if array.ndim > MAX_RANK:
        raise DataError(f"MXT1 stores rank <= {MAX_RANK}, got rank {array.ndim}")

    dims = list(array.shape) + [0] * (MAX_RANK - array.ndim)
    payload = HEADER.pack(MAGIC, array.ndim, *dims) + array.tobytes()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_tensor(path) -> np.ndarray:
    """Read one MXT1 file"""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)

    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise DataError(f"{path}: file shorter than the MXT1 header")

    magic, rank, dim0, dim1 = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if rank > MAX_RANK:
        raise DataError(f"{path}: invalid rank {rank}")

    shape = tuple([dim0, dim1][:rank])
    count = int(np.prod(shape)) if shape else 1
    if len(raw) - HEADER.size != 8 * count:
        raise DataError(f"{path}: expected {8 * count} payload bytes, found {len(raw) - HEADER.size}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=HEADER.size)

    return data.astype(np.float64).reshape(shape)


def save_tensors(directory, tensors: Dict[str, np.ndarray]) -> Dict[str, str]:
    """Write a name -> array mapping as `<name>.mxt` files; returns name -> hash"""
    directory = Path(directory)
    return {name: save_tensor(directory / f"{name}.mxt", value)
            for name, value in sorted(tensors.items())}


def load_tensors(directory, names: Iterable[str]) -> Dict[str, np.ndarray]:
    directory = Path(directory)
    return {name: load_tensor(directory / f"{name}.mxt") for name in names}


def write_json(path, payload: Dict[str, Any]) -> None:
    """Write a manifest with stable key order so equal content gives equal bytes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_json(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid manifest ({e})") from e


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_directory(directory) -> str:
    """Hash of every file under a directory, in sorted relative-path order"""
    directory = Path(directory)
    digest = hashlib.sha256()
    for file_path in sorted(p for p in directory.rglob("*") if p.is_file()):
        digest.update(str(file_path.relative_to(directory)).encode())
        digest.update(file_path.read_bytes())
    return digest.hexdigest()


__all__ = [
    "MAGIC",
    "save_tensor",
    "load_tensor",
    "save_tensors",
    "load_tensors",
    "write_json",
    "read_json",
    "sha256_file",
    "sha256_text",
    "sha256_directory",
]
