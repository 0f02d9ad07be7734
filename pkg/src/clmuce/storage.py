"""Binary-plus-metadata persistence shared by datasets and model files.

An artifact named ``stem`` is two files:

* ``stem.json`` -- metadata (counts, shapes, seeds, ...) and an ``arrays`` table
  listing each stored array as ``{"name", "shape", "complex", "offset"}`` where
  ``offset`` counts float64 words from the start of the payload;
* ``stem.bin`` -- the payload: little-endian IEEE-754 float64 values, arrays
  concatenated in table order, each in C order, complex values interleaved as
  (real, imag).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

PAYLOAD_DTYPE = np.dtype("<f8")


class StorageError(OSError):
    """Reading or writing an artifact failed."""


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def artifact_files(stem: str | Path) -> tuple[Path, Path]:
    return _paths(stem)


def save_arrays(stem: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> tuple[Path, Path]:
    meta_path, bin_path = _paths(stem)
    table = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        is_complex = np.iscomplexobj(arr)
        flat = np.ascontiguousarray(arr, dtype=np.complex128 if is_complex else np.float64)
        words = flat.view(np.float64).reshape(-1) if is_complex else flat.reshape(-1)
        table.append({"name": name, "shape": list(arr.shape), "complex": bool(is_complex), "offset": offset})
        chunks.append(words.astype(PAYLOAD_DTYPE, copy=False))
        offset += words.size
    doc = dict(meta)
    doc["arrays"] = table
    doc["payload_words"] = offset
    try:
        meta_path.parent.mkdir(parents=True, exist_ok=True)
        with open(bin_path, "wb") as fh:
            for c in chunks:
                fh.write(c.tobytes())
        meta_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write artifact {stem}: {exc}") from exc
    return meta_path, bin_path


def load_arrays(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    meta_path, bin_path = _paths(stem)
    try:
        doc = json.loads(meta_path.read_text())
        payload = np.fromfile(bin_path, dtype=PAYLOAD_DTYPE)
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"cannot read artifact {meta_path}: {exc}") from exc
    if payload.size != doc["payload_words"]:
        raise StorageError(f"{bin_path}: expected {doc['payload_words']} float64 words, found {payload.size}")
    arrays = {}
    for entry in doc["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        width = 2 * count if entry["complex"] else count
        words = payload[entry["offset"] : entry["offset"] + width].astype(np.float64)
        if entry["complex"]:
            arr = words.view(np.complex128).reshape(shape)
        else:
            arr = words.reshape(shape)
        arrays[entry["name"]] = arr.copy()
    return arrays, doc


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
