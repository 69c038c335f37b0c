"""Named little-endian float64 blobs with a JSON manifest.

A store is a directory holding ``<name>.f64`` files and ``manifest.json``.
The manifest records each array's shape and sha256 so truncated or
edited blobs are detected on read.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"


class CorruptStoreError(Exception):
    pass


def _blob(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_store(directory, arrays, meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        data = _blob(arr)
        (directory / f"{name}.f64").write_bytes(data)
        entries[name] = {"shape": list(arr.shape), "sha256": hashlib.sha256(data).hexdigest()}
    manifest = dict(meta or {})
    manifest["arrays"] = entries
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, directory / MANIFEST)
    return directory


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptStoreError(f"{path}: {exc}") from None


def read_store(directory, names=None):
    """Return ``(arrays, manifest)``; raises CorruptStoreError on any mismatch."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest is None:
        raise FileNotFoundError(directory / MANIFEST)
    entries = manifest.get("arrays", {})
    arrays = {}
    for name in names or entries:
        if name not in entries:
            raise CorruptStoreError(f"{directory}: array {name!r} missing from manifest")
        path = directory / f"{name}.f64"
        if not path.exists():
            raise CorruptStoreError(f"{path} missing")
        data = path.read_bytes()
        if hashlib.sha256(data).hexdigest() != entries[name]["sha256"]:
            raise CorruptStoreError(f"{path}: checksum mismatch")
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(entries[name]["shape"]).astype(np.float64)
    return arrays, manifest
