"""Named-tensor directories.

A directory holds ``manifest.json`` and one blob ``tensors.bin``. The manifest
carries free-form metadata plus a tensor table mapping each name to its shape,
dtype, byte offset and byte length inside the blob. All data is little-endian.
Writes go to a sibling temporary directory that is renamed into place.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

BLOB = "tensors.bin"
MANIFEST = "manifest.json"
DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "i64": "<i8", "u32": "<u4", "u8": "u1"}
_CODES = {np.dtype(v): k for k, v in DTYPES.items()}


class TensorFileError(OSError):
    pass


def dtype_code(arr: np.ndarray) -> str:
    dt = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype.byteorder == ">" else np.dtype(arr.dtype)
    try:
        return _CODES[dt]
    except KeyError:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}") from None


def write_tensor_dir(path, tensors: dict[str, np.ndarray], meta: dict | None = None, atomic: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    target = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent)) if atomic else path
    target.mkdir(parents=True, exist_ok=True)
    table = {}
    offset = 0
    with open(target / BLOB, "wb") as fh:
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            code = dtype_code(arr)
            data = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
            fh.write(data)
            table[name] = {"shape": list(arr.shape), "dtype": code, "file": BLOB, "offset": offset,
                           "nbytes": len(data)}
            offset += len(data)
    manifest = dict(meta or {})
    manifest["tensors"] = table
    (target / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    if atomic:
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(target, path)
            shutil.rmtree(old)
        else:
            os.replace(target, path)


def read_manifest(path) -> dict:
    path = Path(path) / MANIFEST
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise TensorFileError(f"missing {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"corrupt {path}: {exc}") from exc


def read_tensor_dir(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = read_manifest(path)
    blobs: dict[str, bytes] = {}
    tensors = {}
    for name, entry in manifest.get("tensors", {}).items():
        fname = entry["file"]
        if fname not in blobs:
            try:
                blobs[fname] = (path / fname).read_bytes()
            except OSError as exc:
                raise TensorFileError(f"cannot read {path / fname}: {exc}") from exc
        raw = blobs[fname]
        start, n = int(entry["offset"]), int(entry["nbytes"])
        if start + n > len(raw):
            raise TensorFileError(f"{path / fname}: tensor {name!r} runs past the end of the file")
        dt = np.dtype(DTYPES[entry["dtype"]])
        arr = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=start)
        tensors[name] = arr.reshape(entry["shape"]).copy()
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return tensors, meta
