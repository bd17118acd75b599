"""``.ten`` tensor files and checkpoint directories.

Layout: b"TEN1", u8 dtype code (1=f32, 2=f64), u8 ndim, ndim little-endian
u32 extents, row-major little-endian payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEN1"
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class TenFormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise TenFormatError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TenFormatError("bad magic")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise TenFormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", buf, 6)
    off = 6 + 4 * ndim
    dt = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != n * dt.itemsize:
        raise TenFormatError("payload size does not match header")
    return np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_checkpoint(directory, params: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write each parameter to ``<name with '/' -> '__'>.ten`` plus ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(params):
        fname = name.replace("/", "__") + ".ten"
        save(d / fname, np.asarray(params[name]))
        files[name] = fname
    doc = dict(meta or {})
    doc["params"] = files
    (d / "meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint at {d}")
    meta = json.loads(meta_path.read_text())
    params = {name: load(d / fname) for name, fname in meta["params"].items()}
    return params, meta
