"""Binary matrix container with a JSON sidecar.

Layout (all little endian): magic ``b"GPHR"``, ``u32`` version, ``u64`` rows,
``u64`` cols, then ``rows * cols`` float64 values in column-major order.
Metadata (labels, config hash, certification results) goes to
``<path>.json`` next to the binary file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "VERSION", "ContainerError", "write_matrix", "read_matrix", "read_metadata", "config_hash"]

MAGIC = b"GPHR"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class ContainerError(ValueError):
    pass


def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_matrix(path, M, metadata=None):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ContainerError("only 1-D or 2-D arrays can be stored")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, M.shape[0], M.shape[1]))
        fh.write(M.astype("<f8").tobytes(order="F"))
    if metadata is not None:
        with open(_sidecar(path), "w") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
    return path


def read_matrix(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ContainerError(f"{path}: truncated header")
        magic, version, rows, cols = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported version {version}")
        payload = fh.read()
    if len(payload) != 8 * rows * cols:
        raise ContainerError(f"{path}: payload has {len(payload)} bytes, expected {8 * rows * cols}")
    return np.frombuffer(payload, dtype="<f8").reshape((rows, cols), order="F").astype(np.float64)


def read_metadata(path):
    side = _sidecar(path)
    if not side.exists():
        return {}
    with open(side) as fh:
        return json.load(fh)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of a config mapping."""
    blob = json.dumps(cfg, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()
