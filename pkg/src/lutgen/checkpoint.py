"""Versioned binary container for model parameters.

Layout (all integers little-endian)::

    magic    8 bytes  b"LUTGCKPT"
    version  uint32
    hlen     uint32   length of the JSON header in bytes
    header   JSON     {"kind", "D", "K", "config", "layers": [{"name", "shape"}], "meta"}
    blobs    float32  one little-endian blob per layer, in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"LUTGCKPT"
VERSION = 1


def dumps(kind: str, arrays: dict[str, np.ndarray], config: dict | None = None,
          D: int | None = None, K: int | None = None, meta: dict | None = None) -> bytes:
    layers = [{"name": name, "shape": list(np.shape(arr))} for name, arr in arrays.items()]
    header = {"kind": kind, "D": D, "K": K, "config": config or {}, "layers": layers, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    parts.extend(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in arrays.values())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(blob) < 16:
        raise FormatError("truncated checkpoint header")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt checkpoint header") from None
    arrays: dict[str, np.ndarray] = {}
    pos = 16 + hlen
    for layer in header["layers"]:
        shape = tuple(layer["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        chunk = blob[pos : pos + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"truncated checkpoint blob for {layer['name']}")
        arrays[layer["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise FormatError("trailing bytes after checkpoint blobs")
    return header, arrays


def save(path, kind: str, arrays: dict[str, np.ndarray], **kwargs) -> None:
    Path(path).write_bytes(dumps(kind, arrays, **kwargs))


def load(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    header, arrays = loads(Path(path).read_bytes())
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')}")
    return header, arrays
