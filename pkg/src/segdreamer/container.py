"""Chunked binary container used for episodes, mask sets and checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"SDCNTNR\\0"
    version      uint32    FORMAT_VERSION
    header_len   uint32
    header       header_len bytes of UTF-8 JSON (object; always has "kind")
    chunk*       until end of file:
        name_len     uint16
        name         name_len bytes UTF-8
        payload_len  uint64
        payload      one array in .npy format (no pickled objects)

Readers reject a different magic and any version newer than FORMAT_VERSION.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from segdreamer.errors import CheckpointError

MAGIC = b"SDCNTNR\0"
FORMAT_VERSION = 1


def write_container(path, kind: str, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(header)
    meta["kind"] = kind
    meta["chunks"] = list(arrays)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
            payload = buf.getvalue()
            key = name.encode("utf-8")
            f.write(struct.pack("<H", len(key)))
            f.write(key)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)
    tmp.replace(path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        header = _read_header(f, path)
        if kind is not None and header.get("kind") != kind:
            raise CheckpointError(f"{path}: expected a '{kind}' container, found '{header.get('kind')}'")
        while True:
            raw = f.read(2)
            if not raw:
                break
            if len(raw) < 2:
                raise CheckpointError(f"{path}: truncated chunk header")
            (name_len,) = struct.unpack("<H", raw)
            name = f.read(name_len).decode("utf-8")
            (size,) = struct.unpack("<Q", f.read(8))
            payload = f.read(size)
            if len(payload) != size:
                raise CheckpointError(f"{path}: truncated chunk '{name}'")
            arrays[name] = np.load(io.BytesIO(payload), allow_pickle=False)
    return header, arrays


def _read_header(f, path) -> dict:
    if f.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a segdreamer container")
    version, header_len = struct.unpack("<II", f.read(8))
    if version > FORMAT_VERSION:
        raise CheckpointError(f"{path}: container version {version} is newer than supported {FORMAT_VERSION}")
    header = json.loads(f.read(header_len).decode("utf-8"))
    header["format_version"] = version
    return header
