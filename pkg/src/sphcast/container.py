"""Shared binary container used by dataset, statistics and checkpoint files.

Layout (all integers little-endian)::

    magic        4 bytes   b"KYWX" dataset | b"KYST" statistics | b"KYCK" checkpoint
    version      u32
    header_len   u32
    header       header_len bytes of UTF-8 JSON (sorted keys)
    blocks       raw little-endian arrays, in the order listed in header["blocks"]

Each entry of ``header["blocks"]`` is ``{"name", "dtype", "shape"}``; dtypes
are numpy little-endian codes such as ``"<f4"``, ``"<f8"``, ``"<i8"``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

VERSION = 1


class FormatError(ValueError):
    """A file does not follow the container layout it claims."""


def names_checksum(names) -> str:
    """SHA-256 over the ordered variable names, newline separated."""
    return hashlib.sha256("\n".join(names).encode()).hexdigest()


def write_container(path, magic: bytes, header: dict, blocks: dict[str, np.ndarray]) -> None:
    specs = []
    payload = []
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        arr = np.ascontiguousarray(arr, dtype=le)
        specs.append({"name": name, "dtype": le.str, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = dict(header, blocks=specs)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for chunk in payload:
            fh.write(chunk)
    os.replace(tmp, path)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FormatError(f"{path}: file too short for a container header")
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if 12 + hlen > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    offset = 12 + hlen
    blocks = {}
    expected = sum(int(np.dtype(b["dtype"]).itemsize * np.prod(b["shape"], dtype=np.int64))
                   for b in header.get("blocks", []))
    if len(data) - offset != expected:
        raise FormatError(
            f"{path}: payload is {len(data) - offset} bytes, header declares {expected}"
        )
    for spec in header["blocks"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=n, offset=offset).reshape(spec["shape"])
        blocks[spec["name"]] = arr.copy()
        offset += n * dt.itemsize
    return header, blocks
