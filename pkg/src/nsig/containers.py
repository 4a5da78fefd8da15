"""Binary parameter containers.

Layout::

    magic      4 bytes ASCII ("NSIG", "NSCB", "NSEX")
    version    u16 little-endian
    hdr_len    u32 little-endian
    header     hdr_len bytes of UTF-8 JSON (sorted keys); its "arrays" entry
               lists {"name", "shape"} in payload order
    payload    little-endian float32 arrays, concatenated in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1


def pack(magic: bytes, header: dict, arrays: Sequence[tuple[str, np.ndarray]], version: int = FORMAT_VERSION) -> bytes:
    header = dict(header)
    header["arrays"] = [{"name": name, "shape": list(a.shape)} for name, a in arrays]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<HI", version, len(hdr)), hdr]
    for _, a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def unpack(data: bytes, magic: bytes, version: int = FORMAT_VERSION) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 10 or data[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {data[:4]!r}")
    ver, hlen = struct.unpack_from("<HI", data, 4)
    if ver != version:
        raise FormatError(f"unsupported {magic.decode()} version {ver} (expected {version})")
    try:
        header = json.loads(data[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    offset = 10 + hlen
    arrays = {}
    for spec in header.get("arrays", []):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise FormatError(f"truncated payload at array '{spec['name']}'")
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after payload")
    return header, arrays


def write(path: str | Path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def read(path: str | Path) -> bytes:
    return Path(path).read_bytes()
