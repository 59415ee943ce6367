"""Binary array container shared by model, customer-bank and world artifacts.

Layout::

    FDNA-ARTIFACT <version>\n
    meta <key> <value>\n          (zero or more, value is the rest of the line)
    array <name> <rows> <cols>\n  (one per array, in storage order)
    END\n
    <row-major float64 little-endian payload of every array, in order>

A companion file ``<path>.sha256`` holds one line ``<hex digest>  <basename>``.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_MAGIC = "FDNA-ARTIFACT"


class ArtifactError(ValueError):
    pass


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def encode_artifact(meta: dict, arrays: dict) -> bytes:
    lines = [f"{_MAGIC} {FORMAT_VERSION}"]
    for key, value in meta.items():
        key = str(key)
        value = str(value)
        if not key or any(c.isspace() for c in key) or "\n" in value:
            raise ArtifactError(f"bad meta entry {key!r}")
        lines.append(f"meta {key} {value}")
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim == 1:
            rows, cols = 1, arr.shape[0]
        elif arr.ndim == 2:
            rows, cols = arr.shape
        else:
            raise ArtifactError(f"array {name!r} must be 1-D or 2-D")
        if any(c.isspace() for c in name):
            raise ArtifactError(f"bad array name {name!r}")
        kind = "vector" if arr.ndim == 1 else "matrix"
        lines.append(f"array {name} {rows} {cols} {kind}")
        payload.append(np.ascontiguousarray(arr).tobytes())
    lines.append("END")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(payload)


def decode_artifact(data: bytes) -> tuple[dict, dict]:
    meta: dict[str, str] = {}
    specs = []
    pos = 0
    first = True
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise ArtifactError("truncated header")
        line = data[pos:end].decode("utf-8")
        pos = end + 1
        if first:
            magic, _, version = line.partition(" ")
            if magic != _MAGIC:
                raise ArtifactError("not an fdna artifact")
            if int(version) != FORMAT_VERSION:
                raise ArtifactError(f"unsupported artifact version {version}")
            first = False
            continue
        if line == "END":
            break
        tag, _, rest = line.partition(" ")
        if tag == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif tag == "array":
            name, rows, cols, kind = rest.split(" ")
            specs.append((name, int(rows), int(cols), kind))
        else:
            raise ArtifactError(f"unknown header line {line!r}")
    arrays = {}
    for name, rows, cols, kind in specs:
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise ArtifactError(f"payload truncated in array {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).astype(np.float64)
        arrays[name] = arr if kind == "vector" else arr.reshape(rows, cols)
        pos += nbytes
    if pos != len(data):
        raise ArtifactError("trailing bytes after payload")
    return meta, arrays


def write_artifact(path, meta: dict, arrays: dict) -> str:
    """Write the container and its checksum companion; return the digest."""
    path = Path(path)
    data = encode_artifact(meta, arrays)
    digest = sha256_bytes(data)
    path.write_bytes(data)
    Path(str(path) + ".sha256").write_text(f"{digest}  {path.name}\n")
    return digest


def read_artifact(path, verify: bool = True) -> tuple[dict, dict]:
    path = Path(path)
    data = path.read_bytes()
    if verify:
        companion = Path(str(path) + ".sha256")
        if companion.exists():
            expected = companion.read_text().split()[0]
            actual = sha256_bytes(data)
            if expected != actual:
                raise ArtifactError(f"checksum mismatch for {path.name}: {actual} != {expected}")
    return decode_artifact(data)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
