"""Named-tensor container used for checkpoints and cluster banks.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"CSETNSR\\0"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header (sorted keys, no whitespace)
    offset 16+H          payload: raw tensor bytes, back to back, in header order

The header holds ``format_version``, ``kind`` (``"checkpoint"``, ``"bank"``,
...), free-form ``metadata``, a ``tensors`` list of ``{name, dtype, shape,
offset, nbytes}`` with offsets relative to the payload start, and
``payload_sha256``. Tensors are written sorted by name, and nothing
time-dependent goes in the header, so equal contents give equal bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptFileError, PersistenceError, VersionError

MAGIC = b"CSETNSR\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sQ")


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def dumps(tensors: Mapping[str, np.ndarray], metadata: dict, kind: str) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = _canonical_json({
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "metadata": metadata,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    })
    return _PREFIX.pack(MAGIC, len(header)) + header + payload


def loads(blob: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _PREFIX.size:
        raise CorruptFileError("file is shorter than the container prefix")
    magic, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptFileError("bad magic bytes; not a tensor container")
    if len(blob) < _PREFIX.size + hlen:
        raise CorruptFileError("header is truncated")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"header is not valid JSON: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    if kind is not None and header.get("kind") != kind:
        raise CorruptFileError(f"container holds a {header.get('kind')!r}, expected {kind!r}")
    payload = blob[_PREFIX.size + hlen:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CorruptFileError(f"payload is {len(payload)} bytes, header declares {expected}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptFileError("payload checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, header["metadata"]


def save(path, tensors: Mapping[str, np.ndarray], metadata: dict, kind: str) -> bytes:
    """Serialize and write atomically; returns the bytes written."""
    blob = dumps(tensors, metadata, kind)
    write_blob(path, blob)
    return blob


def write_blob(path, blob: bytes) -> None:
    """Write via a temp file and rename so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise PersistenceError(f"could not write {path}: {exc}") from exc


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"could not read {path}: {exc}") from exc
    return loads(blob, kind)


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()
