"""Portable named-array archive (``.tmr``) used for checkpoints and datasets.

Layout::

    bytes 0-3     magic b"TMR1"
    bytes 4-11    manifest length M, little-endian u64
    bytes 12..    UTF-8 JSON manifest (M bytes)
    remainder     blob of raw little-endian, row-major arrays

The manifest is a JSON object ``{"version": 1, "attrs": {...}, "arrays": [...]}``
where each array entry carries ``name``, ``dtype`` (``f32``/``f64``/``i64``),
``shape``, ``offset`` and ``length`` (bytes, relative to the blob start).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"TMR1"
FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


class ArchiveError(Exception):
    pass


class DuplicateNameError(ArchiveError):
    pass


class CorruptArchiveError(ArchiveError):
    pass


class TruncatedArchiveError(CorruptArchiveError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ArchiveError(f"unsupported dtype {arr.dtype}; expected float32, float64 or int64")
    return code


def archive_bytes(entries: Iterable[tuple[str, np.ndarray]], attrs: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    seen = set()
    for name, arr in entries:
        if name in seen:
            raise DuplicateNameError(f"duplicate array name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
        manifest.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "length": len(data)}
        )
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {"version": FORMAT_VERSION, "attrs": attrs or {}, "arrays": manifest}, sort_keys=True
    ).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(header)), header, *chunks])


def archive_write(entries: Iterable[tuple[str, np.ndarray]], path, attrs: dict | None = None) -> None:
    """Write ``entries`` atomically (temp file in the target directory, then rename)."""
    payload = archive_bytes(entries, attrs)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse(payload: bytes) -> tuple[dict, memoryview]:
    if len(payload) < 12 or payload[:4] != MAGIC:
        raise CorruptArchiveError("bad magic bytes: not a TMR1 archive")
    (mlen,) = struct.unpack("<Q", payload[4:12])
    if 12 + mlen > len(payload):
        raise TruncatedArchiveError("manifest extends past end of file")
    try:
        manifest = json.loads(payload[12 : 12 + mlen].decode("utf-8"))
        arrays = manifest["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptArchiveError(f"unreadable manifest: {exc}") from None
    blob = memoryview(payload)[12 + mlen :]

    names = set()
    spans = []
    for entry in arrays:
        name, code = entry["name"], entry["dtype"]
        if name in names:
            raise DuplicateNameError(f"duplicate array name {name!r} in manifest")
        names.add(name)
        if code not in _DTYPES:
            raise CorruptArchiveError(f"{name}: unknown dtype {code!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["length"] != count * _DTYPES[code].itemsize:
            raise CorruptArchiveError(f"{name}: byte length does not match shape and dtype")
        if entry["offset"] < 0 or entry["offset"] + entry["length"] > len(blob):
            raise TruncatedArchiveError(f"{name}: data extends past end of file")
        spans.append((entry["offset"], entry["offset"] + entry["length"], name))
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CorruptArchiveError(f"arrays {a!r} and {b!r} overlap")
    return manifest, blob


def archive_from_bytes(payload: bytes) -> list[tuple[str, np.ndarray]]:
    manifest, blob = _parse(payload)
    out = []
    for entry in manifest["arrays"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["length"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        out.append((entry["name"], arr.astype(arr.dtype.newbyteorder("="), copy=True)))
    return out


def archive_read(path) -> list[tuple[str, np.ndarray]]:
    return archive_from_bytes(Path(path).read_bytes())


def archive_manifest(path) -> dict:
    """Return the parsed manifest (``version``, ``attrs``, ``arrays``) without copying data."""
    manifest, _ = _parse(Path(path).read_bytes())
    return manifest


def archive_attrs(path) -> dict:
    return archive_manifest(path).get("attrs", {})


def read_dict(path) -> dict[str, np.ndarray]:
    return dict(archive_read(path))
