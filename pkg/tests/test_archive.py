import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from timar.archive import (
    CorruptArchiveError, DuplicateNameError, TruncatedArchiveError, archive_attrs, archive_bytes,
    archive_from_bytes, archive_manifest, archive_read, archive_write,
)


def test_zero_array_roundtrip(tmp_path):
    path = tmp_path / "a.tmr"
    arr = np.zeros((2, 3), dtype=np.float32)
    archive_write([("x", arr)], path)
    ((name, back),) = archive_read(path)
    assert name == "x" and back.dtype == np.float32 and np.array_equal(back, arr)


def test_header_layout(tmp_path):
    payload = archive_bytes([("x", np.arange(3, dtype=np.int64))])
    assert payload[:4] == b"TMR1"
    (m,) = struct.unpack("<Q", payload[4:12])
    manifest = payload[12:12 + m].decode("utf-8")
    assert '"x"' in manifest
    assert payload[12 + m:] == np.arange(3, dtype="<i8").tobytes()


def test_duplicate_name(tmp_path):
    with pytest.raises(DuplicateNameError):
        archive_write([("a", np.zeros(1)), ("a", np.ones(1))], tmp_path / "d.tmr")
    assert not (tmp_path / "d.tmr").exists()


def test_wrong_magic(tmp_path):
    payload = bytearray(archive_bytes([("a", np.zeros(2))]))
    payload[:4] = b"XXXX"
    path = tmp_path / "bad.tmr"
    path.write_bytes(bytes(payload))
    with pytest.raises(CorruptArchiveError):
        archive_read(path)


def test_truncated_blob(tmp_path):
    payload = archive_bytes([("a", np.arange(10, dtype=np.float64))])
    path = tmp_path / "t.tmr"
    path.write_bytes(payload[:-8])
    with pytest.raises(TruncatedArchiveError):
        archive_read(path)
    with pytest.raises(CorruptArchiveError):
        archive_from_bytes(payload[:7])


def test_unsupported_dtype():
    with pytest.raises(Exception):
        archive_bytes([("a", np.zeros(2, dtype=np.complex128))])


def test_attrs_and_manifest(tmp_path):
    path = tmp_path / "m.tmr"
    archive_write([("w", np.ones((2, 2))), ("z", np.zeros((0, 4), dtype=np.float32))], path, attrs={"k": [1, 2]})
    assert archive_attrs(path) == {"k": [1, 2]}
    entries = archive_manifest(path)["arrays"]
    spans = sorted((e["offset"], e["offset"] + e["length"]) for e in entries)
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert [e["length"] for e in entries] == [32, 0]


dtypes = st.sampled_from([np.float32, np.float64, np.int64])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(dtypes, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)),
                max_size=5),
       st.integers(0, 2**32 - 1))
def test_roundtrip_bit_exact(specs, seed):
    rng = np.random.default_rng(seed)
    entries = []
    for i, (dt, shape) in enumerate(specs):
        if dt is np.int64:
            arr = rng.integers(-2**62, 2**62, size=shape, dtype=np.int64)
        else:
            arr = rng.standard_normal(shape).astype(dt)
        entries.append((f"arr{i}", arr))
    back = archive_from_bytes(archive_bytes(entries))
    assert [n for n, _ in back] == [n for n, _ in entries]
    for (_, a), (_, b) in zip(entries, back):
        assert a.dtype == b.dtype and a.shape == b.shape
        assert a.tobytes() == b.tobytes()
