"""DYTX checkpoint binary format."""

import struct

import numpy as np
import pytest

from dytex.ncore import load_tensors, save_tensors


def test_roundtrip_preserves_names_shapes_values(tmp_path):
    rng = np.random.default_rng(0)
    named = {
        "vqvae/enc_w": rng.normal(size=(4, 3, 2, 2)).astype(np.float32),
        "gpt/bias": rng.normal(size=(7,)).astype(np.float32),
        "scalarish": np.asarray([1.5], dtype=np.float32),
    }
    path = tmp_path / "c.dytx"
    save_tensors(path, named)
    back = load_tensors(path)
    assert set(back) == set(named)
    for k in named:
        assert back[k].shape == named[k].shape
        assert np.array_equal(back[k], named[k])


def test_header_layout(tmp_path):
    path = tmp_path / "c.dytx"
    save_tensors(path, {"ab": np.zeros((2, 3), dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == b"DYTX"
    version, count = struct.unpack("<HI", raw[4:10])
    assert (version, count) == (1, 1)
    (nlen,) = struct.unpack("<H", raw[10:12])
    assert raw[12:12 + nlen] == b"ab"
    (rank,) = struct.unpack("<B", raw[14:15])
    assert rank == 2
    assert struct.unpack("<2I", raw[15:23]) == (2, 3)
    assert len(raw) == 23 + 2 * 3 * 4  # float32 little-endian payload


def test_values_stored_little_endian_float32(tmp_path):
    path = tmp_path / "c.dytx"
    save_tensors(path, {"x": np.asarray([1.0, -2.0], dtype=np.float64)})
    raw = path.read_bytes()
    payload = raw[-8:]
    assert np.array_equal(np.frombuffer(payload, dtype="<f4"), [1.0, -2.0])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="DYTX"):
        load_tensors(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "v9.bin"
    path.write_bytes(b"DYTX" + struct.pack("<HI", 9, 0))
    with pytest.raises(ValueError, match="version"):
        load_tensors(path)
