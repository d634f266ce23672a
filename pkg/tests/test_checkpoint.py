import struct

import numpy as np
import pytest

from sfqn.checkpoint import (MAGIC, VERSION, CheckpointFormatError,
                             load_records, save_records)


def test_roundtrip_preserves_names_shapes_values(tmp_path):
    rng = np.random.default_rng(0)
    records = {
        "scalarish": rng.standard_normal(1),
        "weights/w1": rng.standard_normal((3, 4)),
        "conv.k": rng.standard_normal((2, 3, 3, 3)),
    }
    path = tmp_path / "net.sfqn"
    save_records(path, records)
    loaded = load_records(path)
    assert list(loaded) == list(records)
    for name, arr in records.items():
        assert loaded[name].shape == arr.shape
        # values survive the float32 round-trip
        assert np.allclose(loaded[name], arr, atol=1e-6)


def test_header_layout(tmp_path):
    path = tmp_path / "one.sfqn"
    save_records(path, {"ab": np.zeros((2, 2), dtype=np.float64)})
    data = path.read_bytes()
    assert data[:4] == MAGIC
    assert struct.unpack_from("<H", data, 4)[0] == VERSION
    assert struct.unpack_from("<H", data, 6)[0] == 2          # name length
    assert data[8:10] == b"ab"
    assert data[10] == 2                                      # rank
    assert struct.unpack_from("<2I", data, 11) == (2, 2)
    assert len(data) == 11 + 8 + 4 * 4


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.sfqn"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointFormatError):
        load_records(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "bad.sfqn"
    path.write_bytes(MAGIC + struct.pack("<H", 99))
    with pytest.raises(CheckpointFormatError):
        load_records(path)


def test_rank_limit_enforced(tmp_path):
    with pytest.raises(CheckpointFormatError):
        save_records(tmp_path / "x.sfqn", {"big": np.zeros((1,) * 5)})
