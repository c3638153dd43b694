import json
import struct

import numpy as np
import pytest

from mgimn.checkpoint import load_tensors, quantize, save_tensors
from mgimn.errors import LoadError


def test_round_trip_is_float32_exact(tmp_path, rng):
    tensors = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "s": np.array(2.5)}
    path = tmp_path / "t.ckpt"
    save_tensors(path, tensors, {"note": "x"})
    loaded, meta = load_tensors(path)
    assert meta == {"note": "x"}
    assert list(loaded) == ["a", "b", "s"]
    for name, value in quantize(tensors).items():
        assert loaded[name].dtype == np.float64
        np.testing.assert_array_equal(loaded[name], value)


def test_layout(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"w": np.array([1.0, -2.0])})
    raw = path.read_bytes()
    end = raw.index(b"\n") + 1
    header = json.loads(raw[:end])
    assert header["tensors"]["w"] == {"shape": [2], "offset": 0}
    assert struct.unpack("<Q", raw[end:end + 8])[0] == end
    assert np.frombuffer(raw[end + 8:], dtype="<f4").tolist() == [1.0, -2.0]


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"w": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(LoadError, match="w"):
        load_tensors(path)


def test_bad_header_length(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"w": np.ones(2)})
    raw = bytearray(path.read_bytes())
    end = raw.index(b"\n") + 1
    raw[end:end + 8] = struct.pack("<Q", end + 3)
    path.write_bytes(bytes(raw))
    with pytest.raises(LoadError, match="header length"):
        load_tensors(path)


def test_missing_and_garbage_files(tmp_path):
    with pytest.raises(LoadError):
        load_tensors(tmp_path / "nope.ckpt")
    (tmp_path / "junk").write_bytes(b"no newline here")
    with pytest.raises(LoadError):
        load_tensors(tmp_path / "junk")
