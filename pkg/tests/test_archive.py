import numpy as np
import pytest

from promptreid.archive import load_archive, save_archive
from promptreid.errors import ParseError


def test_roundtrip(tmp_path):
    path = tmp_path / "weights.ntar"
    rng = np.random.default_rng(0)
    tensors = {
        "enc.weight": rng.normal(size=(4, 7)),
        "enc.bias": np.zeros(7),
        "step": np.array(42.0),
        "ids": np.arange(5, dtype=np.int64),
    }
    save_archive(path, tensors)
    loaded = load_archive(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])
        assert loaded[name].dtype == tensors[name].dtype


def test_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"definitely not an archive")
    with pytest.raises(ParseError):
        load_archive(path)


def test_write_is_deterministic(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float64).reshape(2, 3)}
    p1, p2 = tmp_path / "one.ntar", tmp_path / "two.ntar"
    save_archive(p1, tensors)
    save_archive(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()
