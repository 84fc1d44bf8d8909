import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oatdar.errors import TensorFileError
from oatdar.tensorfile import (MAGIC, read_bundle, read_tensor, write_bundle,
                               write_tensor)


def test_roundtrip_f64(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 5, 2))
    p = write_tensor(tmp_path / "a.oatd", arr)
    back = read_tensor(p)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)


def test_roundtrip_f32(tmp_path):
    arr = np.random.default_rng(1).standard_normal((7,)).astype(np.float32)
    back = read_tensor(write_tensor(tmp_path / "a.oatd", arr))
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_scalar_and_empty(tmp_path):
    assert read_tensor(write_tensor(tmp_path / "s.oatd", np.float64(3.5))) == 3.5
    empty = read_tensor(write_tensor(tmp_path / "e.oatd", np.zeros((0, 4))))
    assert empty.shape == (0, 4)


def test_rejects_non_float(tmp_path):
    with pytest.raises(TensorFileError):
        write_tensor(tmp_path / "i.oatd", np.arange(4))


@settings(max_examples=30, deadline=None)
@given(st.data())
def test_fuzzed_corruption_rejected(tmp_path_factory, data):
    tmp_path = tmp_path_factory.mktemp("fuzz")
    arr = np.arange(24, dtype=np.float64).reshape(4, 6)
    p = write_tensor(tmp_path / "f.oatd", arr)
    raw = bytearray(p.read_bytes())
    mode = data.draw(st.sampled_from(["truncate", "flip", "extend"]))
    if mode == "truncate":
        cut = data.draw(st.integers(min_value=0, max_value=len(raw) - 1))
        raw = raw[:cut]
    elif mode == "flip":
        pos = data.draw(st.integers(min_value=0, max_value=len(raw) - 1))
        bit = data.draw(st.integers(min_value=0, max_value=7))
        raw[pos] ^= 1 << bit
    else:
        raw += b"\x00" * data.draw(st.integers(min_value=1, max_value=16))
    q = p.with_name("corrupt.oatd")
    q.write_bytes(bytes(raw))
    # every byte is covered by header validation, the length check, or the
    # payload CRC, so any single corruption must be rejected
    with pytest.raises(TensorFileError):
        read_tensor(q)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.oatd"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(TensorFileError):
        read_tensor(p)


def test_bundle_roundtrip(tmp_path):
    arrays = {"w": np.random.default_rng(2).standard_normal((4, 4)),
              "b": np.zeros(4, dtype=np.float32)}
    meta = {"note": "hello", "n": 3}
    write_bundle(tmp_path / "b", arrays, meta)
    back, meta2 = read_bundle(tmp_path / "b")
    assert meta2 == meta
    assert set(back) == {"w", "b"}
    assert np.array_equal(back["w"], arrays["w"])
    assert np.array_equal(back["b"], arrays["b"])


def test_bundle_missing_manifest(tmp_path):
    (tmp_path / "nb").mkdir()
    with pytest.raises(TensorFileError):
        read_bundle(tmp_path / "nb")
