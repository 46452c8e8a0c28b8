import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fmer import checkpoint as ckpt
from fmer.checkpoint import CheckpointError

f32_arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                        elements=st.floats(-1e6, 1e6, width=32))


@settings(max_examples=50, deadline=None)
@given(arr=f32_arrays, ints=hnp.arrays(np.int64, st.integers(0, 6)), raw=st.binary(max_size=64))
def test_roundtrip(tmp_path_factory, arr, ints, raw):
    path = tmp_path_factory.mktemp("ck") / "x.fmer"
    ckpt.save(path, "seed = 3\n", {"f": arr.astype(np.float64), "i": ints, "b": raw})
    text, sec = ckpt.load(path)
    assert text == "seed = 3\n"
    np.testing.assert_array_equal(sec["f"], arr.astype(np.float64))
    assert sec["f"].shape == arr.shape and sec["f"].dtype == np.float64
    np.testing.assert_array_equal(sec["i"], ints)
    assert sec["b"] == raw


def test_quantize_is_idempotent(rng):
    x = rng.standard_normal(100)
    q = ckpt.quantize(x)
    assert np.array_equal(ckpt.quantize(q), q)
    assert np.max(np.abs(q - x)) < 1e-6


def _written(tmp_path):
    path = tmp_path / "a.fmer"
    ckpt.save(path, "", {"w": np.arange(6.0).reshape(2, 3)})
    return path


def test_bad_magic(tmp_path):
    path = _written(tmp_path)
    path.write_bytes(b"XXXXX" + path.read_bytes()[5:])
    with pytest.raises(CheckpointError, match="magic"):
        ckpt.load(path)


def test_bad_version(tmp_path):
    path = _written(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[5:9] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        ckpt.load(path)


@pytest.mark.parametrize("cut", [3, 12, 20, 40])
def test_truncated(tmp_path, cut):
    path = _written(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - cut] if cut < len(raw) else raw[:4])
    with pytest.raises(CheckpointError):
        ckpt.load(path)


def test_object_arrays_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        ckpt.save(tmp_path / "o.fmer", "", {"o": np.array(["a"], dtype=object)})
