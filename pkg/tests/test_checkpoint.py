import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiprize.checkpoint import (
    MAGIC,
    Checkpoint,
    from_bytes,
    load_checkpoint,
    pack_mask,
    save_checkpoint,
    to_bytes,
    unpack_mask,
)
from multiprize.errors import FormatError

from conftest import random_checkpoint, tiny_spec


def assert_bit_identical(a: Checkpoint, b: Checkpoint):
    assert a.spec == b.spec
    for xs, ys in ((a.weights, b.weights), (a.scores, b.scores), (a.masks, b.masks)):
        for x, y in zip(xs, ys):
            assert x.dtype == y.dtype and x.tobytes() == y.tobytes()
    assert (a.alpha, a.seed, a.phase, a.scales) == (b.alpha, b.seed, b.phase, b.scales)


def test_mask_packing_lsb_first():
    assert pack_mask(np.array([1, 0, 1, 1, 0, 0, 0, 0], bool)) == b"\x0d"
    assert pack_mask(np.array([1, 0, 0, 0, 0, 0, 0, 0, 1], bool)) == b"\x01\x01"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40))
def test_mask_pack_round_trip(bits):
    m = np.array(bits)
    blob = pack_mask(m)
    assert len(blob) == (len(bits) + 7) // 8
    np.testing.assert_array_equal(unpack_mask(blob, m.shape), m)


def test_save_load_round_trip(tmp_path):
    ck = random_checkpoint(np.random.default_rng(0), tiny_spec(), 0.5)
    save_checkpoint(ck, tmp_path / "c.mpt")
    assert_bit_identical(ck, load_checkpoint(tmp_path / "c.mpt"))
    assert to_bytes(load_checkpoint(tmp_path / "c.mpt")) == (tmp_path / "c.mpt").read_bytes()


def test_header_layout():
    blob = to_bytes(random_checkpoint(np.random.default_rng(1), tiny_spec(), 0.5))
    assert blob[:4] == MAGIC == b"MPT1"
    assert struct.unpack("<I", blob[4:8]) == (1,)


def _blob():
    return bytearray(to_bytes(random_checkpoint(np.random.default_rng(2), tiny_spec(), 0.5)))


def test_bad_magic():
    blob = _blob()
    blob[0] ^= 0xFF
    with pytest.raises(FormatError, match="bad magic"):
        from_bytes(bytes(blob))


def test_version_mismatch():
    blob = _blob()
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version"):
        from_bytes(bytes(blob))


@pytest.mark.parametrize("cut", [1, 9, 500])
def test_truncation(cut):
    with pytest.raises(FormatError, match="truncated"):
        from_bytes(bytes(_blob()[:-cut]))


def test_trailing_bytes():
    with pytest.raises(FormatError, match="trailing"):
        from_bytes(bytes(_blob()) + b"\x00")


def test_scale_mismatch_rejected():
    ck = random_checkpoint(np.random.default_rng(3), tiny_spec(), 0.5)
    ck.scales[1] *= 1.001
    with pytest.raises(FormatError, match="scale"):
        from_bytes(to_bytes(ck))


def test_shape_mismatch_rejected():
    ck = random_checkpoint(np.random.default_rng(4), tiny_spec(), 0.5)
    with pytest.raises(FormatError):
        Checkpoint(ck.spec, ck.weights[:-1] + [np.zeros((2, 2), np.float32)], ck.scores, ck.masks, 1.0)


def test_binarized_uses_scale_times_sign():
    ck = random_checkpoint(np.random.default_rng(5), tiny_spec(), 0.5)
    for W, M, eff, scale in zip(ck.weights, ck.masks, ck.binarized(), ck.scales):
        np.testing.assert_allclose(np.abs(eff[M]), scale, rtol=1e-6)
        assert np.all(eff[~M] == 0)
        assert np.all(np.sign(eff[M]) == np.where(W[M] >= 0, 1, -1))
