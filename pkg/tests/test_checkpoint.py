import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitlora.checkpoint import (
    BadMagicError,
    CheckpointError,
    ChecksumError,
    TruncatedCheckpointError,
    VersionMismatchError,
    dumps,
    load,
    loads,
    save,
)
from helpers import assert_same, random_checkpoint


def test_round_trip_many_random_checkpoints():
    for seed in range(100):
        ck = random_checkpoint(seed)
        data = dumps(ck)
        back = loads(data)
        assert_same(ck, back)
        assert dumps(back) == data


def test_save_load_save_is_byte_identical(tmp_path):
    ck = random_checkpoint(3)
    p1, p2 = tmp_path / "a.uzlr", tmp_path / "b.uzlr"
    save(ck, p1)
    save(load(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_supports_survive():
    ck = random_checkpoint(4)
    for s in (ck.content, ck.style):
        for lid in s.layer_ids():
            s.mask(lid).restrict([])
    back = loads(dumps(ck))
    assert all(back.content.mask(l).support.size == 0 for l in back.content.layer_ids())


def test_header_layout():
    ck = random_checkpoint(5)
    data = dumps(ck)
    assert data[:4] == b"UZLR"
    version, h, v = struct.unpack("<IQQ", data[4:24])
    assert (version, h, v) == (1, ck.config_hash, ck.vocab_seed)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_distinct_errors():
    data = dumps(random_checkpoint(6))
    with pytest.raises(BadMagicError):
        loads(b"XZLR" + data[4:])
    with pytest.raises(VersionMismatchError):
        loads(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(TruncatedCheckpointError):
        loads(data[:40])
    payload = bytearray(data)
    payload[30] ^= 0x01
    with pytest.raises(ChecksumError):
        loads(bytes(payload))
    for cls in (BadMagicError, VersionMismatchError, TruncatedCheckpointError, ChecksumError):
        assert issubclass(cls, CheckpointError)


def test_every_single_byte_corruption_is_detected():
    data = dumps(random_checkpoint(7))
    rng = np.random.default_rng(0)
    for i in range(len(data)):
        bad = bytearray(data)
        bad[i] ^= int(rng.integers(1, 256))
        with pytest.raises(CheckpointError):
            loads(bytes(bad))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.data())
def test_random_corruption_and_truncation(seed, data):
    raw = dumps(random_checkpoint(seed))
    cut = data.draw(st.integers(0, len(raw) - 1))
    with pytest.raises(CheckpointError):
        loads(raw[:cut])
    pos = data.draw(st.integers(0, len(raw) - 1))
    flip = data.draw(st.integers(1, 255))
    bad = bytearray(raw)
    bad[pos] ^= flip
    with pytest.raises(CheckpointError):
        loads(bytes(bad))


def test_unknown_policy_mode_rejected():
    ck = random_checkpoint(8)
    ck.policy = {"blk0": "half-sparse"}
    with pytest.raises(ValueError):
        dumps(ck)
