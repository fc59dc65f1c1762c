"""Binary checkpoint holding a content/style LoRA pair.

Layout (little-endian)::

    b"UZLR"  u32 version  u64 config_hash  u64 vocab_seed
    policy:  u32 n_blocks, then per block: u16 name_len, name, u8 mode
    u32 n_layers, then per layer:
        u16 name_len, name (UTF-8), u8 role, u32 d_in, u32 d_out, u32 r,
        f64[d_in*r] B, f64[r*d_out] A,
        u32 |S|, u32[|S|] support, f64[|S|] mask values on the support
    u32 CRC32 of every preceding byte

Policy modes: 0 content-full, 1 style-full, 2 shared-sparse, 3 unmasked
(variants that train without column masks).
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .lora import CONTENT, STYLE, ColumnMask, LoraAdapter, LoraSet

MAGIC = b"UZLR"
VERSION = 1

POLICY_MODES = ("content-full", "style-full", "shared-sparse", "unmasked")
_ROLE_CODES = {CONTENT: 0, STYLE: 1}


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_hash: int
    vocab_seed: int
    content: LoraSet
    style: LoraSet
    policy: dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        return dumps(self)


# --------------------------------------------------------------------------- writing


def _name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQQ", ckpt.version, ckpt.config_hash, ckpt.vocab_seed))
    buf.write(struct.pack("<I", len(ckpt.policy)))
    for block, mode in ckpt.policy.items():
        _name(buf, block)
        buf.write(struct.pack("<B", POLICY_MODES.index(mode)))
    layers = [(lid, ckpt.content, a, m) for lid, (a, m) in ckpt.content.layers.items()]
    layers += [(lid, ckpt.style, a, m) for lid, (a, m) in ckpt.style.layers.items()]
    buf.write(struct.pack("<I", len(layers)))
    for lid, lset, adapter, mask in layers:
        _name(buf, lid)
        buf.write(struct.pack("<BIII", _ROLE_CODES[lset.role], adapter.d_in, adapter.d_out, adapter.rank))
        buf.write(np.ascontiguousarray(adapter.B.data, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(adapter.A.data, dtype="<f8").tobytes())
        buf.write(struct.pack("<I", len(mask.support)))
        buf.write(np.asarray(mask.support, dtype="<u4").tobytes())
        buf.write(np.ascontiguousarray(mask.values.data[mask.support], dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


# --------------------------------------------------------------------------- reading


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedCheckpointError(f"checkpoint ends early (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> bytes:
        (n,) = self.unpack("<H")
        return self.take(n)

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def loads(data: bytes) -> Checkpoint:
    """Parse and verify checkpoint bytes.

    The structure is walked first (running out of bytes means truncation),
    then the CRC is checked, and only then are values decoded and validated.
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    if len(data) < 8:
        raise TruncatedCheckpointError("checkpoint ends inside the header")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {VERSION}")
    if len(data) < 8 + 16 + 4:
        raise TruncatedCheckpointError("checkpoint ends inside the header")

    r = _Reader(data, len(data) - 4)
    r.take(8)
    config_hash, vocab_seed = r.unpack("<QQ")
    (n_blocks,) = r.unpack("<I")
    raw_policy = [(r.name(), r.unpack("<B")[0]) for _ in range(n_blocks)]
    (n_layers,) = r.unpack("<I")
    raw_layers = []
    for _ in range(n_layers):
        lid = r.name()
        role_code, d_in, d_out, rank = r.unpack("<BIII")
        B = r.f64(d_in * rank).reshape(d_in, rank)
        A = r.f64(rank * d_out).reshape(rank, d_out)
        (n_sup,) = r.unpack("<I")
        support = np.frombuffer(r.take(4 * n_sup), dtype="<u4").astype(np.int64)
        raw_layers.append((lid, role_code, d_out, B, A, support, r.f64(n_sup)))
    if r.pos != r.end:
        raise ChecksumError(f"{r.end - r.pos} unexpected bytes before the checksum")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("checksum mismatch")

    try:
        policy = {name.decode("utf-8"): POLICY_MODES[mode] for name, mode in raw_policy}
        sets = {CONTENT: LoraSet(CONTENT), STYLE: LoraSet(STYLE)}
        for lid_raw, role_code, d_out, B, A, support, vals in raw_layers:
            lid = lid_raw.decode("utf-8")
            role = (CONTENT, STYLE)[role_code]
            full = np.zeros(d_out)
            full[support] = vals
            adapter = LoraAdapter(lid, Tensor(B, name=f"{lid}.B"), Tensor(A, name=f"{lid}.A"))
            sets[role].layers[lid] = (adapter, ColumnMask(Tensor(full), support))
    except (IndexError, ValueError, FloatingPointError) as exc:
        raise CheckpointError(f"checkpoint content is invalid: {exc}") from None
    return Checkpoint(config_hash, vocab_seed, sets[CONTENT], sets[STYLE], policy, version)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
