"""Binary checkpoint container shared by baseline and task artifacts.

Layout (little-endian)::

    b"MTMK" | version u16 | kind u8 (0 baseline, 1 task)
    descriptor length u32 | canonical JSON, UTF-8
    records, each:
        name length u16 | name UTF-8 | dtype u8 | rank u8 | extents u32 * rank | payload
    SHA-256 of every preceding byte (32 bytes)

Payloads are raw float32 arrays or bit-packed masks (row-major, least
significant bit first, zero-padded to a whole byte).
"""
from __future__ import annotations

import hashlib
import os
import json
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"MTMK"
VERSION = 1
KIND_BASELINE = 0
KIND_TASK = 1
DTYPE_F32 = 0
DTYPE_BITS = 1
DIGEST_SIZE = 32


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def pack_bits(mask: np.ndarray) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).ravel(), bitorder="little").tobytes()


def unpack_bits(raw: bytes, shape: tuple) -> np.ndarray:
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little", count=n)
    return bits.astype(bool).reshape(shape)


def payload_size(dtype: int, shape: tuple) -> int:
    n = int(np.prod(shape)) if shape else 1
    return 4 * n if dtype == DTYPE_F32 else (n + 7) // 8


@dataclass
class Record:
    name: str
    dtype: int
    shape: tuple
    payload: bytes

    @property
    def payload_bytes(self) -> int:
        return len(self.payload)

    def array(self) -> np.ndarray:
        if self.dtype == DTYPE_F32:
            return np.frombuffer(self.payload, dtype="<f4").reshape(self.shape).copy()
        return unpack_bits(self.payload, self.shape)


@dataclass
class Container:
    kind: int
    descriptor: dict
    records: list = field(default_factory=list)

    def add_array(self, name: str, arr) -> None:
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        self.records.append(Record(name, DTYPE_F32, arr.shape, arr.tobytes()))

    def add_mask(self, name: str, mask) -> None:
        mask = np.asarray(mask, dtype=bool)
        self.records.append(Record(name, DTYPE_BITS, mask.shape, pack_bits(mask)))

    def get(self, name: str) -> np.ndarray:
        for rec in self.records:
            if rec.name == name:
                return rec.array()
        raise KeyError(name)

    def names(self) -> list:
        return [r.name for r in self.records]

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC + struct.pack("<HB", VERSION, self.kind)
        desc = canonical_json(self.descriptor)
        out += struct.pack("<I", len(desc)) + desc
        for rec in self.records:
            name = rec.name.encode("utf-8")
            out += struct.pack("<H", len(name)) + name
            out += struct.pack("<BB", rec.dtype, len(rec.shape))
            out += struct.pack(f"<{len(rec.shape)}I", *rec.shape)
            out += rec.payload
        out += hashlib.sha256(out).digest()
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Container":
        if raw[:4] != MAGIC:
            raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
        if len(raw) < 7:
            raise TruncatedError("file ends inside the header")
        version, kind = struct.unpack_from("<HB", raw, 4)
        if version != VERSION:
            raise VersionError(f"unsupported version {version}, expected {VERSION}")
        end = len(raw) - DIGEST_SIZE
        pos = 7

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > end:
                raise TruncatedError(f"record runs past the end of the data at offset {pos}")
            chunk = raw[pos:pos + n]
            pos += n
            return chunk

        (dlen,) = struct.unpack("<I", take(4))
        desc_raw = take(dlen)
        raw_records = []
        while pos < end:
            (nlen,) = struct.unpack("<H", take(2))
            name = take(nlen)
            dtype, rank = struct.unpack("<BB", take(2))
            if dtype not in (DTYPE_F32, DTYPE_BITS):
                raise CheckpointError(f"unknown dtype tag {dtype} at offset {pos - 2}")
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            raw_records.append((name, dtype, shape, take(payload_size(dtype, shape))))

        digest = raw[end:]
        if hashlib.sha256(raw[:end]).digest() != digest:
            raise DigestMismatchError("content digest does not match")
        records = [Record(n.decode("utf-8"), d, tuple(s), p) for n, d, s, p in raw_records]
        return cls(kind, json.loads(desc_raw.decode("utf-8")), records)


def digest_of(raw: bytes) -> str:
    return raw[-DIGEST_SIZE:].hex()


def write(path: Union[str, Path], container: Container) -> bytes:
    """Write through a temporary sibling and rename, so readers never see a
    partial file; concurrent writers to one path: the last rename wins."""
    raw = container.to_bytes()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return raw


def read(path: Union[str, Path], kind: int = None) -> Container:
    c = Container.from_bytes(Path(path).read_bytes())
    if kind is not None and c.kind != kind:
        raise CheckpointError(f"{path}: expected kind {kind}, found {c.kind}")
    return c
