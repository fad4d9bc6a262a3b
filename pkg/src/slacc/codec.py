"""Wire formats for compressed smashed data.

SLC1 (quantised, little-endian)::

    "SLC1" | version u8 | direction u8 | round u32 | B C H W u32
    | g u16 | group id u16 x C | (bits u8, x_min f32, x_max f32) x g
    | codes, one byte-aligned MSB-first bit stream per channel
    | crc32 u32 over everything before it

SLK1 (top-k sparse)::

    "SLK1" | version u8 | direction u8 | round u32 | B C H W u32
    | count u32 | index u32 x count (strictly ascending) | value f32 x count
    | crc32 u32
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .cgc import ChannelGrouping, CompressionPlan, QuantizedSmashed, SparseSmashed
from .core import Direction, FormatError

MAGIC = b"SLC1"
SPARSE_MAGIC = b"SLK1"
VERSION = 1

_HEAD = struct.Struct("<4sBBI4I")  # magic, version, direction, round, B, C, H, W
_GROUP = struct.Struct("<Bff")
_CRC = struct.Struct("<I")
_WHOLE = {8: ">u1", 16: ">u2", 32: ">u4"}


def pack_codes(codes: np.ndarray, b: int) -> bytes:
    """Pack unsigned codes at ``b`` bits each, MSB first, zero-padded to a byte."""
    if b in _WHOLE:
        return np.asarray(codes).astype(_WHOLE[b]).tobytes()
    q = np.asarray(codes, dtype=np.uint32).reshape(-1)
    shifts = np.arange(b - 1, -1, -1, dtype=np.uint32)
    bits = ((q[:, None] >> shifts) & np.uint32(1)).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_codes(buf: bytes, n: int, b: int) -> np.ndarray:
    if b in _WHOLE:
        return np.frombuffer(buf, dtype=_WHOLE[b], count=n).astype(np.uint32)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n * b).reshape(n, b)
    weights = np.uint32(1) << np.arange(b - 1, -1, -1, dtype=np.uint32)
    return (bits.astype(np.uint32) * weights).sum(axis=1, dtype=np.uint32)


def channel_payload_bytes(n: int, b: int) -> int:
    return (n * b + 7) // 8


def header_size(c: int, g: int) -> int:
    return _HEAD.size + 2 + 2 * c + _GROUP.size * g


def encoded_size(q: QuantizedSmashed) -> int:
    b, c, h, w = q.shape
    n = b * h * w
    payload = sum(channel_payload_bytes(n, int(bits)) for bits in q.plan.channel_bits())
    return header_size(c, q.plan.g) + payload + _CRC.size


def encode(q: QuantizedSmashed) -> bytes:
    b, c, h, w = q.shape
    plan = q.plan
    parts = [
        _HEAD.pack(MAGIC, VERSION, int(q.direction), q.round, b, c, h, w),
        struct.pack("<H", plan.g),
        plan.grouping.assignment.astype("<u2").tobytes(),
    ]
    for bits, (lo, hi) in zip(plan.bits, plan.ranges):
        parts.append(_GROUP.pack(int(bits), lo, hi))
    channel_bits = plan.channel_bits()
    for ch in range(c):
        parts.append(pack_codes(q.codes[ch], int(channel_bits[ch])))
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def _read_head(blob: bytes, magic: bytes):
    if len(blob) < _HEAD.size + _CRC.size:
        raise FormatError("truncated header", len(blob))
    got_magic, version, direction, rnd, b, c, h, w = _HEAD.unpack_from(blob, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if direction not in (0, 1):
        raise FormatError(f"bad direction {direction}", 5)
    if min(b, c, h, w) == 0:
        raise FormatError("zero-sized dimension", 10)
    (crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if zlib.crc32(blob[: -_CRC.size]) != crc:
        raise FormatError("checksum mismatch", len(blob) - _CRC.size)
    return Direction(direction), rnd, (b, c, h, w)


def decode(blob: bytes) -> QuantizedSmashed:
    blob = bytes(blob)
    direction, rnd, shape = _read_head(blob, MAGIC)
    b, c, h, w = shape
    n = b * h * w
    pos = _HEAD.size
    end = len(blob) - _CRC.size
    if end < pos + 2 + 2 * c:
        raise FormatError("truncated group table", end)
    (g,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    if not 1 <= g <= c:
        raise FormatError(f"group count {g} invalid for {c} channels", pos - 2)
    assignment = np.frombuffer(blob, dtype="<u2", count=c, offset=pos).astype(np.int64)
    if assignment.max() >= g:
        raise FormatError("group id out of range", pos + 2 * int(np.argmax(assignment >= g)))
    if np.unique(assignment).size != g:
        raise FormatError("empty group in assignment", pos)
    pos += 2 * c
    if end < pos + _GROUP.size * g:
        raise FormatError("truncated group parameters", end)
    bits = np.empty(g, dtype=np.int64)
    ranges = np.empty((g, 2))
    for j in range(g):
        bj, lo, hi = _GROUP.unpack_from(blob, pos)
        if not 1 <= bj <= 32:
            raise FormatError(f"bit width {bj} out of range", pos)
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise FormatError("invalid group range", pos + 1)
        bits[j] = bj
        ranges[j] = lo, hi
        pos += _GROUP.size
    channel_bits = bits[assignment]
    sizes = [channel_payload_bytes(n, int(cb)) for cb in channel_bits]
    if end - pos != sum(sizes):
        raise FormatError(f"payload must be {sum(sizes)} bytes, got {end - pos}", pos)
    codes = np.empty((c, n), dtype=np.uint32)
    for ch in range(c):
        cb = int(channel_bits[ch])
        chunk = blob[pos : pos + sizes[ch]]
        pad = sizes[ch] * 8 - n * cb
        if pad and chunk[-1] & ((1 << pad) - 1):
            raise FormatError("non-zero padding bits", pos + sizes[ch] - 1)
        codes[ch] = unpack_codes(chunk, n, cb)
        pos += sizes[ch]
    grouping = ChannelGrouping(assignment, None)
    plan = CompressionPlan(grouping, None, bits, ranges)
    return QuantizedSmashed(plan, codes, shape, rnd, direction)


def encoded_sparse_size(s: SparseSmashed) -> int:
    return _HEAD.size + 4 + 8 * len(s.indices) + _CRC.size


def encode_sparse(s: SparseSmashed) -> bytes:
    b, c, h, w = s.shape
    body = b"".join([
        _HEAD.pack(SPARSE_MAGIC, VERSION, int(s.direction), s.round, b, c, h, w),
        struct.pack("<I", len(s.indices)),
        np.asarray(s.indices).astype("<u4").tobytes(),
        np.asarray(s.values).astype("<f4").tobytes(),
    ])
    return body + _CRC.pack(zlib.crc32(body))


def decode_sparse(blob: bytes) -> SparseSmashed:
    blob = bytes(blob)
    direction, rnd, shape = _read_head(blob, SPARSE_MAGIC)
    total = int(np.prod(shape, dtype=np.int64))
    pos = _HEAD.size
    end = len(blob) - _CRC.size
    if end < pos + 4:
        raise FormatError("truncated element count", end)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if count > total:
        raise FormatError(f"{count} elements exceed tensor size {total}", pos - 4)
    if end - pos != 8 * count:
        raise FormatError(f"sparse payload must be {8 * count} bytes, got {end - pos}", pos)
    idx = np.frombuffer(blob, dtype="<u4", count=count, offset=pos).astype(np.uint32)
    vals = np.frombuffer(blob, dtype="<f4", count=count, offset=pos + 4 * count).astype(np.float32)
    if count and (int(idx[-1]) >= total or np.any(np.diff(idx.astype(np.int64)) <= 0)):
        raise FormatError("indices not strictly ascending within tensor", pos)
    if not np.all(np.isfinite(vals)):
        raise FormatError("non-finite sparse value", pos + 4 * count)
    return SparseSmashed(idx, vals, shape, rnd, direction)
