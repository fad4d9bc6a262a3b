import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slacc import codec
from slacc.cgc import (
    ChannelGrouping,
    CompressionPlan,
    QuantizedSmashed,
    SparseSmashed,
    baseline_topk,
    baseline_uniform,
    compress,
)
from slacc.core import Direction, FormatError, SmashedData


def random_quantized(rng, max_c=6, max_dim=4) -> QuantizedSmashed:
    b, c, h, w = (int(rng.integers(1, max_dim + 1)), int(rng.integers(1, max_c + 1)),
                  int(rng.integers(1, max_dim + 1)), int(rng.integers(1, max_dim + 1)))
    g = int(rng.integers(1, c + 1))
    assignment = np.concatenate([np.arange(g), rng.integers(0, g, size=c - g)])
    rng.shuffle(assignment)
    bits = rng.integers(1, 33, size=g)
    lo = rng.normal(scale=5, size=g).astype(np.float32)
    hi = lo + np.abs(rng.normal(scale=5, size=g)).astype(np.float32)
    ranges = np.stack([lo, np.maximum(lo, hi)], axis=1).astype(np.float64)
    n = b * h * w
    codes = np.stack([
        rng.integers(0, 2 ** int(bits[a]), size=n, dtype=np.uint64).astype(np.uint32) for a in assignment
    ])
    plan = CompressionPlan(ChannelGrouping(assignment.astype(np.int64), None), None, bits.astype(np.int64), ranges)
    return QuantizedSmashed(plan, codes, (b, c, h, w), int(rng.integers(0, 2**32)),
                            Direction(int(rng.integers(0, 2))))


def hand_blob(codes, bits):
    q = QuantizedSmashed(
        CompressionPlan(ChannelGrouping(np.zeros(1, dtype=np.int64), None), None,
                        np.array([bits]), np.array([[0.0, 1.0]])),
        np.array([codes], dtype=np.uint32), (1, 1, 1, len(codes)), 0, Direction.ACTIVATIONS)
    return q, codec.encode(q)


def test_hand_packed_example():
    q, blob = hand_blob([1, 2, 3], 2)
    header = codec.header_size(1, 1)
    assert blob[header:-4] == bytes([0b01101100])
    assert blob[header] == 0x6C
    assert codec.decode(blob) == q


def test_header_layout():
    q, blob = hand_blob([5, 0, 7], 3)
    magic, version, direction, rnd, b, c, h, w = struct.unpack_from("<4sBBI4I", blob)
    assert (magic, version, direction, rnd, b, c, h, w) == (b"SLC1", 1, 0, 0, 1, 1, 1, 3)
    (g,) = struct.unpack_from("<H", blob, 26)
    assert g == 1
    assert struct.unpack_from("<H", blob, 28) == (0,)
    assert struct.unpack_from("<Bff", blob, 30) == (3, 0.0, 1.0)
    assert blob[39:-4] == bytes([0b10100011, 0b10000000])
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


@pytest.mark.parametrize("b", range(1, 33))
def test_pack_unpack_all_widths(rng, b):
    n = 37
    q = rng.integers(0, 2**b, size=n, dtype=np.uint64).astype(np.uint32)
    buf = codec.pack_codes(q, b)
    assert len(buf) == codec.channel_payload_bytes(n, b)
    assert np.array_equal(codec.unpack_codes(buf, n, b), q)


def test_round_trip_random(rng):
    for _ in range(200):
        q = random_quantized(rng)
        blob = codec.encode(q)
        assert len(blob) == codec.encoded_size(q)
        back = codec.decode(blob)
        assert back == q
        assert codec.encode(back) == blob


def test_payload_length_accounting(rng):
    s = SmashedData(rng.normal(size=(3, 5, 3, 3)))
    q = compress(s, rng.uniform(0, 10, size=5), g=3)
    blob = codec.encode(q)
    n = s.channel_size
    payload = sum((n * int(b) + 7) // 8 for b in q.plan.channel_bits())
    assert len(blob) == codec.header_size(5, q.plan.g) + payload + 4


def test_compressed_round_trip_through_wire(rng):
    s = SmashedData(rng.normal(size=(2, 4, 3, 3)), round=3, direction=Direction.GRADIENTS)
    for q in (compress(s, rng.uniform(0, 10, size=4), g=2), baseline_uniform(s, 8)):
        assert codec.decode(codec.encode(q)) == q


def test_sparse_round_trip(rng):
    s = SmashedData(rng.normal(size=(2, 3, 4, 4)), round=9)
    sp = baseline_topk(s, 0.2, 0.05, seed=1)
    blob = codec.encode_sparse(sp)
    assert len(blob) == codec.encoded_sparse_size(sp)
    assert codec.decode_sparse(blob) == sp


def test_bad_magic_and_version():
    _, blob = hand_blob([1, 2, 3], 2)
    with pytest.raises(FormatError) as err:
        codec.decode(b"XLC1" + blob[4:])
    assert err.value.offset == 0
    bad = bytearray(blob)
    bad[4] = 2
    with pytest.raises(FormatError):
        codec.decode(bytes(bad))


def test_truncation_reports_offset():
    _, blob = hand_blob([1, 2, 3], 2)
    for cut in range(len(blob)):
        with pytest.raises(FormatError) as err:
            codec.decode(blob[:cut])
        assert err.value.offset is not None


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_structural_checks_behind_valid_checksum():
    q, blob = hand_blob([1, 2, 3], 2)
    body = bytearray(blob[:-4])
    bad = bytearray(body)
    bad[-1] |= 0x01  # padding bit set
    with pytest.raises(FormatError, match="padding"):
        codec.decode(_reseal(bytes(bad)))
    bad = bytearray(body)
    bad[30] = 0  # zero-bit group
    with pytest.raises(FormatError, match="bit width"):
        codec.decode(_reseal(bytes(bad)))
    bad = bytearray(body)
    bad[28] = 1  # group id 1 with g = 1
    with pytest.raises(FormatError, match="group id"):
        codec.decode(_reseal(bytes(bad)))
    with pytest.raises(FormatError, match="payload"):
        codec.decode(_reseal(bytes(body) + b"\x00"))


@settings(max_examples=300)
@given(st.data())
def test_fuzzed_corruption_never_crashes(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    blob = bytearray(codec.encode(random_quantized(rng, max_c=3, max_dim=3)))
    kind = data.draw(st.sampled_from(["flip", "truncate", "extend", "splice"]))
    if kind == "flip":
        pos = data.draw(st.integers(0, len(blob) - 1))
        blob[pos] ^= data.draw(st.integers(1, 255))
    elif kind == "truncate":
        blob = blob[: data.draw(st.integers(0, len(blob) - 1))]
    elif kind == "extend":
        blob += data.draw(st.binary(min_size=1, max_size=16))
    else:
        pos = data.draw(st.integers(0, len(blob)))
        blob[pos:pos] = data.draw(st.binary(min_size=1, max_size=8))
    with pytest.raises(FormatError):
        codec.decode(bytes(blob))


@given(st.binary(max_size=200))
def test_random_bytes_never_crash(raw):
    for fn in (codec.decode, codec.decode_sparse):
        with pytest.raises(FormatError):
            fn(raw)


def test_sparse_rejects_unsorted_indices():
    sp = SparseSmashed(np.array([2, 1], dtype=np.uint32), np.array([1.0, 2.0], dtype=np.float32),
                       (1, 1, 2, 2), 0, Direction.ACTIVATIONS)
    with pytest.raises(FormatError, match="ascending"):
        codec.decode_sparse(codec.encode_sparse(sp))
