"""Tensor plumbing shared by every other module.

Tensors are plain float64 numpy arrays. ``SmashedData`` wraps a read-only
``[B, C, H, W]`` array together with the round index and the direction of
travel (activations client->server, gradients server->client).
"""
from __future__ import annotations

import enum
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SLT_MAGIC = b"SLT1"


class FormatError(ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class Direction(enum.IntEnum):
    ACTIVATIONS = 0
    GRADIENTS = 1


def as_tensor(values, shape=None) -> np.ndarray:
    """Return a read-only, contiguous float64 copy of ``values``."""
    arr = np.array(values, dtype=np.float64, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SmashedData:
    tensor: np.ndarray
    round: int = 0
    direction: Direction = Direction.ACTIVATIONS

    def __post_init__(self):
        t = self.tensor
        if t.ndim != 4:
            raise ValueError(f"smashed data must be [B, C, H, W], got shape {t.shape}")
        if t.shape[1] < 1:
            raise ValueError("smashed data needs at least one channel")
        if self.round < 0:
            raise ValueError("round must be non-negative")
        if t.dtype != np.float64 or t.flags.writeable:
            object.__setattr__(self, "tensor", as_tensor(t))
        object.__setattr__(self, "direction", Direction(self.direction))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.tensor.shape

    @property
    def num_channels(self) -> int:
        return self.tensor.shape[1]

    @property
    def channel_size(self) -> int:
        """Elements per channel, N = B*H*W."""
        b, _, h, w = self.tensor.shape
        return b * h * w

    def channels(self) -> np.ndarray:
        """All channels as a ``[C, N]`` array (batch-major, then row-major spatial)."""
        return channels_matrix(self.tensor)

    def __eq__(self, other):
        if not isinstance(other, SmashedData):
            return NotImplemented
        return (
            self.round == other.round
            and self.direction == other.direction
            and self.tensor.shape == other.tensor.shape
            and np.array_equal(self.tensor, other.tensor)
        )


def channels_matrix(tensor: np.ndarray) -> np.ndarray:
    c = tensor.shape[1]
    return np.ascontiguousarray(tensor.transpose(1, 0, 2, 3)).reshape(c, -1)


def from_channels(channels: np.ndarray, shape) -> np.ndarray:
    """Inverse of :func:`channels_matrix`."""
    b, c, h, w = shape
    return np.ascontiguousarray(np.asarray(channels).reshape(c, b, h, w).transpose(1, 0, 2, 3))


def channel_view(s: SmashedData, c: int) -> np.ndarray:
    if not 0 <= c < s.num_channels:
        raise IndexError(f"channel {c} out of range for {s.num_channels} channels")
    return np.ascontiguousarray(s.tensor[:, c, :, :]).reshape(-1)


# -- SLT1 tensor dumps --------------------------------------------------------

def encode_tensor(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor)
    if arr.ndim > 255:
        raise ValueError("rank too large for SLT1")
    head = SLT_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    """Parse an SLT1 dump. The f32 payload is widened to float64."""
    if len(blob) < 5:
        raise FormatError("truncated SLT1 header", len(blob))
    if blob[:4] != SLT_MAGIC:
        raise FormatError("bad SLT1 magic", 0)
    rank = blob[4]
    pos = 5
    if len(blob) < pos + 4 * rank:
        raise FormatError("truncated SLT1 dims", len(blob))
    dims = struct.unpack_from(f"<{rank}I", blob, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = pos + 4 * count
    if len(blob) != expected:
        raise FormatError(f"SLT1 payload must be {expected - pos} bytes, got {len(blob) - pos}", pos)
    data = np.frombuffer(blob, dtype="<f4", offset=pos, count=count).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError("SLT1 payload contains non-finite values", pos)
    return data.reshape(dims)


def write_tensor(path, tensor: np.ndarray) -> None:
    atomic_write(path, encode_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
