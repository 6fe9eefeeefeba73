"""Tensor-list flattening and the v1 binary package format.

Wire layout (all integers little-endian)::

    offset  size  field
    0       8     total frame length in bytes, prefix included (u64)
    8       4     magic 0x46444C31 (u32)
    12      2     version = 1 (u16)
    14      2     message code (u16)
    16      4     sender rank (u32)
    20      4     receiver rank (u32)
    24      4     round (u32)
    28      4     slice count (u32)
    32      1     dtype tag (u8)
    33      1     compression tag (u8)
    34      2     reserved = 0 (u16)
    36      8*S   slice byte-lengths (u64 each)
    ...           payload bytes, slices back to back

The length prefix doubles as the TCP frame delimiter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import (
    BadMagic,
    CorruptSliceTable,
    DtypeMismatch,
    LayoutMismatch,
    Truncated,
    UnknownCode,
)

MAGIC = 0x46444C31
VERSION = 1
PREFIX = struct.Struct("<Q")
HEADER = struct.Struct("<IHHIIIIBBH")
PREFIX_SIZE = PREFIX.size  # 8
HEADER_SIZE = HEADER.size  # 28
SLICE_ENTRY_SIZE = 8


class MessageCode(IntEnum):
    ParameterRequest = 0
    ParameterUpdate = 1
    Exit = 2
    Register = 3


class DType(IntEnum):
    F32 = 0
    F64 = 1

    @property
    def numpy(self) -> np.dtype:
        return np.dtype("<f4") if self is DType.F32 else np.dtype("<f8")

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 8

    @classmethod
    def from_numpy(cls, dtype) -> "DType":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.F32
        if dtype == np.float64:
            return cls.F64
        raise DtypeMismatch(f"unsupported dtype {dtype}")


class Compression(IntEnum):
    None_ = 0
    TopK = 1
    F16 = 2


@dataclass(frozen=True)
class LayoutDescriptor:
    shapes: tuple[tuple[int, ...], ...]
    dtype: DType = DType.F64

    def __post_init__(self):
        shapes = tuple(tuple(int(d) for d in s) for s in self.shapes)
        if any(d < 0 for s in shapes for d in s):
            raise LayoutMismatch(f"negative dimension in {shapes}")
        object.__setattr__(self, "shapes", shapes)

    @property
    def total(self) -> int:
        return sum(int(np.prod(s, dtype=np.int64)) for s in self.shapes)


@dataclass
class ModelParameters:
    values: np.ndarray
    layout: LayoutDescriptor

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1 or self.values.size != self.layout.total:
            raise LayoutMismatch(
                f"{self.values.size} values for a layout of {self.layout.total} elements"
            )

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ModelParameters":
        return ModelParameters(np.asarray(values), self.layout)


def pack(tensors: Sequence[np.ndarray]) -> tuple[np.ndarray, LayoutDescriptor]:
    """Concatenate tensors row-major into one vector and record their shapes."""
    arrays = [np.asarray(t) for t in tensors]
    if not arrays:
        return np.zeros(0, dtype=np.float64), LayoutDescriptor(())
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) > 1:
        raise DtypeMismatch(f"mixed dtypes in tensor list: {sorted(map(str, dtypes))}")
    dtype = arrays[0].dtype
    layout = LayoutDescriptor(tuple(a.shape for a in arrays), DType.from_numpy(dtype))
    flat = np.concatenate([a.reshape(-1, order="C") for a in arrays]).astype(dtype, copy=False)
    return flat, layout


def unpack(flat: np.ndarray, layout: LayoutDescriptor) -> list[np.ndarray]:
    flat = np.asarray(flat)
    if flat.ndim != 1 or flat.size != layout.total:
        raise LayoutMismatch(f"vector of {flat.size} elements does not fit layout of {layout.total}")
    out = []
    offset = 0
    for shape in layout.shapes:
        size = int(np.prod(shape, dtype=np.int64))
        out.append(flat[offset : offset + size].reshape(shape).copy())
        offset += size
    return out


@dataclass(frozen=True)
class Package:
    sender_rank: int
    receiver_rank: int
    round: int
    message_code: MessageCode
    dtype: DType = DType.F64
    compression: Compression = Compression.None_
    slices: tuple[int, ...] = ()
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(int(s) for s in self.slices))
        object.__setattr__(self, "payload", bytes(self.payload))
        if any(s < 0 for s in self.slices) or sum(self.slices) != len(self.payload):
            raise CorruptSliceTable(
                f"slice lengths {self.slices} do not cover a {len(self.payload)}-byte payload"
            )

    @classmethod
    def from_segments(cls, sender: int, receiver: int, round: int, code: MessageCode,
                      segments: Sequence[bytes] = (), dtype: DType = DType.F64,
                      compression: Compression = Compression.None_) -> "Package":
        segments = [bytes(s) for s in segments]
        return cls(sender, receiver, round, MessageCode(code), DType(dtype),
                   Compression(compression), tuple(len(s) for s in segments), b"".join(segments))

    def segments(self) -> list[bytes]:
        out = []
        offset = 0
        for n in self.slices:
            out.append(self.payload[offset : offset + n])
            offset += n
        return out

    @property
    def encoded_size(self) -> int:
        return frame_overhead(len(self.slices)) + len(self.payload)


def frame_overhead(slice_count: int) -> int:
    """Bytes a package spends on framing, header and slice table."""
    return PREFIX_SIZE + HEADER_SIZE + SLICE_ENTRY_SIZE * slice_count


def encode_package(pkg: Package) -> bytes:
    total = pkg.encoded_size
    head = PREFIX.pack(total) + HEADER.pack(
        MAGIC,
        VERSION,
        int(pkg.message_code),
        pkg.sender_rank,
        pkg.receiver_rank,
        pkg.round,
        len(pkg.slices),
        int(pkg.dtype),
        int(pkg.compression),
        0,
    )
    table = struct.pack(f"<{len(pkg.slices)}Q", *pkg.slices)
    return head + table + pkg.payload


def _enum(kind, value: int, what: str):
    try:
        return kind(value)
    except ValueError:
        raise UnknownCode(f"unknown {what} code {value}") from None


def decode_package(data: bytes) -> Package:
    data = memoryview(bytes(data))
    if len(data) < PREFIX_SIZE:
        raise Truncated(f"{len(data)} bytes cannot hold the length prefix")
    (total,) = PREFIX.unpack_from(data, 0)
    if total != len(data):
        raise Truncated(f"frame declares {total} bytes but {len(data)} are available")
    if total < PREFIX_SIZE + HEADER_SIZE:
        raise Truncated(f"frame of {total} bytes is shorter than the fixed header")
    magic, version, code, sender, receiver, rnd, n_slices, dtype, comp, _reserved = (
        HEADER.unpack_from(data, PREFIX_SIZE)
    )
    if magic != MAGIC:
        raise BadMagic(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise UnknownCode(f"unsupported version {version}")
    code = _enum(MessageCode, code, "message")
    dtype = _enum(DType, dtype, "dtype")
    comp = _enum(Compression, comp, "compression")
    table_end = PREFIX_SIZE + HEADER_SIZE + SLICE_ENTRY_SIZE * n_slices
    if table_end > total:
        raise CorruptSliceTable(f"slice table of {n_slices} entries overruns the frame")
    slices = struct.unpack_from(f"<{n_slices}Q", data, PREFIX_SIZE + HEADER_SIZE)
    payload = data[table_end:total]
    if sum(slices) != len(payload):
        raise CorruptSliceTable(f"slices sum to {sum(slices)}, payload has {len(payload)} bytes")
    return Package(sender, receiver, rnd, code, dtype, comp, slices, payload.tobytes())
