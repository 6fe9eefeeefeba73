"""Model-independent payload codecs: top-k sparsification and binary16.

Payload byte layouts (little-endian), selected by the package compression tag:

* dense:  ``n`` values in the package dtype (4 or 8 bytes each)
* top-k:  u64 ``n`` | ``k`` u32 indices | ``k`` values in the package dtype
* f16:    u64 ``n`` | ``n`` IEEE-754 binary16 values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import BadK, CorruptPayload
from .packaging import Compression, DType

F16_MAX = 65504.0
_N_FIELD = struct.Struct("<Q")


@dataclass(frozen=True)
class SparsePayload:
    n: int
    indices: np.ndarray  # uint32, strictly increasing
    values: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, SparsePayload):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.indices, other.indices)
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True)
class QuantizedPayload:
    n: int
    halfwords: np.ndarray  # float16


def topk_encode(v: np.ndarray, k: int) -> SparsePayload:
    """Keep the ``k`` largest-magnitude entries; ties go to the lower index."""
    v = np.asarray(v)
    n = v.size
    if not 1 <= k <= n:
        raise BadK(f"k={k} outside [1, {n}]")
    order = np.argsort(-np.abs(v), kind="stable")[:k]
    idx = np.sort(order)
    return SparsePayload(n, idx.astype(np.uint32), v[idx].copy())


def topk_decode(p: SparsePayload) -> np.ndarray:
    idx = np.asarray(p.indices)
    vals = np.asarray(p.values)
    if idx.ndim != 1 or idx.shape != vals.shape or idx.size > p.n:
        raise CorruptPayload(f"{idx.size} indices / {vals.size} values for n={p.n}")
    if idx.size:
        if np.any(np.diff(idx.astype(np.int64)) <= 0):
            raise CorruptPayload("indices are not strictly increasing")
        if int(idx[-1]) >= p.n:
            raise CorruptPayload(f"index {int(idx[-1])} out of range for n={p.n}")
    out = np.zeros(p.n, dtype=vals.dtype if vals.size else np.float64)
    out[idx.astype(np.int64)] = vals
    return out


def quantize_f16(v: np.ndarray) -> QuantizedPayload:
    """Round-to-nearest-even binary16; out-of-range values saturate to +-65504."""
    v = np.asarray(v, dtype=np.float64)
    clipped = np.clip(v, -F16_MAX, F16_MAX)  # NaN passes through
    return QuantizedPayload(v.size, clipped.astype(np.float16))


def dequantize_f16(p: QuantizedPayload) -> np.ndarray:
    return np.asarray(p.halfwords, dtype=np.float16).astype(np.float64)


# -- wire codecs ---------------------------------------------------------------


class DenseCodec:
    tag = Compression.None_

    def __init__(self, dtype: DType = DType.F32):
        self.dtype = DType(dtype)

    def encode(self, v: np.ndarray) -> bytes:
        return np.asarray(v).astype(self.dtype.numpy).tobytes()

    def decode(self, data: bytes) -> np.ndarray:
        if len(data) % self.dtype.itemsize:
            raise CorruptPayload(f"{len(data)} bytes is not a whole number of {self.dtype.name}")
        return np.frombuffer(data, dtype=self.dtype.numpy).astype(np.float64)

    def encoded_size(self, n: int) -> int:
        return self.dtype.itemsize * n


class TopKCodec:
    tag = Compression.TopK

    def __init__(self, k: int, dtype: DType = DType.F32):
        self.k = int(k)
        self.dtype = DType(dtype)

    def encode(self, v: np.ndarray) -> bytes:
        p = topk_encode(v, self.k)
        return (
            _N_FIELD.pack(p.n)
            + p.indices.astype("<u4").tobytes()
            + p.values.astype(self.dtype.numpy).tobytes()
        )

    def decode_payload(self, data: bytes) -> SparsePayload:
        if len(data) < _N_FIELD.size:
            raise CorruptPayload("top-k payload shorter than its length field")
        (n,) = _N_FIELD.unpack_from(data, 0)
        body = len(data) - _N_FIELD.size
        entry = 4 + self.dtype.itemsize
        if body % entry:
            raise CorruptPayload(f"top-k body of {body} bytes is not a whole number of entries")
        k = body // entry
        off = _N_FIELD.size
        idx = np.frombuffer(data, dtype="<u4", count=k, offset=off)
        vals = np.frombuffer(data, dtype=self.dtype.numpy, count=k, offset=off + 4 * k)
        return SparsePayload(n, idx.astype(np.uint32), vals.astype(np.float64))

    def decode(self, data: bytes) -> np.ndarray:
        return topk_decode(self.decode_payload(data)).astype(np.float64)

    def encoded_size(self, n: int) -> int:
        return _N_FIELD.size + (4 + self.dtype.itemsize) * self.k


class F16Codec:
    tag = Compression.F16

    def encode(self, v: np.ndarray) -> bytes:
        q = quantize_f16(v)
        return _N_FIELD.pack(q.n) + q.halfwords.astype("<f2").tobytes()

    def decode(self, data: bytes) -> np.ndarray:
        if len(data) < _N_FIELD.size:
            raise CorruptPayload("f16 payload shorter than its length field")
        (n,) = _N_FIELD.unpack_from(data, 0)
        if len(data) != _N_FIELD.size + 2 * n:
            raise CorruptPayload(f"f16 payload of {len(data)} bytes does not hold {n} values")
        halves = np.frombuffer(data, dtype="<f2", count=n, offset=_N_FIELD.size)
        return dequantize_f16(QuantizedPayload(n, halves))

    def encoded_size(self, n: int) -> int:
        return _N_FIELD.size + 2 * n


Codec = DenseCodec | TopKCodec | F16Codec


def make_codec(compression: Compression, dtype: DType, n: int, topk_fraction: float = 0.01) -> Codec:
    compression = Compression(compression)
    if compression is Compression.None_:
        return DenseCodec(dtype)
    if compression is Compression.TopK:
        return TopKCodec(topk_k(n, topk_fraction), dtype)
    return F16Codec()


def topk_k(n: int, fraction: float) -> int:
    return min(n, max(1, int(round(fraction * n))))


def measured_ratio(codec: Codec, v: np.ndarray) -> Fraction:
    """Dense f32 payload bytes over the codec's actual encoded payload bytes."""
    v = np.asarray(v)
    return Fraction(4 * v.size, len(codec.encode(v)))


def topk_ratio_threshold(n: int, target: int = 100) -> int:
    """Largest ``k`` for which top-k (f32 values) reaches ``target``-fold compression.

    Solves ``4n / (8k + 8) >= target`` exactly; returns 0 when no ``k`` qualifies.
    """
    return max(0, (4 * n - 8 * target) // (8 * target))
