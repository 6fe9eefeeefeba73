import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsim.errors import (
    BadMagic,
    CorruptSliceTable,
    DtypeMismatch,
    LayoutMismatch,
    Truncated,
    UnknownCode,
)
from fedsim.packaging import (
    HEADER_SIZE,
    MAGIC,
    Compression,
    DType,
    LayoutDescriptor,
    MessageCode,
    Package,
    decode_package,
    encode_package,
    pack,
    unpack,
)
from fedsim.rng import Rng
from helpers import random_package


class TestPack:
    def test_concatenates_in_order(self):
        flat, layout = pack([np.array([1.0, 2.0]), np.array([3.0])])
        assert flat.tolist() == [1.0, 2.0, 3.0]
        assert layout.shapes == ((2,), (1,))

    def test_empty(self):
        flat, layout = pack([])
        assert flat.size == 0 and layout.shapes == ()
        assert unpack(flat, layout) == []

    def test_row_major(self):
        flat, _ = pack([np.array([[1.0, 2.0], [3.0, 4.0]])])
        assert flat.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_unpack_inverse(self):
        parts = unpack(np.array([1.0, 2.0, 3.0]), LayoutDescriptor(((2,), (1,))))
        assert [p.tolist() for p in parts] == [[1.0, 2.0], [3.0]]

    def test_scalar_and_zero_size(self):
        tensors = [np.float64(5.0) * np.ones(()), np.zeros((0, 3)), np.arange(6.0).reshape(2, 3)]
        flat, layout = pack(tensors)
        back = unpack(flat, layout)
        for a, b in zip(tensors, back):
            assert a.shape == b.shape and np.array_equal(a, b)

    def test_mixed_dtypes_rejected(self):
        with pytest.raises(DtypeMismatch):
            pack([np.zeros(2, np.float32), np.zeros(2, np.float64)])

    def test_length_mismatch(self):
        with pytest.raises(LayoutMismatch):
            unpack(np.zeros(4), LayoutDescriptor(((2,), (1,))))

    def test_random_round_trip_seeded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            shapes = [tuple(rng.integers(0, 4, size=rng.integers(0, 4))) for _ in range(5)]
            tensors = [rng.normal(size=s) for s in shapes]
            back = unpack(*pack(tensors))
            assert all(np.array_equal(a, b) and a.shape == b.shape for a, b in zip(tensors, back))

    @given(st.lists(st.lists(st.integers(0, 3), max_size=3), max_size=6))
    def test_round_trip_property(self, shapes):
        tensors = [np.arange(int(np.prod(s)), dtype=np.float32).reshape(s) for s in shapes]
        flat, layout = pack(tensors)
        assert layout.total == flat.size
        back = unpack(flat, layout)
        assert len(back) == len(tensors)
        assert all(np.array_equal(a, b) and a.shape == b.shape for a, b in zip(tensors, back))


class TestWireFormat:
    def test_empty_package_is_36_bytes(self):
        data = encode_package(Package(0, 1, 0, MessageCode.Exit))
        assert len(data) == 36
        assert struct.unpack_from("<Q", data)[0] == 36

    def test_one_slice_of_12_bytes(self):
        pkg = Package.from_segments(1, 0, 3, MessageCode.ParameterUpdate, [b"x" * 12])
        assert len(encode_package(pkg)) == 56

    def test_header_layout(self):
        pkg = Package.from_segments(7, 9, 11, MessageCode.ParameterRequest, [b"ab", b"c"],
                                    DType.F32, Compression.TopK)
        data = encode_package(pkg)
        (total, magic, version, code, sender, receiver, rnd, ns, dtype, comp, reserved) = (
            struct.unpack_from("<QIHHIIIIBBH", data)
        )
        assert (total, magic, version, code) == (len(data), MAGIC, 1, 0)
        assert (sender, receiver, rnd, ns, dtype, comp, reserved) == (7, 9, 11, 2, 0, 1, 0)
        assert struct.unpack_from("<2Q", data, 36) == (2, 1)
        assert data[-3:] == b"abc"

    def test_header_size_constant(self):
        assert HEADER_SIZE == 28
        rng = Rng(1)
        for _ in range(20):
            pkg = random_package(rng)
            assert len(encode_package(pkg)) == 36 + 8 * len(pkg.slices) + len(pkg.payload)

    def test_fuzz_round_trip_1000(self):
        rng = Rng(2023)
        for _ in range(1000):
            pkg = random_package(rng)
            data = encode_package(pkg)
            assert decode_package(data) == pkg
            assert encode_package(decode_package(data)) == data

    def test_deterministic(self):
        pkg = Package.from_segments(1, 2, 3, MessageCode.ParameterUpdate, [b"abc"])
        same = Package.from_segments(1, 2, 3, MessageCode.ParameterUpdate, [b"abc"])
        assert encode_package(pkg) == encode_package(same)

    def test_slice_invariant(self):
        with pytest.raises(CorruptSliceTable):
            Package(0, 0, 0, MessageCode.Exit, slices=(4,), payload=b"abc")


class TestDecodeErrors:
    @pytest.fixture
    def data(self):
        return encode_package(Package.from_segments(1, 0, 2, MessageCode.ParameterUpdate, [b"hello", b"!"]))

    def test_bad_magic(self, data):
        corrupt = data[:8] + b"\x00\x00\x00\x00" + data[12:]
        with pytest.raises(BadMagic):
            decode_package(corrupt)

    def test_cut_after_header(self, data):
        with pytest.raises(Truncated):
            decode_package(data[:36])

    def test_trailing_bytes(self, data):
        with pytest.raises(Truncated):
            decode_package(data + b"\x00")

    def test_too_short_for_prefix(self):
        with pytest.raises(Truncated):
            decode_package(b"\x01\x02")

    @pytest.mark.parametrize("offset,value", [(14, 9), (32, 7), (33, 5), (12, 2)])
    def test_unknown_codes(self, data, offset, value):
        b = bytearray(data)
        if offset in (12, 14):
            struct.pack_into("<H", b, offset, value)
        else:
            b[offset] = value
        with pytest.raises(UnknownCode):
            decode_package(bytes(b))

    def test_slice_sum_mismatch(self, data):
        b = bytearray(data)
        struct.pack_into("<Q", b, 36, 4)  # first slice claims 4 instead of 5
        with pytest.raises(CorruptSliceTable):
            decode_package(bytes(b))

    def test_slice_table_overrun(self, data):
        b = bytearray(data)
        struct.pack_into("<I", b, 28, 1000)
        with pytest.raises(CorruptSliceTable):
            decode_package(bytes(b))

    def test_never_reads_past_prefix(self, data):
        # a prefix that declares fewer bytes than supplied is rejected rather than over-read
        b = bytearray(data)
        struct.pack_into("<Q", b, 0, len(data) - 1)
        with pytest.raises(Truncated):
            decode_package(bytes(b))
