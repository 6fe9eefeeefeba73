"""Shared test fixtures that are not oracles."""

from fedsim.packaging import Compression, DType, MessageCode, Package
from fedsim.rng import Rng


def random_package(rng: Rng) -> Package:
    n_slices = rng.randbelow(5)
    segments = [bytes(rng.randbelow(256) for _ in range(rng.randbelow(40))) for _ in range(n_slices)]
    return Package.from_segments(
        rng.randbelow(2**32), rng.randbelow(2**32), rng.randbelow(2**32),
        MessageCode(rng.randbelow(4)), segments, DType(rng.randbelow(2)), Compression(rng.randbelow(3)),
    )
