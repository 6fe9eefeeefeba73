"""Deterministic, platform-independent random streams.

Every randomized component in fedsim draws from :class:`Rng`, a pure-Python
xoshiro256** generator.  The state is seeded with splitmix64, so a root seed
with no stream labels reproduces the reference C implementation exactly.
Independent streams are derived with :func:`seed_from`, which folds a tuple of
integer labels (client id, round, ...) into the root seed.

Distribution choices are fixed so that streams are reproducible across
implementations:

* ``uniform``: top 53 bits of one output, scaled to ``[0, 1)``.
* ``randbelow``: modulo reduction with rejection of the biased tail.
* ``normal``: Box-Muller, both variates of a pair are used in order.
* ``gamma``: Marsaglia-Tsang, with the ``U ** (1/a)`` boost for ``a < 1``.
"""

from __future__ import annotations

import math
from typing import Iterable, MutableSequence, Sequence

import numpy as np

from .errors import BadParam

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def splitmix64_mix(z: int) -> int:
    """The splitmix64 output finalizer applied to an already-advanced state."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_stream(seed: int, count: int) -> list[int]:
    state = seed & MASK64
    out = []
    for _ in range(count):
        state = (state + GOLDEN) & MASK64
        out.append(splitmix64_mix(state))
    return out


class Rng:
    """xoshiro256** generator with a few distribution helpers."""

    __slots__ = ("_s", "_spare_normal")

    def __init__(self, seed: int = 0):
        self._s = splitmix64_stream(seed, 4)
        self._spare_normal: float | None = None

    @classmethod
    def from_state(cls, state: Sequence[int]) -> "Rng":
        if len(state) != 4 or not any(state):
            raise BadParam("xoshiro256** state must be four words, not all zero")
        rng = cls.__new__(cls)
        rng._s = [int(w) & MASK64 for w in state]
        rng._spare_normal = None
        return rng

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)  # type: ignore[return-value]

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    # -- primitives -------------------------------------------------------

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def randbelow(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise BadParam(f"randbelow needs n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        if std < 0:
            raise BadParam(f"normal std must be >= 0, got {std}")
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return mean + std * z
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return mean + std * r * math.cos(theta)

    def gamma(self, shape: float) -> float:
        """Gamma(shape, 1) variate."""
        return math.exp(self.log_gamma(shape))

    def log_gamma(self, shape: float) -> float:
        """Logarithm of a Gamma(shape, 1) variate.

        Working in log space keeps tiny shapes (heavy mass near zero) from
        underflowing before a Dirichlet normalization.
        """
        if not shape > 0 or math.isinf(shape):
            raise BadParam(f"gamma shape must be a positive finite number, got {shape}")
        if shape < 1.0:
            u = 1.0 - self.uniform()
            return self.log_gamma(shape + 1.0) + math.log(u) / shape
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = 1.0 - self.uniform()
            if u < 1.0 - 0.0331 * x**4 or math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return math.log(d) + math.log(v)

    def dirichlet(self, alpha: float, k: int) -> np.ndarray:
        """Symmetric Dirichlet(alpha, ..., alpha) draw of dimension ``k``."""
        if k < 1:
            raise BadParam(f"dirichlet dimension must be >= 1, got {k}")
        logs = np.array([self.log_gamma(alpha) for _ in range(k)])
        logs -= logs.max()
        w = np.exp(logs)
        return w / w.sum()

    def shuffle(self, items: MutableSequence) -> None:
        """In-place Fisher-Yates shuffle (descending swap positions)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        perm = list(range(n))
        self.shuffle(perm)
        return np.asarray(perm, dtype=np.int64)

    def sample(self, n: int, m: int) -> list[int]:
        """``m`` distinct values from ``range(n)`` via a partial Fisher-Yates pass."""
        if not 0 <= m <= n:
            raise BadParam(f"cannot sample {m} of {n}")
        pool = list(range(n))
        for i in range(m):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:m]

    def uniform_array(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return np.array([self.uniform(low, high) for _ in range(n)], dtype=np.float64)

    def normal_array(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)], dtype=np.float64)


def seed_from(root_seed: int, labels: Iterable[int] = ()) -> Rng:
    """Derive an independent stream from a root seed and a label tuple.

    Each label is mixed in with its position, so ``[1, 0]`` and ``[0, 1]``
    give different streams.  With no labels the stream equals ``Rng(root_seed)``.
    """
    h = root_seed & MASK64
    for pos, label in enumerate(labels):
        tagged = (int(label) + (pos + 1) * GOLDEN) & MASK64
        h = splitmix64_mix((h ^ splitmix64_mix(tagged)) & MASK64)
        h = splitmix64_mix((h + GOLDEN) & MASK64)
    return Rng(h)
