"""Client data partitioning: IID, label-sorted shards, Dirichlet skews.

A :class:`PartitionMap` serializes to JSON as::

    {"n_total": 60000, "assignments": {"0": [12, 40, ...], "1": [...], ...}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadParam, BadShardSpec, PartitionInfeasible, TooFewSamples
from .rng import seed_from

DEFAULT_RETRIES = 100


@dataclass
class PartitionMap:
    assignments: dict[int, list[int]]
    n_total: int

    def __post_init__(self):
        self.assignments = {
            int(cid): sorted(int(i) for i in idx) for cid, idx in sorted(self.assignments.items())
        }

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> dict[int, int]:
        return {cid: len(idx) for cid, idx in self.assignments.items()}

    def __getitem__(self, cid: int) -> list[int]:
        return self.assignments[cid]

    def __contains__(self, cid) -> bool:
        return cid in self.assignments

    def check_cover(self, allow_empty: bool = False) -> None:
        """Raise ``ValueError`` unless client lists are disjoint and cover every index."""
        seen = np.zeros(self.n_total, dtype=np.int64)
        for cid, idx in self.assignments.items():
            if not idx and not allow_empty:
                raise ValueError(f"client {cid} is empty")
            arr = np.asarray(idx, dtype=np.int64)
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_total):
                raise ValueError(f"client {cid} holds an index outside [0, {self.n_total})")
            np.add.at(seen, arr, 1)
        if np.any(seen != 1):
            raise ValueError("client index lists overlap or leave samples unassigned")

    def to_json(self) -> str:
        body = {
            "n_total": self.n_total,
            "assignments": {str(cid): idx for cid, idx in self.assignments.items()},
        }
        return json.dumps(body)

    @classmethod
    def from_json(cls, text: str) -> "PartitionMap":
        body = json.loads(text)
        try:
            return cls({int(k): v for k, v in body["assignments"].items()}, int(body["n_total"]))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValueError(f"not a partition file: {exc}") from exc

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "PartitionMap":
        with open(path) as f:
            return cls.from_json(f.read())


def _split_even(perm: Sequence[int], num_clients: int) -> dict[int, list[int]]:
    n = len(perm)
    base, extra = divmod(n, num_clients)
    out, start = {}, 0
    for cid in range(num_clients):
        size = base + (1 if cid < extra else 0)
        out[cid] = list(perm[start : start + size])
        start += size
    return out


def iid_partition(n: int, num_clients: int, seed: int) -> PartitionMap:
    if num_clients < 1:
        raise BadParam(f"num_clients must be >= 1, got {num_clients}")
    if n < num_clients:
        raise TooFewSamples(f"{n} samples cannot fill {num_clients} clients")
    perm = seed_from(seed, [0x11D]).permutation(n).tolist()
    return PartitionMap(_split_even(perm, num_clients), n)


def shard_partition(labels: Sequence[int], num_shards: int, shards_per_client: int, seed: int,
                    shard_size: int | None = None) -> PartitionMap:
    """Sort by label, cut equal shards and deal ``shards_per_client`` to each client.

    ``shard_size`` may be given explicitly; it must then satisfy
    ``num_shards * shard_size == len(labels)``.
    """
    labels = np.asarray(labels)
    n = labels.size
    if num_shards < 1 or shards_per_client < 1 or num_shards % shards_per_client:
        raise BadShardSpec(
            f"{num_shards} shards cannot be dealt {shards_per_client} per client"
        )
    if shard_size is None:
        if n % num_shards:
            raise BadShardSpec(f"{n} samples do not split into {num_shards} equal shards")
        shard_size = n // num_shards
    if shard_size < 1 or num_shards * shard_size != n:
        raise BadShardSpec(f"{num_shards} shards x {shard_size} samples != {n} samples")
    order = np.argsort(labels, kind="stable")
    shards = [order[s * shard_size : (s + 1) * shard_size] for s in range(num_shards)]
    shard_ids = seed_from(seed, [0x5A4D]).permutation(num_shards)
    num_clients = num_shards // shards_per_client
    assignments = {}
    for cid in range(num_clients):
        picked = shard_ids[cid * shards_per_client : (cid + 1) * shards_per_client]
        assignments[cid] = np.concatenate([shards[s] for s in picked]).tolist()
    return PartitionMap(assignments, n)


def _cut(indices: np.ndarray, proportions: np.ndarray) -> list[np.ndarray]:
    cuts = (np.cumsum(proportions) * indices.size).astype(np.int64)[:-1]
    return np.split(indices, cuts)


def dirichlet_label_partition(labels: Sequence[int], num_clients: int, beta: float, seed: int,
                              min_size: int = 1, retries: int = DEFAULT_RETRIES) -> PartitionMap:
    """Per-class Dirichlet(beta) label skew; redraws until each client has ``min_size``."""
    labels = np.asarray(labels, dtype=np.int64)
    if beta <= 0:
        raise BadParam(f"beta must be > 0, got {beta}")
    if num_clients < 1:
        raise BadParam(f"num_clients must be >= 1, got {num_clients}")
    rng = seed_from(seed, [0xD1C])
    classes = np.unique(labels)
    for _ in range(retries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for k in classes:
            idx = np.flatnonzero(labels == k)
            idx = idx[rng.permutation(idx.size)]
            for cid, part in enumerate(_cut(idx, rng.dirichlet(beta, num_clients))):
                buckets[cid].append(part)
        sizes = [sum(p.size for p in b) for b in buckets]
        if min(sizes) >= min_size:
            return PartitionMap(
                {cid: np.concatenate(b).tolist() if b else [] for cid, b in enumerate(buckets)},
                labels.size,
            )
    raise PartitionInfeasible(
        f"no Dirichlet({beta}) draw gave every client >= {min_size} samples in {retries} tries"
    )


def quantity_skew_partition(n: int, num_clients: int, beta: float, seed: int,
                            min_size: int = 1, retries: int = DEFAULT_RETRIES) -> PartitionMap:
    """Client sizes proportional to a Dirichlet(beta) draw over a random permutation."""
    if beta <= 0:
        raise BadParam(f"beta must be > 0, got {beta}")
    if num_clients < 1:
        raise BadParam(f"num_clients must be >= 1, got {num_clients}")
    rng = seed_from(seed, [0x0A7])
    for _ in range(retries):
        perm = rng.permutation(n)
        parts = _cut(perm, rng.dirichlet(beta, num_clients))
        if min(p.size for p in parts) >= min_size:
            return PartitionMap({cid: p.tolist() for cid, p in enumerate(parts)}, n)
    raise PartitionInfeasible(
        f"no Dirichlet({beta}) size draw gave every client >= {min_size} samples in {retries} tries"
    )


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    size: int
    label_counts: dict[int, int]

    @property
    def distinct_labels(self) -> int:
        return sum(1 for v in self.label_counts.values() if v)


def partition_report(pmap: PartitionMap, labels: Sequence[int] | None = None) -> list[ClientReport]:
    labels = None if labels is None else np.asarray(labels, dtype=np.int64)
    rows = []
    for cid, idx in pmap.assignments.items():
        counts: dict[int, int] = {}
        if labels is not None and idx:
            vals, cnt = np.unique(labels[idx], return_counts=True)
            counts = {int(v): int(c) for v, c in zip(vals, cnt)}
        rows.append(ClientReport(cid, len(idx), counts))
    return rows


def format_report(rows: Sequence[ClientReport]) -> str:
    lines = [f"{'client':>6}  {'size':>7}  {'labels':>6}  histogram"]
    for r in rows:
        hist = " ".join(f"{k}:{v}" for k, v in sorted(r.label_counts.items()))
        lines.append(f"{r.client_id:>6}  {r.size:>7}  {r.distinct_labels:>6}  {hist}")
    sizes = [r.size for r in rows]
    if sizes:
        lines.append(f"clients={len(rows)} total={sum(sizes)} min={min(sizes)} max={max(sizes)}")
    return "\n".join(lines)


def make_partition(scheme: str, labels: np.ndarray, num_clients: int, seed: int, *,
                   beta: float = 0.5, min_size: int = 1, num_shards: int | None = None,
                   shards_per_client: int = 2) -> PartitionMap:
    """Dispatch on a scheme name (``iid``, ``shard``, ``dirichlet``, ``quantity``)."""
    n = len(labels)
    if scheme == "iid":
        return iid_partition(n, num_clients, seed)
    if scheme == "shard":
        shards = num_shards if num_shards is not None else num_clients * shards_per_client
        return shard_partition(labels, shards, shards_per_client, seed)
    if scheme == "dirichlet":
        return dirichlet_label_partition(labels, num_clients, beta, seed, min_size)
    if scheme == "quantity":
        return quantity_skew_partition(n, num_clients, beta, seed, min_size)
    raise BadParam(f"unknown partition scheme {scheme!r}")
