"""Server-side optimization: FedAvg, staleness-weighted async mixing, sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import (
    BadParam,
    BadSampleSpec,
    DuplicateUpdate,
    FutureRound,
    LayoutMismatch,
    NoUpdates,
    StaleUpdate,
)
from .packaging import ModelParameters
from .rng import Rng


@dataclass
class ClientUpdate:
    client_id: int
    params: ModelParameters
    n_k: int
    round_trained: int = 0

    def __post_init__(self):
        if self.n_k < 1:
            raise BadParam(f"client {self.client_id} reported n_k={self.n_k}")


def _check_layouts(reference: ModelParameters, others: Sequence[ModelParameters]) -> None:
    for p in others:
        if p.layout.shapes != reference.layout.shapes:
            raise LayoutMismatch(f"layout {p.layout.shapes} != {reference.layout.shapes}")


def fedavg(updates: Sequence[ClientUpdate]) -> ModelParameters:
    """Sample-count weighted mean of client parameters.

    Uses Kahan-compensated accumulation so the result is insensitive to the
    order in which updates arrive (to within a few ulps).
    """
    if not updates:
        raise NoUpdates("fedavg needs at least one update")
    first = updates[0].params
    _check_layouts(first, [u.params for u in updates])
    n = sum(int(u.n_k) for u in updates)
    total = np.zeros(first.values.size, dtype=np.float64)
    comp = np.zeros_like(total)
    for u in updates:
        term = (u.n_k / n) * np.asarray(u.params.values, dtype=np.float64) - comp
        t = total + term
        comp = (t - total) - term
        total = t
    return ModelParameters(total, first.layout)


def staleness_weight(alpha: float, staleness: int, exponent: float) -> float:
    return alpha * float(staleness + 1) ** (-exponent)


def async_mix(global_params: ModelParameters, incoming: ClientUpdate, alpha: float,
              server_round: int, staleness_exponent: float = 0.0) -> ModelParameters:
    """Blend one asynchronous update into the global model.

    The effective mixing weight decays polynomially with staleness:
    ``alpha * (staleness + 1) ** -staleness_exponent``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise BadParam(f"alpha must lie in [0, 1], got {alpha}")
    if staleness_exponent < 0:
        raise BadParam(f"staleness exponent must be >= 0, got {staleness_exponent}")
    _check_layouts(global_params, [incoming.params])
    staleness = server_round - incoming.round_trained
    if staleness < 0:
        raise FutureRound(
            f"update trained at round {incoming.round_trained} ahead of server round {server_round}"
        )
    a_t = staleness_weight(alpha, staleness, staleness_exponent)
    mixed = (1.0 - a_t) * global_params.values + a_t * np.asarray(incoming.params.values)
    return ModelParameters(mixed, global_params.layout)


def sample_size(total: int, fraction: float) -> int:
    # round half up on the exact decimal value of the fraction
    return max(1, math.floor(Fraction(repr(float(fraction))) * total + Fraction(1, 2)))


def sample_clients(total: int, fraction: float, rng: Rng) -> list[int]:
    if total < 1:
        raise BadSampleSpec(f"need at least one client, got {total}")
    if not 0.0 < fraction <= 1.0:
        raise BadSampleSpec(f"sample fraction must lie in (0, 1], got {fraction}")
    m = min(total, sample_size(total, fraction))
    return sorted(rng.sample(total, m))


@dataclass
class SyncHandlerState:
    """Global model plus the per-round buffer of client uploads."""

    global_params: ModelParameters
    round: int = 0
    expected: int = 0
    buffer: list[ClientUpdate] = field(default_factory=list)

    def receive(self, update: ClientUpdate) -> bool:
        """Buffer an update; aggregate and advance the round once all arrived."""
        if update.round_trained < self.round:
            raise StaleUpdate(f"update for round {update.round_trained}, server at {self.round}")
        if update.round_trained > self.round:
            raise FutureRound(f"update for round {update.round_trained}, server at {self.round}")
        if any(u.client_id == update.client_id for u in self.buffer):
            raise DuplicateUpdate(f"client {update.client_id} already reported round {self.round}")
        if len(self.buffer) >= self.expected:
            raise BadParam(f"round {self.round} already holds {self.expected} updates")
        _check_layouts(self.global_params, [update.params])
        self.buffer.append(update)
        if len(self.buffer) < self.expected:
            return False
        ordered = sorted(self.buffer, key=lambda u: u.client_id)
        self.global_params = fedavg(ordered)
        self.round += 1
        self.buffer = []
        return True

    def reset_round(self, expected: int) -> None:
        self.expected = expected
        self.buffer = []


def handler_receive(state: SyncHandlerState, update: ClientUpdate) -> tuple[SyncHandlerState, bool]:
    done = state.receive(update)
    return state, done
