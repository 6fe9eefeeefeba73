"""Federated protocol actors: sync/async server and client, and the scheduler.

Every actor is a message handler, ``handle(pkg) -> list[Package]``, so the
same code runs over the simulated network (stepped in send order) and over
TCP (driven by a blocking receive loop).

Message contents (see ``docs/protocol.md``):

* server -> client ``ParameterUpdate``: one slice, the global model as dense
  values in the package dtype.
* client -> server ``ParameterUpdate``: slice 0 is the model encoded with the
  package's codec, slice 1 the sample count ``n_k`` (u64).  With top-k or
  f16 compression slice 0 carries the difference to the model the client
  received; uncompressed uploads carry the parameters themselves.
* ``ParameterRequest`` and ``Exit`` have no payload.  The async server
  acknowledges an upload with an empty ``Register`` package.
"""

from __future__ import annotations

import logging
import queue
import struct
import threading
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .aggregate import ClientUpdate, SyncHandlerState, async_mix, fedavg, sample_clients
from .compress import F16Codec, DenseCodec, TopKCodec, topk_k
from .data import Dataset
from .errors import (
    FutureRound,
    ProtocolError,
    RoundAborted,
    RoutingError,
    StaleUpdate,
    TransportError,
)
from .packaging import Compression, DType, LayoutDescriptor, MessageCode, ModelParameters, Package
from .rng import Rng
from .trainer import TrainConfig, local_train
from .transport import SERVER_RANK, Endpoint

log = logging.getLogger(__name__)

_U64 = struct.Struct("<Q")


# -- payload conventions ----------------------------------------------------------


@dataclass(frozen=True)
class WireFormat:
    """Numeric dtype and upload codec shared by every actor of a run."""

    dtype: DType = DType.F64
    compression: Compression = Compression.None_
    topk_fraction: float = 0.01

    def roundtrip(self, values: np.ndarray) -> np.ndarray:
        """The values a receiver reconstructs from a dense package."""
        return np.asarray(values).astype(self.dtype.numpy).astype(np.float64)

    def downlink(self, sender: int, receiver: int, round: int, values: np.ndarray,
                 code: MessageCode = MessageCode.ParameterUpdate) -> Package:
        body = DenseCodec(self.dtype).encode(values)
        return Package.from_segments(sender, receiver, round, code, [body], self.dtype)

    def read_downlink(self, pkg: Package) -> np.ndarray:
        if len(pkg.slices) != 1 or pkg.compression is not Compression.None_:
            raise ProtocolError(f"model package with {len(pkg.slices)} slices / {pkg.compression.name}")
        return DenseCodec(pkg.dtype).decode(pkg.payload)

    def _codec(self, n: int):
        if self.compression is Compression.TopK:
            return TopKCodec(topk_k(n, self.topk_fraction), self.dtype)
        if self.compression is Compression.F16:
            return F16Codec()
        return DenseCodec(self.dtype)

    def uplink(self, sender: int, receiver: int, round: int, values: np.ndarray, n_k: int,
               reference: np.ndarray) -> Package:
        values = np.asarray(values, dtype=np.float64)
        body = values if self.compression is Compression.None_ else values - reference
        seg = self._codec(values.size).encode(body)
        return Package.from_segments(sender, receiver, round, MessageCode.ParameterUpdate,
                                     [seg, _U64.pack(n_k)], self.dtype, self.compression)

    @staticmethod
    def read_uplink(pkg: Package, reference: np.ndarray) -> tuple[np.ndarray, int]:
        if len(pkg.slices) != 2 or pkg.slices[1] != _U64.size:
            raise ProtocolError(f"upload package with slice table {pkg.slices}")
        seg, count = pkg.segments()
        (n_k,) = _U64.unpack(count)
        if pkg.compression is Compression.None_:
            values = DenseCodec(pkg.dtype).decode(seg)
        else:
            codec = TopKCodec(0, pkg.dtype) if pkg.compression is Compression.TopK else F16Codec()
            values = np.asarray(reference, dtype=np.float64) + codec.decode(seg)
        if values.size != np.asarray(reference).size:
            raise ProtocolError(f"upload of {values.size} values for a {np.asarray(reference).size}-value model")
        return values, int(n_k)


def control(sender: int, receiver: int, round: int, code: MessageCode) -> Package:
    return Package(sender, receiver, round, code)


# -- synchronous server -----------------------------------------------------------


class ServerPhase(Enum):
    Idle = "idle"
    Broadcasting = "broadcasting"
    Collecting = "collecting"
    Finished = "finished"


class ClientPhase(Enum):
    WaitingModel = "waiting"
    Training = "training"
    Uploading = "uploading"
    Exited = "exited"


@dataclass
class RoundRecord:
    round: int
    bytes_up: int = 0
    bytes_down: int = 0
    updates: int = 0


class SyncServer:
    """Parameter server for the synchronous pattern.

    A round samples clients, broadcasts the global model to them, waits for
    one upload from each, and replaces the global model with their FedAvg.
    """

    def __init__(self, global_params: ModelParameters, client_ranks: Sequence[int],
                 wire: WireFormat = WireFormat(), rank: int = SERVER_RANK):
        self.rank = rank
        self.client_ranks = list(client_ranks)
        self.wire = wire
        self.phase = ServerPhase.Idle
        self.handler = SyncHandlerState(global_params.copy())
        self.sampled: list[int] = []
        self.reference = np.zeros(0)
        self.record = RoundRecord(0)
        self.history: list[RoundRecord] = []

    @property
    def round(self) -> int:
        return self.handler.round

    @property
    def global_params(self) -> ModelParameters:
        return self.handler.global_params

    def begin_round(self, fraction: float, rng: Rng) -> list[Package]:
        if self.phase is not ServerPhase.Idle:
            raise ProtocolError(f"cannot start a round while {self.phase.value}")
        self.phase = ServerPhase.Broadcasting
        picks = sample_clients(len(self.client_ranks), fraction, rng)
        self.sampled = [self.client_ranks[i] for i in picks]
        self.handler.reset_round(len(self.sampled))
        self.reference = self.wire.roundtrip(self.global_params.values)
        out = [
            self.wire.downlink(self.rank, r, self.round, self.global_params.values)
            for r in self.sampled
        ]
        self.record = RoundRecord(self.round, bytes_down=sum(p.encoded_size for p in out))
        self.phase = ServerPhase.Collecting
        return out

    def handle(self, pkg: Package) -> list[Package]:
        if pkg.round > self.round:
            raise FutureRound(f"package for round {pkg.round} while server is at {self.round}")
        if self.phase is not ServerPhase.Collecting or pkg.sender_rank not in self.sampled:
            log.warning("dropping %s from rank %d (phase %s)", pkg.message_code.name,
                        pkg.sender_rank, self.phase.value)
            return []
        if pkg.message_code is not MessageCode.ParameterUpdate:
            log.warning("dropping unexpected %s from rank %d", pkg.message_code.name, pkg.sender_rank)
            return []
        values, n_k = self.wire.read_uplink(pkg, self.reference)
        update = ClientUpdate(pkg.sender_rank, self.global_params.with_values(values), n_k, pkg.round)
        try:
            done = self.handler.receive(update)
        except StaleUpdate as exc:
            log.warning("dropping stale upload: %s", exc)
            return []
        self.record.bytes_up += pkg.encoded_size
        self.record.updates += 1
        if done:
            self.history.append(self.record)
            self.phase = ServerPhase.Idle
        return []

    def abort(self) -> None:
        self.handler.reset_round(0)
        self.sampled = []
        self.phase = ServerPhase.Idle

    def exit_packages(self) -> list[Package]:
        self.phase = ServerPhase.Finished
        return [control(self.rank, r, self.round, MessageCode.Exit) for r in self.client_ranks]


def sync_server_round(server: SyncServer, transport: Endpoint, fraction: float, rng: Rng,
                      timeout: float | None = None) -> SyncServer:
    """Run one synchronous round over a transport; transport failure aborts it."""
    outgoing = server.begin_round(fraction, rng)
    try:
        for pkg in outgoing:
            transport.send(pkg)
        while server.phase is ServerPhase.Collecting:
            server.handle(transport.recv(timeout))
    except TransportError as exc:
        failed_round = server.round
        server.abort()
        raise RoundAborted(f"round {failed_round} aborted: {exc}") from exc
    return server


# -- clients ----------------------------------------------------------------------


class SyncClient:
    """Trains on every model it is sent and uploads the result."""

    def __init__(self, rank: int, dataset: Dataset, indices: Sequence[int], cfg: TrainConfig,
                 layout: LayoutDescriptor, wire: WireFormat = WireFormat(),
                 upstream: int = SERVER_RANK):
        self.rank = rank
        self.dataset = dataset
        self.indices = list(indices)
        self.cfg = cfg
        self.layout = layout
        self.wire = wire
        self.upstream = upstream
        self.phase = ClientPhase.WaitingModel
        self.rounds_trained: list[int] = []

    def _train_and_upload(self, pkg: Package) -> Package:
        reference = self.wire.read_downlink(pkg)
        self.phase = ClientPhase.Training
        update = local_train(ModelParameters(reference, self.layout), self.dataset, self.indices,
                             self.cfg, client_id=self.rank, round=pkg.round)
        self.phase = ClientPhase.Uploading
        out = self.wire.uplink(self.rank, self.upstream, pkg.round, update.params.values,
                               update.n_k, reference)
        self.rounds_trained.append(pkg.round)
        self.phase = ClientPhase.WaitingModel
        return out

    def handle(self, pkg: Package) -> list[Package]:
        if self.phase is ClientPhase.Exited:
            raise ProtocolError(f"client {self.rank} received {pkg.message_code.name} after Exit")
        if pkg.message_code is MessageCode.Exit:
            self.phase = ClientPhase.Exited
            return []
        if pkg.message_code is MessageCode.ParameterUpdate:
            return [self._train_and_upload(pkg)]
        raise ProtocolError(f"client {self.rank} cannot handle {pkg.message_code.name}")


def sync_client_loop(client: SyncClient, transport: Endpoint) -> None:
    """Receive models until Exit; decode errors propagate to the caller."""
    while client.phase is not ClientPhase.Exited:
        for out in client.handle(transport.recv()):
            transport.send(out)


class AsyncClient(SyncClient):
    """Request-driven client: request, train on the reply, upload, await ack.

    ``cycles`` is how many request/upload cycles it runs by itself; with the
    default of 0 requests are triggered externally through :meth:`request`.
    """

    def __init__(self, *args, cycles: int = 0, **kwargs):
        super().__init__(*args, **kwargs)
        self.cycles = cycles
        self.known_round = 0

    def request(self) -> Package:
        return control(self.rank, self.upstream, self.known_round, MessageCode.ParameterRequest)

    def start(self) -> list[Package]:
        return [self.request()] if self.cycles > 0 else []

    def handle(self, pkg: Package) -> list[Package]:
        if pkg.message_code is MessageCode.Register and self.phase is not ClientPhase.Exited:
            self.known_round = pkg.round
            self.cycles = max(0, self.cycles - 1)
            return [self.request()] if self.cycles > 0 else []
        if pkg.message_code is MessageCode.ParameterUpdate:
            self.known_round = pkg.round
        return super().handle(pkg)


def async_client_loop(client: AsyncClient, transport: Endpoint) -> None:
    for out in client.start():
        transport.send(out)
    sync_client_loop(client, transport)


# -- asynchronous server ----------------------------------------------------------


@dataclass
class AsyncRecord:
    round: int
    client: int
    staleness: int
    bytes_up: int
    bytes_down: int


class AsyncServer:
    """Serves the current model on request and mixes in every upload on arrival."""

    def __init__(self, global_params: ModelParameters, wire: WireFormat = WireFormat(),
                 alpha: float = 0.5, staleness_exponent: float = 0.0, drop_stale: bool = False,
                 rank: int = SERVER_RANK):
        self.rank = rank
        self.wire = wire
        self.alpha = alpha
        self.staleness_exponent = staleness_exponent
        self.drop_stale = drop_stale
        self.global_params = global_params.copy()
        self.round = 0
        self.references: dict[int, np.ndarray] = {}
        self.pending: dict[int, tuple[int, int]] = {}  # rank -> (bytes up, bytes down)
        self.history: list[AsyncRecord] = []
        self.on_update: Callable[[AsyncRecord], None] | None = None

    def handle(self, pkg: Package) -> list[Package]:
        if pkg.round > self.round:
            raise FutureRound(f"package for round {pkg.round} while server is at {self.round}")
        code = pkg.message_code
        src = pkg.sender_rank
        if code is MessageCode.ParameterRequest:
            reply = self.wire.downlink(self.rank, src, self.round, self.global_params.values)
            self.references[src] = self.wire.roundtrip(self.global_params.values)
            self.pending[src] = (pkg.encoded_size, reply.encoded_size)
            return [reply]
        if code is MessageCode.ParameterUpdate:
            if src not in self.references:
                log.warning("dropping upload from rank %d that never requested a model", src)
                return []
            values, n_k = self.wire.read_uplink(pkg, self.references.pop(src))
            staleness = self.round - pkg.round
            ack = control(self.rank, src, self.round + 1, MessageCode.Register)
            up, down = self.pending.pop(src, (0, 0))
            if self.drop_stale and staleness > 0:
                log.info("dropping upload from rank %d with staleness %d", src, staleness)
                return [replace(ack, round=self.round)]
            update = ClientUpdate(src, self.global_params.with_values(values), n_k, pkg.round)
            self.global_params = async_mix(self.global_params, update, self.alpha, self.round,
                                           self.staleness_exponent)
            rec = AsyncRecord(self.round, src, staleness, up + pkg.encoded_size, down + ack.encoded_size)
            self.round += 1
            self.history.append(rec)
            if self.on_update is not None:
                self.on_update(rec)
            return [ack]
        log.warning("dropping %s from rank %d", code.name, src)
        return []


# -- scheduler --------------------------------------------------------------------


class SchedulerMode(Enum):
    Forward = "forward"
    MiddleAggregate = "middle"


@dataclass
class SchedulerConfig:
    group_id: int
    rank: int
    downstream: list[int]
    mode: SchedulerMode = SchedulerMode.Forward
    upstream_rank: int = SERVER_RANK

    def __post_init__(self):
        if not self.downstream:
            raise ProtocolError(f"scheduler group {self.group_id} has no downstream clients")
        self.mode = SchedulerMode(self.mode)


class Scheduler:
    """Relay between the server and one client group.

    Forward mode passes packages through untouched except for the routing
    ranks.  MiddleAggregate mode fans the model out to its group, FedAvgs the
    group's uploads and sends a single update upstream whose sample count is
    the group total.
    """

    def __init__(self, cfg: SchedulerConfig, wire: WireFormat = WireFormat(),
                 layout: LayoutDescriptor | None = None):
        self.cfg = cfg
        self.rank = cfg.rank
        self.wire = wire
        self.layout = layout
        self.reference = np.zeros(0)
        self.round = 0
        self.buffer: dict[int, ClientUpdate] = {}
        self.exited = False
        self._exit_sent: set[int] = set()

    def handle(self, pkg: Package) -> list[Package]:
        if pkg.sender_rank == self.cfg.upstream_rank:
            return self._from_upstream(pkg)
        if pkg.sender_rank not in self.cfg.downstream:
            raise RoutingError(f"scheduler {self.rank}: no mapping for sender rank {pkg.sender_rank}")
        return self._from_downstream(pkg)

    def _from_upstream(self, pkg: Package) -> list[Package]:
        if self.cfg.mode is SchedulerMode.Forward:
            if pkg.receiver_rank not in self.cfg.downstream:
                raise RoutingError(f"scheduler {self.rank}: no mapping for rank {pkg.receiver_rank}")
            if pkg.message_code is MessageCode.Exit:
                self._exit_sent.add(pkg.receiver_rank)
                self.exited = self._exit_sent.issuperset(self.cfg.downstream)
            return [replace(pkg, sender_rank=self.rank)]
        if pkg.message_code is MessageCode.Exit:
            self.exited = True
            return [replace(pkg, sender_rank=self.rank, receiver_rank=r) for r in self.cfg.downstream]
        if pkg.message_code is not MessageCode.ParameterUpdate:
            raise ProtocolError(f"scheduler {self.rank}: unexpected {pkg.message_code.name} from upstream")
        self.reference = self.wire.read_downlink(pkg)
        self.round = pkg.round
        self.buffer = {}
        return [replace(pkg, sender_rank=self.rank, receiver_rank=r) for r in self.cfg.downstream]

    def _from_downstream(self, pkg: Package) -> list[Package]:
        if self.cfg.mode is SchedulerMode.Forward:
            return [replace(pkg, receiver_rank=self.cfg.upstream_rank)]
        if pkg.message_code is not MessageCode.ParameterUpdate:
            log.warning("scheduler %d: dropping %s from rank %d", self.rank,
                        pkg.message_code.name, pkg.sender_rank)
            return []
        if pkg.round != self.round or pkg.sender_rank in self.buffer:
            raise ProtocolError(f"scheduler {self.rank}: unexpected upload from rank {pkg.sender_rank}")
        values, n_k = self.wire.read_uplink(pkg, self.reference)
        params = ModelParameters(values, self.layout or LayoutDescriptor(((values.size,),)))
        self.buffer[pkg.sender_rank] = ClientUpdate(pkg.sender_rank, params, n_k, pkg.round)
        if len(self.buffer) < len(self.cfg.downstream):
            return []
        group = [self.buffer[r] for r in sorted(self.buffer)]
        merged = fedavg(group)
        total = sum(u.n_k for u in group)
        self.buffer = {}
        plain = WireFormat(self.wire.dtype, Compression.None_)
        return [plain.uplink(self.rank, self.cfg.upstream_rank, self.round, merged.values, total,
                             self.reference)]


def scheduler_run(scheduler: Scheduler, transport_up: Endpoint, transport_down: Endpoint) -> None:
    """Relay between two blocking transports until Exit has been passed down."""
    inbox: queue.Queue = queue.Queue()

    def pump(ep: Endpoint) -> None:
        try:
            while True:
                inbox.put(ep.recv())
        except Exception as exc:  # surfaced by the relay loop
            inbox.put(exc)

    for ep in (transport_up, transport_down):
        threading.Thread(target=pump, args=(ep,), daemon=True).start()
    while not scheduler.exited:
        item = inbox.get()
        if isinstance(item, Exception):
            raise item
        for out in scheduler.handle(item):
            if out.receiver_rank == scheduler.cfg.upstream_rank:
                transport_up.send(out)
            else:
                transport_down.send(out)
