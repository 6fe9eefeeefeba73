"""Experiment assembly and the deployment scenarios.

``run_standalone`` trains the sampled clients one after another in-process and
aggregates directly.  ``run_simulate`` runs the real protocol actors over the
simulated network.  Both build the same packages (the standalone loop encodes
and decodes them without sending), so under one configuration they produce
bit-identical parameters and byte counts.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .aggregate import ClientUpdate, async_mix, fedavg, sample_clients
from .config import ExperimentConfig
from .data import Dataset, load_mnist_dir, synth_classification
from .errors import ConfigError
from .packaging import Compression, DType, MessageCode, ModelParameters
from .partition import PartitionMap, make_partition
from .protocol import (
    AsyncClient,
    AsyncServer,
    Scheduler,
    SchedulerConfig,
    SchedulerMode,
    SyncClient,
    SyncServer,
    WireFormat,
    async_client_loop,
    control,
    scheduler_run,
    sync_client_loop,
    sync_server_round,
)
from .rng import seed_from
from .trainer import Model, TrainConfig, evaluate, serial_train
from .transport import SERVER_RANK, SimNetwork, TcpClientEndpoint, TcpServerEndpoint

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "global_loss", "accuracy", "bytes_up", "bytes_down", "wall_ms")
_SAMPLING_STREAM = 0x5A3


@dataclass
class Experiment:
    cfg: ExperimentConfig
    train: Dataset
    test: Dataset
    partition: PartitionMap
    model: Model
    init: ModelParameters
    train_cfg: TrainConfig
    wire: WireFormat


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    if cfg.dataset == "synthetic":
        train = synth_classification(cfg.n, cfg.d, cfg.num_classes, cfg.separation, cfg.seed)
        n_test = max(cfg.num_classes, cfg.n // 4)
        test = synth_classification(n_test, cfg.d, cfg.num_classes, cfg.separation, cfg.seed, split=1)
    else:
        train = load_mnist_dir(cfg.idx_dir, "train")
        test = load_mnist_dir(cfg.idx_dir, "test")
    if cfg.partition_file:
        try:
            partition = PartitionMap.load(cfg.partition_file)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"partition_file: {exc}") from exc
        if partition.n_total != train.n or partition.num_clients != cfg.num_clients:
            raise ConfigError(
                f"partition_file: {partition.num_clients} clients over {partition.n_total} samples, "
                f"config has {cfg.num_clients} clients over {train.n}"
            )
    else:
        partition = make_partition(cfg.partition, train.y, cfg.num_clients, cfg.seed, beta=cfg.beta,
                                   min_size=cfg.min_size, num_shards=cfg.num_shards,
                                   shards_per_client=cfg.shards_per_client)
    model = Model(cfg.model, train.d, train.num_classes, cfg.hidden if cfg.model == "mlp" else 0)
    train_cfg = TrainConfig(cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed, cfg.momentum)
    compression = {"none": Compression.None_, "topk": Compression.TopK, "f16": Compression.F16}
    wire = WireFormat(DType.F32 if cfg.dtype == "f32" else DType.F64,
                      compression[cfg.compression], cfg.topk_fraction)
    return Experiment(cfg, train, test, partition, model, model.init_params(cfg.seed), train_cfg, wire)


# -- metrics ----------------------------------------------------------------------


@dataclass
class MetricsRow:
    round: int
    global_loss: float
    accuracy: float
    bytes_up: int
    bytes_down: int
    wall_ms: int

    def as_list(self) -> list:
        return [self.round, repr(self.global_loss), repr(self.accuracy), self.bytes_up,
                self.bytes_down, self.wall_ms]


@dataclass
class RunResult:
    rows: list[MetricsRow] = field(default_factory=list)
    trajectory: list[np.ndarray] = field(default_factory=list)
    final: ModelParameters | None = None


class _Recorder:
    """Evaluates the global model and appends metrics rows as rounds finish."""

    def __init__(self, exp: Experiment, result: RunResult, out: IO[str] | None):
        self.exp = exp
        self.result = result
        self.writer = csv.writer(out, lineterminator="\n") if out is not None else None
        if self.writer:
            self.writer.writerow(CSV_COLUMNS)
        self.t0 = time.perf_counter()

    def row(self, round: int, params: ModelParameters, up: int, down: int) -> None:
        loss, acc = evaluate(params, self.exp.test)
        now = time.perf_counter()
        wall = int(round_ms(now - self.t0)) if self.exp.cfg.record_wall_time else 0
        self.t0 = now
        row = MetricsRow(round, loss, acc, up, down, wall)
        self.result.rows.append(row)
        self.result.trajectory.append(params.values.copy())
        self.result.final = params
        if self.writer:
            self.writer.writerow(row.as_list())


def round_ms(seconds: float) -> float:
    return round(seconds * 1000.0)


def _open_metrics(cfg: ExperimentConfig):
    if not cfg.metrics_out:
        return None
    return open(cfg.metrics_out, "w", newline="")


def _with_metrics(cfg: ExperimentConfig, body) -> RunResult:
    out = _open_metrics(cfg)
    try:
        return body(out)
    finally:
        if out is not None:
            out.close()


# -- standalone -------------------------------------------------------------------


def run_standalone(cfg: ExperimentConfig, exp: Experiment | None = None) -> RunResult:
    exp = exp or build_experiment(cfg)
    body = _standalone_async if cfg.async_enabled else _standalone_sync
    return _with_metrics(cfg, lambda out: body(exp, out))


def _standalone_sync(exp: Experiment, out) -> RunResult:
    cfg, wire = exp.cfg, exp.wire
    result = RunResult(final=exp.init)
    rec = _Recorder(exp, result, out)
    rng = seed_from(cfg.seed, [_SAMPLING_STREAM])
    global_params = exp.init.copy()
    for r in range(cfg.rounds):
        picks = sample_clients(cfg.num_clients, cfg.sample_fraction, rng)
        reference = wire.roundtrip(global_params.values)
        down = sum(wire.downlink(SERVER_RANK, cid + 1, r, global_params.values).encoded_size
                   for cid in picks)
        trained = serial_train(global_params.with_values(reference), exp.train, exp.partition,
                               picks, exp.train_cfg, round=r)
        updates, up = [], 0
        for u in trained:
            rank = u.client_id + 1
            pkg = wire.uplink(rank, SERVER_RANK, r, u.params.values, u.n_k, reference)
            up += pkg.encoded_size
            values, n_k = wire.read_uplink(pkg, reference)
            updates.append(ClientUpdate(rank, global_params.with_values(values), n_k, r))
        global_params = fedavg(sorted(updates, key=lambda u: u.client_id))
        rec.row(r, global_params, up, down)
    return result


def _standalone_async(exp: Experiment, out) -> RunResult:
    cfg, wire = exp.cfg, exp.wire
    result = RunResult(final=exp.init)
    rec = _Recorder(exp, result, out)
    rng = seed_from(cfg.seed, [_SAMPLING_STREAM])
    global_params = exp.init.copy()
    server_round = 0
    known = {}
    for _ in range(cfg.rounds):
        picks = sample_clients(cfg.num_clients, cfg.sample_fraction, rng)
        served_round = server_round
        served = global_params
        reference = wire.roundtrip(served.values)
        trained = serial_train(served.with_values(reference), exp.train, exp.partition, picks,
                               exp.train_cfg, round=served_round)
        for u in trained:
            rank = u.client_id + 1
            req = control(rank, SERVER_RANK, known.get(rank, 0), MessageCode.ParameterRequest)
            reply = wire.downlink(SERVER_RANK, rank, served_round, served.values)
            pkg = wire.uplink(rank, SERVER_RANK, served_round, u.params.values, u.n_k, reference)
            values, n_k = wire.read_uplink(pkg, reference)
            staleness = server_round - served_round
            if cfg.drop_stale and staleness > 0:
                known[rank] = server_round
                continue
            update = ClientUpdate(rank, global_params.with_values(values), n_k, served_round)
            global_params = async_mix(global_params, update, cfg.alpha, server_round,
                                      cfg.staleness_exponent)
            ack = control(SERVER_RANK, rank, server_round + 1, MessageCode.Register)
            rec.row(server_round, global_params, req.encoded_size + pkg.encoded_size,
                    reply.encoded_size + ack.encoded_size)
            server_round += 1
            known[rank] = server_round
    return result


# -- simulated network ------------------------------------------------------------


def _split_groups(ranks: list[int], groups: int) -> list[list[int]]:
    base, extra = divmod(len(ranks), groups)
    out, start = [], 0
    for g in range(groups):
        size = base + (1 if g < extra else 0)
        out.append(ranks[start : start + size])
        start += size
    return out


def run_simulate(cfg: ExperimentConfig, exp: Experiment | None = None,
                 network: SimNetwork | None = None) -> RunResult:
    exp = exp or build_experiment(cfg)
    net = network if network is not None else SimNetwork()
    body = _simulate_async if cfg.async_enabled else _simulate_sync
    return _with_metrics(cfg, lambda out: body(exp, net, out))


def _client_ranks(cfg: ExperimentConfig) -> list[int]:
    return [cid + 1 for cid in range(cfg.num_clients)]


def _simulate_sync(exp: Experiment, net: SimNetwork, out) -> RunResult:
    cfg, wire = exp.cfg, exp.wire
    layout = exp.init.layout
    ranks = _client_ranks(cfg)
    net.register([SERVER_RANK] + ranks)
    upstream = {r: SERVER_RANK for r in ranks}
    server_clients = ranks
    if cfg.groups:
        mode = SchedulerMode.Forward if cfg.scheduler_mode == "forward" else SchedulerMode.MiddleAggregate
        sched_ranks = []
        for g, members in enumerate(_split_groups(ranks, cfg.groups)):
            srank = cfg.num_clients + 1 + g
            net.register([srank])
            net.attach(srank, Scheduler(SchedulerConfig(g, srank, members, mode), wire, layout))
            sched_ranks.append(srank)
            for r in members:
                upstream[r] = srank
                if mode is SchedulerMode.Forward:
                    net.add_route(SERVER_RANK, r, srank)
        if mode is SchedulerMode.MiddleAggregate:
            server_clients = sched_ranks
    clients = {}
    for r in ranks:
        clients[r] = SyncClient(r, exp.train, exp.partition[r - 1], exp.train_cfg, layout, wire,
                                upstream=upstream[r])
        net.attach(r, clients[r])
    server = SyncServer(exp.init, server_clients, wire)
    endpoint = net.endpoint(SERVER_RANK)
    rng = seed_from(cfg.seed, [_SAMPLING_STREAM])
    result = RunResult(final=exp.init)
    rec = _Recorder(exp, result, out)
    for _ in range(cfg.rounds):
        sync_server_round(server, endpoint, cfg.sample_fraction, rng)
        stats = server.history[-1]
        rec.row(stats.round, server.global_params, stats.bytes_up, stats.bytes_down)
    for pkg in server.exit_packages():
        endpoint.send(pkg)
    net.run()
    return result


def _simulate_async(exp: Experiment, net: SimNetwork, out) -> RunResult:
    cfg, wire = exp.cfg, exp.wire
    layout = exp.init.layout
    ranks = _client_ranks(cfg)
    net.register([SERVER_RANK] + ranks)
    server = AsyncServer(exp.init, wire, cfg.alpha, cfg.staleness_exponent, cfg.drop_stale)
    net.attach(SERVER_RANK, server)
    clients = {}
    for r in ranks:
        clients[r] = AsyncClient(r, exp.train, exp.partition[r - 1], exp.train_cfg, layout, wire)
        net.attach(r, clients[r])
    result = RunResult(final=exp.init)
    rec = _Recorder(exp, result, out)
    server.on_update = lambda s: rec.row(s.round, server.global_params, s.bytes_up, s.bytes_down)
    rng = seed_from(cfg.seed, [_SAMPLING_STREAM])
    for _ in range(cfg.rounds):
        for cid in sample_clients(cfg.num_clients, cfg.sample_fraction, rng):
            net.endpoint(cid + 1).send(clients[cid + 1].request())
        net.run()
    for r in ranks:
        net.endpoint(SERVER_RANK).send(control(SERVER_RANK, r, server.round, MessageCode.Exit))
    net.run()
    return result


# -- cross-process ----------------------------------------------------------------


def run_server(cfg: ExperimentConfig) -> RunResult:
    exp = build_experiment(cfg)
    endpoint = TcpServerEndpoint(cfg.host, cfg.port)
    try:
        ranks = endpoint.accept(cfg.world_size - 1, timeout=cfg.timeout)
        log.info("server: ranks %s registered", ranks)
        body = _server_async if cfg.async_enabled else _server_sync
        return _with_metrics(cfg, lambda out: body(exp, endpoint, ranks, out))
    finally:
        endpoint.close()


def _server_sync(exp: Experiment, endpoint: TcpServerEndpoint, ranks: list[int], out) -> RunResult:
    cfg = exp.cfg
    server = SyncServer(exp.init, ranks, exp.wire)
    rng = seed_from(cfg.seed, [_SAMPLING_STREAM])
    result = RunResult(final=exp.init)
    rec = _Recorder(exp, result, out)
    try:
        for _ in range(cfg.rounds):
            sync_server_round(server, endpoint, cfg.sample_fraction, rng, timeout=cfg.timeout)
            stats = server.history[-1]
            rec.row(stats.round, server.global_params, stats.bytes_up, stats.bytes_down)
            if out is not None:
                out.flush()
    finally:
        for pkg in server.exit_packages():
            try:
                endpoint.send(pkg)
            except Exception as exc:  # best effort on shutdown
                log.warning("could not send Exit to rank %d: %s", pkg.receiver_rank, exc)
    return result


def _server_async(exp: Experiment, endpoint: TcpServerEndpoint, ranks: list[int], out) -> RunResult:
    cfg = exp.cfg
    server = AsyncServer(exp.init, exp.wire, cfg.alpha, cfg.staleness_exponent, cfg.drop_stale)
    result = RunResult(final=exp.init)
    rec = _Recorder(exp, result, out)
    server.on_update = lambda s: rec.row(s.round, server.global_params, s.bytes_up, s.bytes_down)
    expected = cfg.rounds * len(ranks)
    handled = 0
    try:
        while handled < expected:
            pkg = endpoint.recv(cfg.timeout)
            handled += pkg.message_code is MessageCode.ParameterUpdate
            for reply in server.handle(pkg):
                endpoint.send(reply)
    finally:
        for r in ranks:
            try:
                endpoint.send(control(SERVER_RANK, r, server.round, MessageCode.Exit))
            except Exception as exc:
                log.warning("could not send Exit to rank %d: %s", r, exc)
    return result


def run_client(cfg: ExperimentConfig) -> None:
    exp = build_experiment(cfg)
    upstream_rank = cfg.upstream_rank
    if cfg.rank > exp.partition.num_clients:
        raise ConfigError(f"rank: {cfg.rank} has no partition entry ({exp.partition.num_clients} clients)")
    endpoint = TcpClientEndpoint(cfg.host, cfg.port, cfg.rank, upstream_rank=upstream_rank,
                                 retries=cfg.connect_retries, backoff=cfg.connect_backoff)
    layout = exp.init.layout
    indices = exp.partition[cfg.rank - 1]
    try:
        if cfg.async_enabled:
            client = AsyncClient(cfg.rank, exp.train, indices, exp.train_cfg, layout, exp.wire,
                                 upstream=upstream_rank, cycles=cfg.rounds)
            async_client_loop(client, endpoint)
        else:
            client = SyncClient(cfg.rank, exp.train, indices, exp.train_cfg, layout, exp.wire,
                                upstream=upstream_rank)
            sync_client_loop(client, endpoint)
    finally:
        endpoint.close()


def run_scheduler(cfg: ExperimentConfig) -> None:
    exp = build_experiment(cfg)
    mode = SchedulerMode.Forward if cfg.scheduler_mode == "forward" else SchedulerMode.MiddleAggregate
    sched = Scheduler(SchedulerConfig(cfg.group_id, cfg.rank, list(cfg.downstream), mode),
                      exp.wire, exp.init.layout)
    down = TcpServerEndpoint(cfg.host, cfg.listen_port, rank=cfg.rank)
    down.accept(len(cfg.downstream), timeout=cfg.timeout)
    serves = list(cfg.downstream) if mode is SchedulerMode.Forward else [cfg.rank]
    up = TcpClientEndpoint(cfg.host, cfg.port, cfg.rank, serves=serves,
                           retries=cfg.connect_retries, backoff=cfg.connect_backoff)
    try:
        scheduler_run(sched, up, down)
    finally:
        up.close()
        down.close()
