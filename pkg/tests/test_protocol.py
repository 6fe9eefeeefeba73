import numpy as np
import pytest

from fedsim.aggregate import fedavg
from fedsim.data import synth_classification
from fedsim.errors import FutureRound, ProtocolError, RoundAborted, RoutingError
from fedsim.packaging import Compression, DType, LayoutDescriptor, MessageCode, ModelParameters
from fedsim.partition import iid_partition
from fedsim.protocol import (
    AsyncClient,
    AsyncServer,
    ClientPhase,
    Scheduler,
    SchedulerConfig,
    SchedulerMode,
    ServerPhase,
    SyncClient,
    SyncServer,
    WireFormat,
    control,
    sync_server_round,
)
from fedsim.rng import Rng
from fedsim.transport import SimNetwork
from fedsim.trainer import Model, TrainConfig, local_train, serial_train

CFG = TrainConfig(epochs=1, lr=0.1, batch_size=16)


def vec(*xs):
    xs = np.array(xs, dtype=np.float64)
    return ModelParameters(xs, LayoutDescriptor(((xs.size,),)))


@pytest.fixture(scope="module")
def world():
    ds = synth_classification(300, 4, 2, 3.0, seed=1)
    model = Model("logistic", 4, 2)
    part = iid_partition(ds.n, 10, seed=0)
    return ds, model, part


def sim_world(world, num_clients, wire=WireFormat(), drop=()):
    ds, model, part = world
    net = SimNetwork(drop=drop)
    ranks = list(range(1, num_clients + 1))
    eps = net.register([0, *ranks])
    clients = {}
    for r in ranks:
        clients[r] = SyncClient(r, ds, part[r - 1], CFG, model.layout, wire)
        net.attach(r, clients[r])
    server = SyncServer(model.init_params(0), ranks, wire)
    return net, eps[0], server, clients


class TestWireFormat:
    @pytest.mark.parametrize("comp", list(Compression))
    def test_uplink_roundtrip(self, comp, np_rng):
        wire = WireFormat(DType.F64, comp, topk_fraction=1.0)
        ref = np_rng.normal(size=20)
        vals = ref + np_rng.normal(size=20) * 0.01
        got, n_k = WireFormat.read_uplink(wire.uplink(1, 0, 3, vals, 17, ref), ref)
        assert n_k == 17
        tol = 0 if comp is not Compression.F16 else 1e-5
        assert np.allclose(got, vals, atol=tol, rtol=0)

    def test_f32_downlink(self):
        wire = WireFormat(DType.F32)
        pkg = wire.downlink(0, 1, 0, np.array([0.1, 2.0]))
        assert np.array_equal(wire.read_downlink(pkg), wire.roundtrip(np.array([0.1, 2.0])))

    def test_bad_upload_shape(self):
        pkg = WireFormat().downlink(1, 0, 0, np.zeros(3))
        with pytest.raises(ProtocolError):
            WireFormat.read_uplink(pkg, np.zeros(3))


class TestSyncServer:
    def test_full_round_matches_fedavg(self, world):
        ds, model, part = world
        net, ep, server, _ = sim_world(world, 10)
        start = server.global_params.copy()
        sync_server_round(server, ep, 1.0, Rng(0))
        ups = serial_train(start, ds, {r: part[r - 1] for r in range(1, 11)}, range(1, 11), CFG)
        assert np.array_equal(server.global_params.values, fedavg(ups).values)
        assert server.round == 1 and server.history[0].updates == 10

    def test_partial_sampling(self, world):
        net, ep, server, _ = sim_world(world, 10)
        out = server.begin_round(0.3, Rng(0))
        assert len(out) == 3
        assert all(p.message_code is MessageCode.ParameterUpdate for p in out)

    def test_lost_reply_aborts(self, world):
        net, ep, server, clients = sim_world(world, 2, drop=[3])
        before = server.global_params.values.copy()
        with pytest.raises(RoundAborted):
            sync_server_round(server, ep, 1.0, Rng(0))
        assert server.round == 0 and server.phase is ServerPhase.Idle
        assert np.array_equal(server.global_params.values, before)
        assert net.dropped == [3]

    def test_future_round(self, world):
        _, _, server, _ = sim_world(world, 2)
        server.begin_round(1.0, Rng(0))
        with pytest.raises(FutureRound):
            server.handle(control(1, 0, 5, MessageCode.ParameterUpdate))

    def test_unsampled_sender_ignored(self, world):
        _, _, server, _ = sim_world(world, 10)
        server.begin_round(0.1, Rng(0))
        outsider = next(r for r in range(1, 11) if r not in server.sampled)
        pkg = server.wire.uplink(outsider, 0, 0, server.global_params.values, 5, server.reference)
        assert server.handle(pkg) == [] and server.record.updates == 0

    def test_round_while_collecting(self, world):
        _, _, server, _ = sim_world(world, 2)
        server.begin_round(1.0, Rng(0))
        with pytest.raises(ProtocolError):
            server.begin_round(1.0, Rng(0))


class TestSyncClient:
    def make(self, world):
        ds, model, part = world
        return SyncClient(1, ds, part[0], CFG, model.layout), model, ds, part

    def test_exit_first(self, world):
        client, *_ = self.make(world)
        assert client.handle(control(0, 1, 0, MessageCode.Exit)) == []
        assert client.phase is ClientPhase.Exited and client.rounds_trained == []
        with pytest.raises(ProtocolError):
            client.handle(control(0, 1, 0, MessageCode.ParameterUpdate))

    def test_one_upload_equals_local_train(self, world):
        client, model, ds, part = self.make(world)
        p = model.init_params(3)
        (up,) = client.handle(WireFormat().downlink(0, 1, 2, p.values))
        values, n_k = WireFormat.read_uplink(up, p.values)
        ref = local_train(p, ds, part[0], CFG, round=2)
        assert np.array_equal(values, ref.params.values) and n_k == ref.n_k
        assert (up.sender_rank, up.receiver_rank, up.round) == (1, 0, 2)

    def test_scripted_rounds(self, world):
        client, model, *_ = self.make(world)
        p = model.init_params(0).values
        uploads = []
        for r in range(5):
            uploads += client.handle(WireFormat().downlink(0, 1, r, p))
        client.handle(control(0, 1, 5, MessageCode.Exit))
        assert [u.round for u in uploads] == [0, 1, 2, 3, 4]
        assert client.phase is ClientPhase.Exited

    def test_rejects_request(self, world):
        client, *_ = self.make(world)
        with pytest.raises(ProtocolError):
            client.handle(control(0, 1, 0, MessageCode.ParameterRequest))


class TestAsync:
    def upload(self, server, rank, values, round=0, n_k=1):
        return server.wire.uplink(rank, 0, round, np.array(values, dtype=float), n_k,
                                  server.references[rank])

    def test_replacement(self):
        server = AsyncServer(vec(5.0, 1.0), alpha=1.0)
        (reply,) = server.handle(control(1, 0, 0, MessageCode.ParameterRequest))
        assert reply.receiver_rank == 1 and reply.round == 0
        (ack,) = server.handle(self.upload(server, 1, [2.0, 3.0]))
        assert server.global_params.values.tolist() == [2.0, 3.0]
        assert ack.message_code is MessageCode.Register and ack.round == 1
        assert server.round == 1 and server.history[0].staleness == 0

    def test_order_sensitivity(self):
        def run(order):
            server = AsyncServer(vec(0.0), alpha=0.5)
            for r in (1, 2):
                server.handle(control(r, 0, 0, MessageCode.ParameterRequest))
            ups = {1: self.upload(server, 1, [2.0]), 2: self.upload(server, 2, [4.0])}
            for r in order:
                server.handle(ups[r])
            return server.global_params.values[0]

        # 0 -> 1 -> 2.5  versus  0 -> 2 -> 2
        assert run([1, 2]) == 2.5 and run([2, 1]) == 2.0

    def test_reply_carries_round(self):
        server = AsyncServer(vec(0.0))
        server.round = 7
        (reply,) = server.handle(control(1, 0, 7, MessageCode.ParameterRequest))
        assert reply.round == 7

    def test_staleness_discount_and_drop(self):
        server = AsyncServer(vec(0.0), alpha=1.0, staleness_exponent=1.0)
        for r in (1, 2):
            server.handle(control(r, 0, 0, MessageCode.ParameterRequest))
        server.handle(self.upload(server, 1, [2.0]))
        server.handle(self.upload(server, 2, [4.0]))
        # second upload has staleness 1: alpha_t = 1 * 2 ** -1
        assert server.global_params.values[0] == 3.0
        dropper = AsyncServer(vec(0.0), alpha=1.0, drop_stale=True)
        for r in (1, 2):
            dropper.handle(control(r, 0, 0, MessageCode.ParameterRequest))
        dropper.handle(self.upload(dropper, 1, [2.0]))
        dropper.handle(self.upload(dropper, 2, [4.0]))
        assert dropper.global_params.values[0] == 2.0 and dropper.round == 1

    def test_unrequested_upload_dropped(self):
        server = AsyncServer(vec(0.0))
        pkg = WireFormat().uplink(1, 0, 0, np.array([1.0]), 1, np.zeros(1))
        assert server.handle(pkg) == [] and server.round == 0

    def test_async_client_cycles(self, world):
        ds, model, part = world
        net = SimNetwork()
        eps = net.register([0, 1])
        client = AsyncClient(1, ds, part[0], CFG, model.layout, cycles=3)
        server = AsyncServer(model.init_params(0))
        net.attach(0, server)
        net.attach(1, client)
        for pkg in client.start():
            eps[1].send(pkg)
        net.run()
        assert server.round == 3 and client.rounds_trained == [0, 1, 2]


class TestScheduler:
    def test_forward_is_verbatim(self, world):
        ds, model, part = world
        sched = Scheduler(SchedulerConfig(0, 11, [1, 2]))
        client = SyncClient(1, ds, part[0], CFG, model.layout, upstream=0)
        down = WireFormat().downlink(0, 1, 0, model.init_params(0).values)
        (relayed,) = sched.handle(down)
        assert relayed.payload == down.payload and relayed.receiver_rank == 1
        (up,) = client.handle(relayed)
        (fwd,) = sched.handle(up)
        assert fwd.payload == up.payload and fwd.slices == up.slices
        assert (fwd.sender_rank, fwd.receiver_rank) == (1, 0)

    def test_forward_exit_per_client(self):
        sched = Scheduler(SchedulerConfig(0, 11, [1, 2]))
        sched.handle(control(0, 1, 0, MessageCode.Exit))
        assert not sched.exited
        sched.handle(control(0, 2, 0, MessageCode.Exit))
        assert sched.exited

    def test_middle_aggregate(self):
        sched = Scheduler(SchedulerConfig(0, 11, [1, 2], SchedulerMode.MiddleAggregate))
        wire = WireFormat()
        fan = sched.handle(wire.downlink(0, 11, 0, np.array([9.0])))
        assert [p.receiver_rank for p in fan] == [1, 2]
        assert sched.handle(wire.uplink(1, 11, 0, np.array([0.0]), 1, np.array([9.0]))) == []
        (out,) = sched.handle(wire.uplink(2, 11, 0, np.array([4.0]), 3, np.array([9.0])))
        values, n_k = WireFormat.read_uplink(out, np.array([9.0]))
        assert values.tolist() == [3.0] and n_k == 4
        assert (out.sender_rank, out.receiver_rank) == (11, 0)

    def test_routing_error(self):
        sched = Scheduler(SchedulerConfig(0, 11, [1, 2]))
        with pytest.raises(RoutingError):
            sched.handle(control(7, 0, 0, MessageCode.ParameterUpdate))
        with pytest.raises(RoutingError):
            sched.handle(control(0, 5, 0, MessageCode.ParameterUpdate))

    def test_empty_group(self):
        with pytest.raises(ProtocolError):
            SchedulerConfig(0, 11, [])
