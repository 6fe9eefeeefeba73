import dataclasses
import socket
import struct
import threading

import pytest

from fedsim.errors import ChannelClosed, ConnectFailed, DuplicateRank, TransportError, UnknownEndpoint
from fedsim.packaging import MessageCode, Package, encode_package
from fedsim.rng import Rng
from fedsim.transport import (
    SimNetwork,
    TcpClientEndpoint,
    TcpServerEndpoint,
    register_package,
    served_ranks,
)
from helpers import random_package


def msg(sender, receiver, round=0, body=b""):
    return Package.from_segments(sender, receiver, round, MessageCode.ParameterUpdate, [body] if body else [])


class TestSim:
    def test_send_recv_identity(self):
        net = SimNetwork()
        eps = net.register([0, 1])
        p = msg(0, 1, 4, b"abc")
        eps[0].send(p)
        assert eps[1].recv() == p

    def test_fifo(self):
        net = SimNetwork()
        eps = net.register([0, 1])
        for r in range(5):
            eps[0].send(msg(0, 1, r))
        assert [eps[1].recv().round for r in range(5)] == list(range(5))

    def test_interleaved_global_order(self):
        net = SimNetwork()
        eps = net.register([0, 1, 2, 3])
        script = [1, 2, 3, 3, 1, 2, 1, 3, 2, 2]
        for i, s in enumerate(script):
            eps[s].send(msg(s, 0, i))
        got = [eps[0].recv() for _ in script]
        assert [p.round for p in got] == list(range(len(script)))
        assert [p.sender_rank for p in got] == script
        assert [seq for seq, _, _ in net.delivery_log] == list(range(1, len(script) + 1))

    def test_unknown_endpoint(self):
        net = SimNetwork()
        eps = net.register([0, 1])
        with pytest.raises(UnknownEndpoint):
            eps[0].send(msg(0, 9))
        with pytest.raises(UnknownEndpoint):
            net.endpoint(9)

    def test_duplicate_rank(self):
        net = SimNetwork()
        net.register([0, 3])
        with pytest.raises(DuplicateRank):
            net.register([3])
        with pytest.raises(DuplicateRank):
            SimNetwork().register([1, 3, 3])

    def test_five_endpoints(self):
        eps = SimNetwork().register(range(5))
        assert sorted(eps) == [0, 1, 2, 3, 4]

    def test_channel_closed(self):
        net = SimNetwork()
        eps = net.register([0, 1])
        eps[1].close()
        with pytest.raises(ChannelClosed):
            eps[0].recv()

    def test_actor_stepping(self):
        net = SimNetwork()
        eps = net.register([0, 1])

        class Echo:
            def handle(self, pkg):
                return [msg(1, 0, pkg.round + 100)]

        net.attach(1, Echo())
        eps[0].send(msg(0, 1, 1))
        eps[0].send(msg(0, 1, 2))
        assert [eps[0].recv().round, eps[0].recv().round] == [101, 102]

    def test_drop_schedule(self):
        net = SimNetwork(drop=[2])
        eps = net.register([0, 1])
        for r in range(3):
            eps[0].send(msg(0, 1, r))
        assert [eps[1].recv().round, eps[1].recv().round] == [0, 2]
        assert net.dropped == [2]

    def test_route(self):
        net = SimNetwork()
        eps = net.register([0, 1, 5])
        net.add_route(0, 1, via=5)
        eps[0].send(msg(0, 1))
        assert eps[5].recv().receiver_rank == 1

    def test_byte_accounting(self):
        net = SimNetwork()
        eps = net.register([0, 1])
        eps[0].send(msg(0, 1, body=b"x" * 12))
        assert net.bytes_sent[(0, 1)] == 56


def tcp_pair(rank=1, serves=None):
    server = TcpServerEndpoint("127.0.0.1", 0)
    client = TcpClientEndpoint("127.0.0.1", server.port, rank, serves=serves, retries=3, backoff=0.1)
    return server, client, server.accept(1, timeout=10)


class TestTcp:
    def test_register_payload(self):
        pkg = register_package(7, [7, 8, 9])
        assert served_ranks(pkg) == [7, 8, 9]
        assert served_ranks(register_package(4, [])) == [4]

    def test_loopback_fuzz(self):
        server, client, ranks = tcp_pair()
        assert ranks == [1]
        rng = Rng(2024)
        pkgs = [dataclasses.replace(random_package(rng), receiver_rank=1) for _ in range(1000)]

        def echo():
            for _ in pkgs:
                client.send(client.recv(timeout=10))

        t = threading.Thread(target=echo)
        t.start()
        for p in pkgs:
            server.send(p)
        back = [server.recv(timeout=10) for _ in pkgs]
        t.join()
        assert [encode_package(b) for b in back] == [encode_package(p) for p in pkgs]
        client.close()
        with pytest.raises(ChannelClosed):
            server.recv(timeout=10)
        server.close()

    def test_group_registration(self):
        server, client, ranks = tcp_pair(rank=11, serves=[1, 2, 3])
        assert ranks == [1, 2, 3]
        server.send(msg(0, 2, 5))
        got = client.recv(timeout=10)
        assert (got.receiver_rank, got.round) == (2, 5)
        with pytest.raises(UnknownEndpoint):
            server.send(msg(0, 4))
        client.close()
        server.close()

    def test_duplicate_rank(self):
        server = TcpServerEndpoint("127.0.0.1", 0)
        a = TcpClientEndpoint("127.0.0.1", server.port, 1, retries=1)
        b = TcpClientEndpoint("127.0.0.1", server.port, 1, retries=1)
        with pytest.raises(DuplicateRank):
            server.accept(2, timeout=10)
        a.close()
        b.close()
        server.close()

    def test_connect_failed(self):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        with pytest.raises(ConnectFailed):
            TcpClientEndpoint("127.0.0.1", port, 1, retries=2, backoff=0.05)

    def test_corrupt_frame(self):
        server = TcpServerEndpoint("127.0.0.1", 0)
        sock = socket.create_connection(("127.0.0.1", server.port))
        sock.sendall(encode_package(register_package(1, [1])))
        server.accept(1, timeout=10)
        bad = bytearray(encode_package(msg(1, 0, body=b"hello")))
        bad[8:12] = struct.pack("<I", 0xDEADBEEF)
        sock.sendall(bytes(bad))
        with pytest.raises(TransportError):
            server.recv(timeout=10)
        sock.close()
        server.close()

    def test_recv_timeout(self):
        server, client, _ = tcp_pair()
        with pytest.raises(TransportError):
            client.recv(timeout=0.1)
        client.close()
        server.close()
