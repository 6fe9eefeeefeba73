"""Package delivery: a deterministic in-memory network and a TCP transport.

Both backends expose endpoints with the same two calls, ``send(pkg)`` (routed
by ``pkg.receiver_rank``) and ``recv()``.  Packages always travel as
``encode_package`` bytes, so the simulator exercises the real wire format.

The simulated network is single-threaded.  Actors that react to messages
(``handle(pkg) -> list[Package]``) can be attached to ranks; a blocking
``recv`` on any endpoint then steps those actors in global send order until
something arrives for the caller, or raises :class:`ChannelClosed` once no
actor can make progress.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from .errors import (
    ChannelClosed,
    ConnectFailed,
    DuplicateRank,
    PackagingError,
    ProtocolError,
    TransportError,
    UnknownEndpoint,
)
from .packaging import (
    HEADER_SIZE,
    PREFIX,
    PREFIX_SIZE,
    MessageCode,
    Package,
    decode_package,
    encode_package,
)

log = logging.getLogger(__name__)

SERVER_RANK = 0
MAX_FRAME = 1 << 34


class Actor(Protocol):
    def handle(self, pkg: Package) -> list[Package]: ...


class Endpoint(Protocol):
    rank: int

    def send(self, pkg: Package) -> None: ...

    def recv(self, timeout: float | None = None) -> Package: ...

    def close(self) -> None: ...


# -- simulated network ------------------------------------------------------------


class SimEndpoint:
    def __init__(self, net: "SimNetwork", rank: int):
        self.net = net
        self.rank = rank

    def send(self, pkg: Package) -> None:
        self.net.send(self.rank, pkg)

    def recv(self, timeout: float | None = None) -> Package:
        return self.net.recv(self.rank)

    def close(self) -> None:
        self.net.close(self.rank)


class SimNetwork:
    """Zero-latency, lossless (unless told otherwise) in-process network.

    ``drop`` lists global send sequence numbers (starting at 1) that are
    silently discarded, for exercising abort paths.
    """

    def __init__(self, drop: Iterable[int] = ()):
        self.queues: dict[int, deque[tuple[int, bytes]]] = {}
        self.seq = 0
        self.drop = set(drop)
        self.dropped: list[int] = []
        self.routes: dict[tuple[int, int], int] = {}
        self.actors: dict[int, Actor] = {}
        self.closed: set[int] = set()
        self.bytes_sent: dict[tuple[int, int], int] = defaultdict(int)
        self.delivery_log: list[tuple[int, int, int]] = []  # (seq, from, to)

    def register(self, ranks: Iterable[int]) -> dict[int, SimEndpoint]:
        ranks = list(ranks)
        seen = set(self.queues)
        for r in ranks:
            if r in seen:
                raise DuplicateRank(f"rank {r} registered twice")
            seen.add(r)
        for r in ranks:
            self.queues[r] = deque()
        return {r: SimEndpoint(self, r) for r in ranks}

    def endpoint(self, rank: int) -> SimEndpoint:
        if rank not in self.queues:
            raise UnknownEndpoint(f"rank {rank} is not registered")
        return SimEndpoint(self, rank)

    def add_route(self, from_rank: int, dest: int, via: int) -> None:
        """Packages from ``from_rank`` addressed to ``dest`` are delivered to ``via``."""
        self.routes[(from_rank, dest)] = via

    def attach(self, rank: int, actor: Actor) -> None:
        if rank not in self.queues:
            raise UnknownEndpoint(f"rank {rank} is not registered")
        self.actors[rank] = actor

    def close(self, rank: int) -> None:
        self.closed.add(rank)

    def send(self, from_rank: int, pkg: Package) -> None:
        if from_rank not in self.queues:
            raise UnknownEndpoint(f"sender rank {from_rank} is not registered")
        dest = self.routes.get((from_rank, pkg.receiver_rank), pkg.receiver_rank)
        if dest not in self.queues:
            raise UnknownEndpoint(f"rank {pkg.receiver_rank} is not registered")
        self.seq += 1
        if self.seq in self.drop:
            self.dropped.append(self.seq)
            return
        data = encode_package(pkg)
        self.bytes_sent[(from_rank, dest)] += len(data)
        self.queues[dest].append((self.seq, data))

    def pending(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def _pop(self, rank: int) -> Package:
        seq, data = self.queues[rank].popleft()
        pkg = decode_package(data)
        self.delivery_log.append((seq, pkg.sender_rank, rank))
        return pkg

    def step(self, exclude: int | None = None) -> bool:
        """Deliver the earliest pending message addressed to an attached actor."""
        best = None
        for rank, actor in self.actors.items():
            q = self.queues[rank]
            if rank != exclude and q and (best is None or q[0][0] < best[0]):
                best = (q[0][0], rank)
        if best is None:
            return False
        rank = best[1]
        for out in self.actors[rank].handle(self._pop(rank)):
            self.send(rank, out)
        return True

    def run(self) -> int:
        """Step attached actors until quiescent; returns the number of deliveries."""
        steps = 0
        while self.step():
            steps += 1
        return steps

    def recv(self, rank: int) -> Package:
        if rank not in self.queues:
            raise UnknownEndpoint(f"rank {rank} is not registered")
        while not self.queues[rank]:
            if not self.step(exclude=rank):
                raise ChannelClosed(f"rank {rank}: queue empty and no peer can make progress")
        return self._pop(rank)


# -- TCP --------------------------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            if got == 0:
                return None
            raise TransportError(f"connection closed mid-frame ({got}/{n} bytes)")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Package | None:
    """Read one length-prefixed package; ``None`` on a clean EOF between frames."""
    prefix = _recv_exact(sock, PREFIX_SIZE)
    if prefix is None:
        return None
    (total,) = PREFIX.unpack(prefix)
    if not PREFIX_SIZE + HEADER_SIZE <= total <= MAX_FRAME:
        raise TransportError(f"implausible frame length {total}")
    rest = _recv_exact(sock, total - PREFIX_SIZE)
    if rest is None:
        raise TransportError("connection closed after a length prefix")
    try:
        return decode_package(prefix + rest)
    except PackagingError as exc:
        raise TransportError(f"corrupt frame: {exc}") from exc


def register_package(rank: int, serves: Sequence[int], receiver: int = SERVER_RANK) -> Package:
    body = struct.pack(f"<{len(serves)}I", *serves)
    return Package.from_segments(rank, receiver, 0, MessageCode.Register, [body])


def served_ranks(pkg: Package) -> list[int]:
    body = pkg.payload
    if len(body) % 4:
        raise ProtocolError("register payload is not a list of u32 ranks")
    ranks = list(struct.unpack(f"<{len(body) // 4}I", body))
    return ranks or [pkg.sender_rank]


_EOF = object()


@dataclass
class _Conn:
    sock: socket.socket
    lock: threading.Lock = field(default_factory=threading.Lock)
    ranks: list[int] = field(default_factory=list)

    def send(self, pkg: Package) -> None:
        data = encode_package(pkg)
        with self.lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise TransportError(f"send to ranks {self.ranks} failed: {exc}") from exc


def _reader(conn: _Conn, inbox: queue.Queue) -> None:
    try:
        while True:
            pkg = read_frame(conn.sock)
            if pkg is None:
                break
            inbox.put(pkg)
    except (TransportError, OSError) as exc:
        inbox.put(TransportError(str(exc)))
    finally:
        inbox.put(_EOF)


class _Inbox:
    def __init__(self, peers: int):
        self.q: queue.Queue = queue.Queue()
        self.open = peers

    def get(self, timeout: float | None) -> Package:
        while True:
            if self.open == 0 and self.q.empty():
                raise ChannelClosed("all peers closed")
            try:
                item = self.q.get(timeout=timeout)
            except queue.Empty:
                raise TransportError(f"no package within {timeout}s") from None
            if item is _EOF:
                self.open -= 1
                continue
            if isinstance(item, TransportError):
                raise item
            return item


class TcpServerEndpoint:
    """Listening side: accepts connections until the expected ranks registered.

    A connection's Register package lists every rank it serves, so a
    forwarding scheduler can stand in for a whole client group.
    """

    def __init__(self, host: str, port: int, rank: int = SERVER_RANK):
        self.rank = rank
        self.listener = socket.create_server((host, port), reuse_port=False)
        self.host, self.port = self.listener.getsockname()[:2]
        self.conns: dict[int, _Conn] = {}
        self.inbox: _Inbox | None = None

    def accept(self, expected: int, timeout: float = 60.0) -> list[int]:
        """Block until ``expected`` distinct ranks registered; return them sorted."""
        deadline = time.monotonic() + timeout
        conns: list[_Conn] = []
        try:
            while len(self.conns) < expected:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ConnectFailed(
                        f"only {len(self.conns)}/{expected} ranks registered within {timeout}s"
                    )
                self.listener.settimeout(remaining)
                try:
                    sock, _ = self.listener.accept()
                except socket.timeout:
                    continue
                sock.settimeout(None)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn = _Conn(sock)
                first = read_frame(sock)
                if first is None or first.message_code is not MessageCode.Register:
                    sock.close()
                    log.warning("dropping connection that did not register")
                    continue
                ranks = served_ranks(first)
                for r in ranks:
                    if r in self.conns or r == self.rank:
                        sock.close()
                        raise DuplicateRank(f"rank {r} registered twice")
                conn.ranks = ranks
                for r in ranks:
                    self.conns[r] = conn
                conns.append(conn)
        finally:
            self.listener.close()
        self.inbox = _Inbox(len(conns))
        for conn in conns:
            threading.Thread(target=_reader, args=(conn, self.inbox.q), daemon=True).start()
        return sorted(self.conns)

    def send(self, pkg: Package) -> None:
        conn = self.conns.get(pkg.receiver_rank)
        if conn is None:
            raise UnknownEndpoint(f"rank {pkg.receiver_rank} is not connected")
        conn.send(pkg)

    def recv(self, timeout: float | None = None) -> Package:
        if self.inbox is None:
            raise TransportError("recv before accept")
        return self.inbox.get(timeout)

    def close(self) -> None:
        for conn in {id(c): c for c in self.conns.values()}.values():
            try:
                conn.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.sock.close()


class TcpClientEndpoint:
    """Dialing side: one connection to an upstream listener."""

    def __init__(self, host: str, port: int, rank: int, serves: Sequence[int] | None = None,
                 upstream_rank: int = SERVER_RANK, retries: int = 5, backoff: float = 1.0):
        self.rank = rank
        self.upstream_rank = upstream_rank
        sock = None
        last: Exception | None = None
        for attempt in range(retries):
            try:
                sock = socket.create_connection((host, port), timeout=5.0)
                break
            except OSError as exc:
                last = exc
                log.info("rank %d: dial %s:%d failed (%s), attempt %d/%d",
                         rank, host, port, exc, attempt + 1, retries)
                if attempt + 1 < retries:
                    time.sleep(backoff)
        if sock is None:
            raise ConnectFailed(f"rank {rank}: cannot reach {host}:{port} after {retries} tries: {last}")
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.conn = _Conn(sock, ranks=[upstream_rank])
        self.conn.send(register_package(rank, list(serves) if serves else [rank], upstream_rank))
        self.inbox = _Inbox(1)
        threading.Thread(target=_reader, args=(self.conn, self.inbox.q), daemon=True).start()

    def send(self, pkg: Package) -> None:
        self.conn.send(pkg)

    def recv(self, timeout: float | None = None) -> Package:
        return self.inbox.get(timeout)

    def close(self) -> None:
        try:
            self.conn.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.conn.sock.close()
