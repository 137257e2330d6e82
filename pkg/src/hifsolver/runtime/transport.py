"""Message-passing transports: in-process loopback and TCP sockets.

Both present the same contract: reliable ordered delivery of tagged byte
messages between a fixed pair of ranks, a group barrier, and a group
all-to-all built on the point-to-point layer.  The loopback transport runs
P logical ranks as threads over ordered in-memory queues and is the default
for tests; the socket transport frames the same messages over a TCP full
mesh for true multi-process runs.

Wire format of the socket transport: each connection starts with a 4-byte
magic and a 4-byte version, then carries frames of (u32 tag, u32 source
rank, u64 payload length, payload bytes), all little-endian.  Ranks find
each other through a host:port roster file, one line per rank.
"""

from __future__ import annotations

import os
import socket
import struct
import threading
from collections import deque

from .stats import CommStats

WIRE_MAGIC = b"HIFW"
WIRE_VERSION = 1

# Reserved control tag; barrier tokens ride on it and stay out of CommStats.
TAG_BARRIER = 0xFFFF0001

_CONNECT_DEADLINE = 30.0


class TransportError(RuntimeError):
    pass


class TransportAborted(TransportError):
    """Raised on ranks parked in the fabric when a peer rank fails."""


class Transport:
    """Rank-addressed reliable tagged message passing.

    Subclasses implement _send_bytes and _recv_bytes; this base layers the
    accounting, the group barrier and the group all-to-all on top.
    """

    def __init__(self, rank: int, size: int, stats: CommStats | None = None):
        self.rank = rank
        self.size = size
        self.stats = stats if stats is not None else CommStats(rank)

    def set_phase(self, name: str) -> None:
        self.stats.set_phase(name)

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        if dst == self.rank:
            raise TransportError("self-sends must be handled locally")
        if not 0 <= dst < self.size:
            raise TransportError(f"destination rank {dst} out of range")
        self._send_bytes(dst, tag, payload)
        self.stats.record_send(len(payload))

    def recv(self, src: int, tag: int) -> bytes:
        if src == self.rank:
            raise TransportError("self-receives must be handled locally")
        payload = self._recv_bytes(src, tag)
        self.stats.record_receive(len(payload))
        return payload

    def barrier(self, ranks: list | None = None) -> None:
        """Block until every rank in ``ranks`` (default: all) arrives.

        Control traffic only; never counted in CommStats.
        """
        raise NotImplementedError

    def alltoall(self, ranks: list, payloads: dict) -> dict:
        """Exchange one payload with every member of ``ranks``.

        ``payloads`` maps destination rank to bytes (missing entries send
        empty messages).  Returns source rank -> received bytes, including
        this rank's own payload unsent.  Deterministic order: sends ascend
        by destination, receives ascend by source.
        """
        members = sorted(ranks)
        if self.rank not in members:
            raise TransportError(f"rank {self.rank} not in all-to-all group")
        out = {}
        for dst in members:
            body = payloads.get(dst, b"")
            if dst == self.rank:
                out[self.rank] = body
            else:
                self.send(dst, _TAG_ALLTOALL, body)
        for src in members:
            if src != self.rank:
                out[src] = self.recv(src, _TAG_ALLTOALL)
        return out

    def close(self) -> None:
        pass

    def _send_bytes(self, dst: int, tag: int, payload: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self, src: int, tag: int) -> bytes:
        raise NotImplementedError


_TAG_ALLTOALL = 0xFFFF0002


class LoopbackFabric:
    """Shared state for P thread-ranks: queues, barriers, abort flag."""

    def __init__(self, size: int):
        self.size = size
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._queues: dict = {}
        self._barriers: dict = {}
        self._aborted = False

    def put(self, key, payload: bytes) -> None:
        with self._cond:
            if self._aborted:
                raise TransportAborted("fabric aborted")
            self._queues.setdefault(key, deque()).append(payload)
            self._cond.notify_all()

    def get(self, key) -> bytes:
        with self._cond:
            while True:
                if self._aborted:
                    raise TransportAborted("fabric aborted")
                q = self._queues.get(key)
                if q:
                    return q.popleft()
                self._cond.wait(timeout=0.2)

    def barrier_for(self, ranks: tuple) -> threading.Barrier:
        with self._lock:
            bar = self._barriers.get(ranks)
            if bar is None:
                bar = threading.Barrier(len(ranks))
                self._barriers[ranks] = bar
            return bar

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            for bar in self._barriers.values():
                bar.abort()
            self._cond.notify_all()

    @property
    def aborted(self) -> bool:
        return self._aborted


class LoopbackTransport(Transport):
    """P logical ranks as threads with ordered per-(src, dst, tag) queues."""

    def __init__(self, fabric: LoopbackFabric, rank: int, stats: CommStats | None = None):
        super().__init__(rank, fabric.size, stats)
        self.fabric = fabric

    def _send_bytes(self, dst: int, tag: int, payload: bytes) -> None:
        self.fabric.put((self.rank, dst, tag), payload)

    def _recv_bytes(self, src: int, tag: int) -> bytes:
        return self.fabric.get((src, self.rank, tag))

    def barrier(self, ranks: list | None = None) -> None:
        members = tuple(sorted(ranks)) if ranks is not None else tuple(range(self.size))
        if len(members) <= 1:
            return
        bar = self.fabric.barrier_for(members)
        try:
            bar.wait()
        except threading.BrokenBarrierError as err:
            raise TransportAborted("fabric aborted during barrier") from err


def run_loopback(size: int, worker, *args, **kwargs) -> list:
    """Run ``worker(transport, rank, *args, **kwargs)`` on P thread-ranks.

    Returns the per-rank results in rank order.  The first raised exception
    aborts the fabric (fail-stop) and is re-raised with the rank attached.
    """
    fabric = LoopbackFabric(size)
    results = [None] * size
    failures = []
    failure_lock = threading.Lock()

    def body(rank: int) -> None:
        transport = LoopbackTransport(fabric, rank)
        try:
            results[rank] = worker(transport, rank, *args, **kwargs)
        except TransportAborted:
            pass
        except BaseException as err:  # noqa: BLE001 - fail-stop collection
            with failure_lock:
                failures.append((rank, err))
            fabric.abort()

    threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}") for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        rank, err = sorted(failures, key=lambda pair: pair[0])[0]
        raise TransportError(f"rank {rank} failed: {err}") from err
    return results


def load_roster(path: str) -> list:
    """Parse a roster file of host:port lines, one per rank."""
    roster = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            host, _, port = line.rpartition(":")
            roster.append((host, int(port)))
    if not roster:
        raise TransportError(f"roster file {path} lists no ranks")
    return roster


class SocketTransport(Transport):
    """TCP full mesh carrying the framed wire format.

    Each rank accepts connections from lower ranks and dials higher ranks;
    a reader thread per peer demultiplexes frames into tag queues, so
    blocking sends can never deadlock against an undrained socket.
    """

    def __init__(
        self,
        rank: int,
        roster: list,
        stats: CommStats | None = None,
        listen_fd: int | None = None,
    ):
        super().__init__(rank, len(roster), stats)
        self._peers: dict = {}
        self._cond = threading.Condition()
        self._queues: dict = {}
        self._readers: list = []
        self._closed = False
        if self.size == 1:
            return
        if listen_fd is not None:
            server = socket.socket(fileno=listen_fd)
        else:
            server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            server.bind(roster[rank])
            server.listen(self.size)
        try:
            self._bootstrap(server, roster)
        finally:
            server.close()
        for peer, conn in self._peers.items():
            t = threading.Thread(target=self._reader, args=(peer, conn), daemon=True)
            t.start()
            self._readers.append(t)

    def _bootstrap(self, server: socket.socket, roster: list) -> None:
        hello = WIRE_MAGIC + struct.pack("<II", WIRE_VERSION, self.rank)
        pending = self.size - 1 - self.rank  # lower ranks dial in
        server.settimeout(_CONNECT_DEADLINE)
        for peer in range(self.rank):
            conn = _dial(roster[peer])
            conn.sendall(hello)
            self._peers[peer] = conn
        for _ in range(pending):
            conn, _ = server.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            head = _read_exact(conn, len(WIRE_MAGIC) + 8)
            if head[:4] != WIRE_MAGIC:
                raise TransportError("bad wire magic on incoming connection")
            version, peer = struct.unpack("<II", head[4:])
            if version != WIRE_VERSION:
                raise TransportError(f"wire version {version} != {WIRE_VERSION}")
            self._peers[peer] = conn

    def _reader(self, peer: int, conn: socket.socket) -> None:
        try:
            while True:
                head = _read_exact(conn, 16)
                tag, source, length = struct.unpack("<IIQ", head)
                if source != peer:
                    raise TransportError(
                        f"frame source {source} does not match connection peer {peer}"
                    )
                payload = _read_exact(conn, length)
                with self._cond:
                    self._queues.setdefault((peer, tag), deque()).append(payload)
                    self._cond.notify_all()
        except (OSError, TransportError):
            with self._cond:
                if not self._closed:
                    self._queues.setdefault((peer, None), deque()).append(b"")
                self._cond.notify_all()

    def _send_bytes(self, dst: int, tag: int, payload: bytes) -> None:
        conn = self._peers[dst]
        header = struct.pack("<IIQ", tag, self.rank, len(payload))
        conn.sendall(header + payload)

    def _recv_bytes(self, src: int, tag: int) -> bytes:
        with self._cond:
            while True:
                q = self._queues.get((src, tag))
                if q:
                    return q.popleft()
                if self._queues.get((src, None)) and not q:
                    raise TransportError(f"connection to rank {src} closed")
                self._cond.wait(timeout=0.5)

    def barrier(self, ranks: list | None = None) -> None:
        members = sorted(ranks) if ranks is not None else list(range(self.size))
        if len(members) <= 1 or self.rank not in members:
            return
        root = members[0]
        if self.rank == root:
            for peer in members[1:]:
                self._recv_bytes(peer, TAG_BARRIER)
            for peer in members[1:]:
                self._send_bytes(peer, TAG_BARRIER, b"")
        else:
            self._send_bytes(root, TAG_BARRIER, b"")
            self._recv_bytes(root, TAG_BARRIER)

    def close(self) -> None:
        self._closed = True
        for conn in self._peers.values():
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()


def _dial(addr) -> socket.socket:
    import time

    deadline = time.monotonic() + _CONNECT_DEADLINE
    last = None
    while time.monotonic() < deadline:
        try:
            conn = socket.create_connection(addr, timeout=2.0)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return conn
        except OSError as err:
            last = err
            time.sleep(0.05)
    raise TransportError(f"could not connect to {addr}: {last}")


def _read_exact(conn: socket.socket, count: int) -> bytes:
    chunks = []
    got = 0
    while got < count:
        chunk = conn.recv(min(count - got, 1 << 20))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def socket_transport_from_env() -> SocketTransport:
    """Bootstrap a socket transport from HIFSOLVER_* environment variables."""
    rank = int(os.environ["HIFSOLVER_RANK"])
    roster = load_roster(os.environ["HIFSOLVER_ROSTER"])
    fd = os.environ.get("HIFSOLVER_LISTEN_FD")
    return SocketTransport(rank, roster, listen_fd=int(fd) if fd else None)
