"""Tree-structured collectives over p workers.

Workers form a ``fanout``-ary tree (heap numbering relative to the root).
Reductions are deterministic: a node adds its own contribution first and
then its children's subtree sums in ascending worker id, so results are
bit-identical across runs and transports and can be reproduced serially by
:func:`pinned_sum`.

Two transports share one collective implementation: :class:`LocalHub`
(threads in one process, used by tests) and :class:`TcpTransport` (one
socket per tree edge). Both carry the same binary frames:

    magic "ART1" | op u8 | round id u64 LE | payload length u64 LE | payload
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"ART1"
HEADER = struct.Struct("<4sBQQ")
DEFAULT_TIMEOUT = 600.0


class Op(IntEnum):
    BROADCAST = 1
    REDUCE = 2
    GATHER = 3
    BARRIER = 4
    SHUTDOWN = 5


class ProtocolError(RuntimeError):
    pass


class TransportError(RuntimeError):
    pass


class Aborted(TransportError):
    """Raised in a worker whose job was aborted by a failure elsewhere."""


# -- topology -----------------------------------------------------------------

@dataclass(frozen=True)
class TreeTopology:
    p: int
    fanout: int = 2
    root: int = 0
    parent: dict = field(init=False, repr=False)
    children: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.p < 1 or self.fanout < 1 or not 0 <= self.root < self.p:
            raise ValueError(f"bad topology p={self.p} fanout={self.fanout} root={self.root}")
        parent, children = {}, {w: [] for w in range(self.p)}
        for w in range(self.p):
            pos = (w - self.root) % self.p
            if pos == 0:
                parent[w] = None
                continue
            par = ((pos - 1) // self.fanout + self.root) % self.p
            parent[w] = par
            children[par].append(w)
        for w in children:
            children[w] = sorted(children[w])
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "children", children)

    def edges(self):
        return [(c, p) for c, p in self.parent.items() if p is not None]

    def subtree(self, w: int) -> list[int]:
        out = [w]
        for c in self.children[w]:
            out.extend(self.subtree(c))
        return out


def pinned_sum(vectors: Sequence[np.ndarray], topo: TreeTopology) -> np.ndarray:
    """Serial sum in the exact order the tree reduction uses."""

    def subtree_sum(w):
        acc = np.array(vectors[w], dtype=np.float64, copy=True)
        for c in topo.children[w]:
            acc += subtree_sum(c)
        return acc

    if len(vectors) != topo.p:
        raise ValueError("one vector per worker required")
    return subtree_sum(topo.root)


# -- framing ------------------------------------------------------------------

def encode_frame(op: int, round_id: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(MAGIC, int(op), round_id, len(payload)) + payload


def decode_header(raw: bytes) -> tuple[Op, int, int]:
    if len(raw) != HEADER.size:
        raise ProtocolError(f"short frame header ({len(raw)} bytes)")
    magic, op, round_id, length = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    try:
        op = Op(op)
    except ValueError:
        raise ProtocolError(f"unknown op code {op}") from None
    return op, round_id, length


def decode_frame(frame: bytes) -> tuple[Op, int, bytes]:
    op, round_id, length = decode_header(frame[: HEADER.size])
    payload = frame[HEADER.size:]
    if len(payload) != length:
        raise ProtocolError(f"payload length {len(payload)} != header {length}")
    return op, round_id, payload


def pack_vector(v) -> bytes:
    return np.ascontiguousarray(v, dtype="<f8").tobytes()


def unpack_vector(b: bytes) -> np.ndarray:
    if len(b) % 8:
        raise ProtocolError("float64 payload length not a multiple of 8")
    return np.frombuffer(b, dtype="<f8").astype(np.float64)


def _pack_items(items: Sequence[tuple[int, bytes]]) -> bytes:
    out = [struct.pack("<I", len(items))]
    for rank, blob in items:
        out.append(struct.pack("<IQ", rank, len(blob)))
        out.append(blob)
    return b"".join(out)


def _unpack_items(b: bytes) -> list[tuple[int, bytes]]:
    (count,), pos = struct.unpack_from("<I", b), 4
    items = []
    for _ in range(count):
        rank, n = struct.unpack_from("<IQ", b, pos)
        pos += 12
        items.append((rank, b[pos:pos + n]))
        pos += n
    return items


# -- transports ---------------------------------------------------------------

class LocalHub:
    """Point-to-point queues for workers that are threads of one process."""

    def __init__(self, p: int, timeout: float = DEFAULT_TIMEOUT):
        self.p = p
        self.timeout = timeout
        self.abort = threading.Event()
        self._queues = {(s, d): queue.Queue() for s in range(p) for d in range(p) if s != d}

    def endpoint(self, rank: int) -> "LocalTransport":
        return LocalTransport(self, rank)


class LocalTransport:
    def __init__(self, hub: LocalHub, rank: int):
        self.hub = hub
        self.rank = rank

    def send(self, dst: int, frame: bytes) -> None:
        if self.hub.abort.is_set():
            raise Aborted(f"worker {self.rank}: job aborted")
        self.hub._queues[(self.rank, dst)].put(frame)

    def recv(self, src: int) -> bytes:
        q = self.hub._queues[(src, self.rank)]
        deadline = time.monotonic() + self.hub.timeout
        while True:
            if self.hub.abort.is_set():
                raise Aborted(f"worker {self.rank}: job aborted")
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise TransportError(
                        f"worker {self.rank}: timed out waiting for worker {src}"
                    ) from None

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf.extend(chunk)
    return bytes(buf)


def parse_hosts(text: str) -> list[tuple[str, int]]:
    """``host:port`` per line, one per worker in rank order; ``#`` comments allowed."""
    hosts = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            host, _, port = line.rpartition(":")
            hosts.append((host or "127.0.0.1", int(port)))
    return hosts


class TcpTransport:
    """One TCP connection per tree edge; children dial their parent.

    ``listener`` may be a socket already bound to ``hosts[rank]`` (used to
    grab free ports before starting workers).
    """

    def __init__(self, rank: int, hosts: Sequence[tuple[str, int]], topo: TreeTopology,
                 timeout: float = DEFAULT_TIMEOUT, listener: socket.socket | None = None):
        self.rank = rank
        self.timeout = timeout
        self.socks: dict[int, socket.socket] = {}
        kids = topo.children[rank]
        if kids and listener is None:
            listener = socket.create_server(hosts[rank], reuse_port=False)
        par = topo.parent[rank]
        try:
            if par is not None:
                self.socks[par] = self._dial(par, hosts[par])
            if kids:
                listener.settimeout(timeout)
                while len(self.socks) < len(kids) + (par is not None):
                    try:
                        conn, _ = listener.accept()
                    except socket.timeout:
                        missing = sorted(set(kids) - set(self.socks))
                        raise TransportError(
                            f"worker {rank}: children {missing} never connected"
                        ) from None
                    conn.settimeout(timeout)
                    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    (peer,) = struct.unpack("<I", _recv_exact(conn, 4))
                    if peer not in kids:
                        conn.close()
                        raise ProtocolError(f"worker {rank}: unexpected peer {peer}")
                    self.socks[peer] = conn
        finally:
            if listener is not None:
                listener.close()

    def _dial(self, peer: int, addr) -> socket.socket:
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                s = socket.create_connection(addr, timeout=self.timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportError(
                        f"worker {self.rank}: cannot reach parent {peer} at {addr}"
                    ) from None
                time.sleep(0.05)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.sendall(struct.pack("<I", self.rank))
        return s

    def send(self, dst: int, frame: bytes) -> None:
        try:
            self.socks[dst].sendall(frame)
        except (OSError, KeyError) as exc:
            raise TransportError(f"edge {self.rank}->{dst} broken: {exc}") from exc

    def recv(self, src: int) -> bytes:
        try:
            sock = self.socks[src]
            head = _recv_exact(sock, HEADER.size)
            _, _, length = decode_header(head)
            return head + _recv_exact(sock, length)
        except socket.timeout:
            raise TransportError(f"worker {self.rank}: timed out waiting for worker {src}") from None
        except (OSError, KeyError) as exc:
            raise TransportError(f"edge {src}->{self.rank} broken: {exc}") from exc

    def close(self) -> None:
        for s in self.socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                s.close()
            except OSError:
                pass
        self.socks.clear()


# -- collectives --------------------------------------------------------------

class Communicator:
    """Collective operations for one worker.

    Every worker must issue the same sequence of collective calls; each call
    is one round and frames carry the round id, which receivers check.
    """

    def __init__(self, rank: int, topo: TreeTopology, transport):
        self.rank = rank
        self.topo = topo
        self.transport = transport
        self.round = 0
        self.counters = {op: 0 for op in ("broadcast", "reduce", "allreduce", "gather", "barrier")}
        self.bytes_sent = 0
        self.log: list | None = None

    @property
    def p(self) -> int:
        return self.topo.p

    @property
    def is_root(self) -> bool:
        return self.rank == self.topo.root

    def _send(self, dst, op, payload=b""):
        frame = encode_frame(op, self.round, payload)
        self.bytes_sent += len(frame)
        self.transport.send(dst, frame)

    def _recv(self, src, op) -> bytes:
        got, round_id, payload = decode_frame(self.transport.recv(src))
        if got != op:
            raise ProtocolError(f"worker {self.rank}: expected {op.name} from {src}, got {got.name}")
        if round_id != self.round:
            raise ProtocolError(
                f"worker {self.rank}: round mismatch from {src} ({round_id} != {self.round})"
            )
        return payload

    def _down(self, op, payload: bytes | None) -> bytes:
        par = self.topo.parent[self.rank]
        if par is not None:
            payload = self._recv(par, op)
        for c in self.topo.children[self.rank]:
            self._send(c, op, payload)
        return payload

    def broadcast(self, value: bytes | None = None, root: int | None = None) -> bytes:
        """Send ``value`` from the root to every worker; returns the bytes everywhere."""
        if root is not None and root != self.topo.root:
            raise ValueError(f"collectives are rooted at {self.topo.root}, not {root}")
        self.round += 1
        self.counters["broadcast"] += 1
        if self.is_root and value is None:
            raise ValueError("root must supply a value to broadcast")
        return self._down(Op.BROADCAST, bytes(value) if self.is_root else None)

    def broadcast_vector(self, v=None) -> np.ndarray:
        return unpack_vector(self.broadcast(pack_vector(v) if self.is_root else None))

    def _reduce(self, local) -> np.ndarray:
        acc = np.array(local, dtype=np.float64, copy=True).ravel()
        for c in self.topo.children[self.rank]:
            child = unpack_vector(self._recv(c, Op.REDUCE))
            if child.shape != acc.shape:
                raise ProtocolError(
                    f"worker {self.rank}: length mismatch from worker {c} "
                    f"({child.size} != {acc.size})"
                )
            acc += child
        par = self.topo.parent[self.rank]
        if par is not None:
            self._send(par, Op.REDUCE, pack_vector(acc))
        return acc

    def reduce_sum(self, local) -> np.ndarray | None:
        """Tree sum delivered to the root; other workers get ``None``."""
        self.round += 1
        self.counters["reduce"] += 1
        acc = self._reduce(local)
        if self.log is not None:
            self.log.append(("reduce", self.round, np.array(local, dtype=np.float64), acc.copy()))
        return acc if self.is_root else None

    def allreduce_sum(self, local) -> np.ndarray:
        """Tree sum delivered to every worker (reduce up, broadcast down)."""
        self.round += 1
        self.counters["allreduce"] += 1
        acc = self._reduce(local)
        out = unpack_vector(self._down(Op.BROADCAST, pack_vector(acc) if self.is_root else None))
        if self.log is not None:
            self.log.append(("allreduce", self.round, np.array(local, dtype=np.float64), out.copy()))
        return out

    def gather(self, value: bytes) -> list[bytes] | None:
        """Collect one byte string per worker at the root, in rank order."""
        self.round += 1
        self.counters["gather"] += 1
        items = [(self.rank, bytes(value))]
        for c in self.topo.children[self.rank]:
            items.extend(_unpack_items(self._recv(c, Op.GATHER)))
        par = self.topo.parent[self.rank]
        if par is not None:
            self._send(par, Op.GATHER, _pack_items(items))
            return None
        return [blob for _, blob in sorted(items)]

    def barrier(self) -> None:
        self.round += 1
        self.counters["barrier"] += 1
        for c in self.topo.children[self.rank]:
            self._recv(c, Op.BARRIER)
        par = self.topo.parent[self.rank]
        if par is not None:
            self._send(par, Op.BARRIER)
        self._down(Op.BARRIER, b"")

    def shutdown(self) -> None:
        """Propagate SHUTDOWN down the tree and close the transport."""
        self.round += 1
        try:
            self._down(Op.SHUTDOWN, b"")
        finally:
            self.transport.close()


# -- running p workers --------------------------------------------------------

class LocalCluster:
    """Run an SPMD function on ``p`` threads connected by a :class:`LocalHub`.

    ``fn(comm, *args)`` runs once per worker; results come back in rank
    order. If any worker raises, the others are aborted and the first
    original exception is re-raised.
    """

    def __init__(self, p: int, fanout: int = 2, timeout: float = DEFAULT_TIMEOUT,
                 record: bool = False):
        self.topo = TreeTopology(p, fanout)
        self.timeout = timeout
        self.record = record
        self.comms: list[Communicator] = []

    def run(self, fn: Callable, *args, **kwargs) -> list:
        hub = LocalHub(self.topo.p, self.timeout)
        self.comms = [Communicator(r, self.topo, hub.endpoint(r)) for r in range(self.topo.p)]
        if self.record:
            for c in self.comms:
                c.log = []
        return _run_threads(self.comms, hub.abort, fn, args, kwargs)


class TcpThreadCluster(LocalCluster):
    """Same as :class:`LocalCluster` but every edge is a loopback TCP socket."""

    def run(self, fn: Callable, *args, **kwargs) -> list:
        listeners = [socket.create_server(("127.0.0.1", 0)) for _ in range(self.topo.p)]
        hosts = [s.getsockname()[:2] for s in listeners]
        abort = threading.Event()
        transports: list = [None] * self.topo.p
        errors: list = []

        def connect(r):
            try:
                transports[r] = TcpTransport(r, hosts, self.topo, self.timeout, listeners[r])
            except BaseException as exc:  # noqa: BLE001
                errors.append(exc)

        threads = [threading.Thread(target=connect, args=(r,)) for r in range(self.topo.p)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        self.comms = [Communicator(r, self.topo, transports[r]) for r in range(self.topo.p)]
        if self.record:
            for c in self.comms:
                c.log = []
        try:
            return _run_threads(self.comms, abort, fn, args, kwargs)
        finally:
            for t in transports:
                t.close()


def _run_threads(comms, abort: threading.Event, fn, args, kwargs) -> list:
    results: list = [None] * len(comms)
    failures: list = []

    def body(comm):
        try:
            results[comm.rank] = fn(comm, *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001
            secondary = isinstance(exc, TransportError) or isinstance(exc.__cause__, TransportError)
            failures.append((secondary, comm.rank, exc))
            abort.set()
            # sockets do not watch the abort flag; closing them unblocks peers
            comm.transport.close()

    threads = [threading.Thread(target=body, args=(c,), name=f"worker-{c.rank}", daemon=True)
               for c in comms]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        # stable: the first worker to fail (not one aborted because of it) wins
        failures.sort(key=lambda f: f[0])
        raise failures[0][2]
    return results


# -- communication cost model -------------------------------------------------

@dataclass(frozen=True)
class CommCostModel:
    """Per-call cost ``latency_per_call + per_byte_cost * bytes_per_call`` (seconds)."""

    latency_per_call: float
    per_byte_cost: float = 0.0
    bytes_per_call: float = 0.0

    def __post_init__(self):
        if min(self.latency_per_call, self.per_byte_cost, self.bytes_per_call) < 0:
            raise ValueError("cost model parameters must be non-negative")


def estimate_comm_cost(n_iter: int, calls_per_iter: int, model: CommCostModel) -> float:
    """Total step-4 communication time: calls_per_iter * N * (C + D*B)."""
    c, d, b = model.latency_per_call, model.per_byte_cost, model.bytes_per_call
    return calls_per_iter * n_iter * (c + d * b)
