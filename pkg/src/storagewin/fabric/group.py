"""Rank groups and the two transports.

Every rank owns an :class:`Endpoint` holding the target side of its
windows. The local transport calls into the target endpoint directly; the
socket transport ships the same calls as frames to the target's server,
which dispatches them onto the very same methods.
"""

from __future__ import annotations

import json
import logging
import socket
import struct
import threading
import time
from typing import Callable, Optional, Sequence

from ..errors import (ConnectFailed, FrameError, RankCollision, StorageWinError,
                      TransportFailed, Unsupported, UnknownWindow, error_for_status)
from ..locks import LockMode
from . import wire
from .wire import Frame, Opcode, Status

logger = logging.getLogger(__name__)

DEFAULT_CONNECT_TIMEOUT = 10.0


class MemoryBudget:
    """Node-wide memory accounting used to size "auto" combined windows."""

    def __init__(self, capacity: Optional[int] = None):
        self.capacity = capacity
        self.used = 0
        self.lock = threading.RLock()

    @property
    def remaining(self) -> Optional[int]:
        if self.capacity is None:
            return None
        return max(self.capacity - self.used, 0)

    def charge(self, n: int) -> None:
        with self.lock:
            self.used += n

    def refund(self, n: int) -> None:
        with self.lock:
            self.used -= n


class Collector:
    """Sequence-tagged gather point (lives on rank 0)."""

    def __init__(self):
        self._cond = threading.Condition()
        self._rounds: dict[int, dict] = {}
        self._aborted: Optional[str] = None

    def contribute(self, seq: int, rank: int, data: bytes, n_ranks: int,
                   timeout: Optional[float] = None) -> list[bytes]:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            entry = self._rounds.setdefault(seq, {"parts": {}, "left": n_ranks})
            if rank in entry["parts"]:
                raise RankCollision(f"rank {rank} entered barrier {seq} twice")
            if not 0 <= rank < n_ranks:
                raise RankCollision(f"rank {rank} outside group of {n_ranks}")
            entry["parts"][rank] = data
            self._cond.notify_all()
            while len(entry["parts"]) < n_ranks:
                if self._aborted:
                    raise TransportFailed(self._aborted)
                wait = None if deadline is None else deadline - time.monotonic()
                if wait is not None and wait <= 0:
                    raise ConnectFailed(f"barrier {seq}: only {len(entry['parts'])} of {n_ranks} ranks arrived")
                self._cond.wait(wait)
            parts = [entry["parts"][r] for r in range(n_ranks)]
            entry["left"] -= 1
            if not entry["left"]:
                del self._rounds[seq]
            return parts

    def abort(self, reason: str) -> None:
        with self._cond:
            self._aborted = reason
            self._cond.notify_all()


class Endpoint:
    """Target side of one rank: window registry plus (on rank 0) the collector."""

    def __init__(self, rank: int, n_ranks: int):
        self.rank = rank
        self.n_ranks = n_ranks
        self.windows: dict = {}
        self.collector = Collector()
        self._lock = threading.Lock()

    def register(self, window_id: int, target) -> None:
        with self._lock:
            self.windows[window_id] = target

    def unregister(self, window_id: int) -> None:
        with self._lock:
            self.windows.pop(window_id, None)

    def target(self, window_id: int):
        try:
            return self.windows[window_id]
        except KeyError:
            raise UnknownWindow(f"rank {self.rank} has no window {window_id}") from None


def serve_frame(endpoint: Endpoint, frame: Frame) -> bytes:
    """Apply one request frame to the local endpoint; returns the encoded reply."""
    try:
        op = frame.opcode
        if op not in Opcode.__members__.values():
            raise Unsupported(f"opcode {op}")
        payload = frame.payload
        if op == Opcode.BARRIER:
            rank, data = wire.unpack_barrier(payload)
            parts = endpoint.collector.contribute(frame.window_id, rank, data, endpoint.n_ranks)
            return wire.encode_reply(Status.OK, wire.pack_chunks(parts))
        t = endpoint.target(frame.window_id)
        off = frame.offset
        if op == Opcode.PUT:
            t.put(off, payload)
            out = b""
        elif op == Opcode.GET:
            out = t.get(off, wire.unpack_u64(payload))
        elif op == Opcode.ACC_SUM:
            out = wire.pack_i64s(t.accumulate(off, wire.unpack_i64s(payload)))
        elif op == Opcode.FAO:
            out = wire.pack_i64(t.fetch_and_op(off, wire.unpack_i64(payload)))
        elif op == Opcode.CAS:
            compare, new = struct.unpack("<qq", payload)
            out = wire.pack_i64(t.compare_and_swap(off, compare, new))
        elif op == Opcode.LOCK:
            t.lock_acquire(LockMode(payload[0]))
            out = b""
        elif op == Opcode.UNLOCK:
            t.lock_release(LockMode(payload[0]))
            out = b""
        elif op == Opcode.SYNC:
            out = wire.pack_u64(t.sync())
        else:  # ATTR
            out = wire.pack_attributes(t.attributes())
        return wire.encode_reply(Status.OK, out)
    except StorageWinError as e:
        return wire.encode_reply(e.status, str(e).encode())
    except (struct.error, ValueError, IndexError) as e:
        return wire.encode_reply(FrameError.status, f"malformed payload: {e}".encode())


# -- transports ---------------------------------------------------------------

class _DirectOps:
    """Typed operations against an endpoint in this process."""

    def _endpoint(self, target: int) -> Endpoint:
        raise NotImplementedError

    def _direct(self, target, wid):
        return self._endpoint(target).target(wid)

    def put(self, target, wid, off, data):
        self._direct(target, wid).put(off, data)

    def get(self, target, wid, off, n):
        return self._direct(target, wid).get(off, n)

    def accumulate(self, target, wid, off, values):
        return self._direct(target, wid).accumulate(off, values)

    def fetch_and_op(self, target, wid, off, value):
        return self._direct(target, wid).fetch_and_op(off, value)

    def compare_and_swap(self, target, wid, off, compare, new):
        return self._direct(target, wid).compare_and_swap(off, compare, new)

    def lock(self, target, wid, mode):
        self._direct(target, wid).lock_acquire(mode)

    def unlock(self, target, wid, mode):
        self._direct(target, wid).lock_release(mode)

    def sync(self, target, wid):
        return self._direct(target, wid).sync()

    def attributes(self, target, wid):
        return dict(self._direct(target, wid).attributes())


class LocalFabric:
    """Shared state for ranks that live as threads of one process."""

    def __init__(self, n_ranks: int, memory_budget: Optional[int] = None):
        self.n_ranks = n_ranks
        self.endpoints = [Endpoint(r, n_ranks) for r in range(n_ranks)]
        self.budget = MemoryBudget(memory_budget)
        self.shared: dict = {}
        self.shared_lock = threading.Lock()


class LocalTransport(_DirectOps):
    kind = "local"

    def __init__(self, fabric: LocalFabric, rank: int):
        self.fabric = fabric
        self.rank = rank

    def _endpoint(self, target):
        try:
            return self.fabric.endpoints[target]
        except IndexError:
            raise TransportFailed(f"no rank {target}") from None

    def contribute(self, seq, data, timeout=None):
        return self.fabric.endpoints[0].collector.contribute(
            seq, self.rank, data, self.fabric.n_ranks, timeout)

    def abort(self, reason):
        self.fabric.endpoints[0].collector.abort(reason)

    def close(self):
        pass


def _read_exact(reader, n: int) -> bytes:
    data = reader.read(n)
    if data is None or len(data) < n:
        raise EOFError
    return data


class _Connection:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = sock.makefile("rb")
        self.lock = threading.Lock()

    def call(self, frame: Frame) -> bytes:
        with self.lock:
            try:
                self.sock.sendall(wire.encode_frame(frame))
                head = _read_exact(self.reader, wire.REPLY_HEADER_SIZE)
                status, plen = struct.unpack("<BI", head)
                payload = _read_exact(self.reader, plen) if plen else b""
            except (OSError, EOFError) as e:
                raise TransportFailed(f"connection lost: {e!r}") from None
        if status != Status.OK:
            raise error_for_status(status, payload.decode(errors="replace"))
        return payload

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.reader.close()
        self.sock.close()


def parse_address(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = str(addr).rpartition(":")
    return host or "127.0.0.1", int(port)


class SocketTransport(_DirectOps):
    """One listening socket per rank plus one client connection per peer."""

    kind = "socket"

    def __init__(self, endpoint: Endpoint, addresses: Sequence, rank: int,
                 listener: Optional[socket.socket] = None,
                 timeout: float = DEFAULT_CONNECT_TIMEOUT):
        self.endpoint = endpoint
        self.addresses = [parse_address(a) for a in addresses]
        self.rank = rank
        self.timeout = timeout
        self._conns: dict[int, _Connection] = {}
        self._served: list[socket.socket] = []
        self._closing = False
        if listener is None:
            listener = bind_listener(self.addresses[rank])
        self.listener = listener
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True,
                                               name=f"sw-accept-{rank}")
        self._accept_thread.start()

    # server side
    def _accept_loop(self):
        while not self._closing:
            try:
                conn, _ = self.listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._served.append(conn)
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True,
                             name=f"sw-serve-{self.rank}").start()

    def _serve_conn(self, conn: socket.socket):
        reader = conn.makefile("rb")
        try:
            while True:
                head = reader.read(wire.HEADER_SIZE)
                if not head:
                    return
                try:
                    _, opcode, wid, offset, plen = wire.decode_header(head)
                except FrameError as e:
                    # the stream cannot be resynchronised after a bad header
                    conn.sendall(wire.encode_reply(e.status, str(e).encode()))
                    return
                payload = _read_exact(reader, plen) if plen else b""
                reply = serve_frame(self.endpoint, Frame(opcode, wid, offset, payload))
                conn.sendall(reply)
        except (OSError, EOFError):
            return
        finally:
            reader.close()
            conn.close()

    # client side
    def connect(self):
        deadline = time.monotonic() + self.timeout
        for peer, addr in enumerate(self.addresses):
            if peer == self.rank:
                continue
            while True:
                try:
                    sock = socket.create_connection(addr, timeout=max(deadline - time.monotonic(), 0.01))
                    break
                except OSError as e:
                    if time.monotonic() >= deadline:
                        raise ConnectFailed(f"rank {self.rank}: cannot reach rank {peer} at {addr}: {e}") from None
                    time.sleep(0.05)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns[peer] = _Connection(sock)

    def _endpoint(self, target):
        return self.endpoint

    def _conn(self, target) -> _Connection:
        try:
            return self._conns[target]
        except KeyError:
            raise TransportFailed(f"rank {self.rank} has no connection to rank {target}") from None

    def request(self, target, opcode, wid=0, offset=0, payload=b"") -> bytes:
        """Send a raw frame to ``target`` and return the reply payload."""
        return self._conn(target).call(Frame(opcode, wid, offset, payload))

    def put(self, target, wid, off, data):
        if target == self.rank:
            return super().put(target, wid, off, data)
        self.request(target, Opcode.PUT, wid, off, bytes(data))

    def get(self, target, wid, off, n):
        if target == self.rank:
            return super().get(target, wid, off, n)
        return self.request(target, Opcode.GET, wid, off, wire.pack_u64(n))

    def accumulate(self, target, wid, off, values):
        if target == self.rank:
            return super().accumulate(target, wid, off, values)
        return wire.unpack_i64s(self.request(target, Opcode.ACC_SUM, wid, off, wire.pack_i64s(values)))

    def fetch_and_op(self, target, wid, off, value):
        if target == self.rank:
            return super().fetch_and_op(target, wid, off, value)
        return wire.unpack_i64(self.request(target, Opcode.FAO, wid, off, wire.pack_i64(value)))

    def compare_and_swap(self, target, wid, off, compare, new):
        if target == self.rank:
            return super().compare_and_swap(target, wid, off, compare, new)
        payload = wire.pack_i64(compare) + wire.pack_i64(new)
        return wire.unpack_i64(self.request(target, Opcode.CAS, wid, off, payload))

    def lock(self, target, wid, mode):
        if target == self.rank:
            return super().lock(target, wid, mode)
        self.request(target, Opcode.LOCK, wid, 0, bytes([int(mode)]))

    def unlock(self, target, wid, mode):
        if target == self.rank:
            return super().unlock(target, wid, mode)
        self.request(target, Opcode.UNLOCK, wid, 0, bytes([int(mode)]))

    def sync(self, target, wid):
        if target == self.rank:
            return super().sync(target, wid)
        return wire.unpack_u64(self.request(target, Opcode.SYNC, wid))

    def attributes(self, target, wid):
        if target == self.rank:
            return super().attributes(target, wid)
        return wire.unpack_attributes(self.request(target, Opcode.ATTR, wid))

    def contribute(self, seq, data, timeout=None):
        if self.rank == 0:
            return self.endpoint.collector.contribute(seq, 0, data, self.endpoint.n_ranks, timeout)
        payload = wire.pack_barrier(self.rank, data)
        return wire.unpack_chunks(self.request(0, Opcode.BARRIER, seq, 0, payload))

    def abort(self, reason):
        self.endpoint.collector.abort(reason)

    def close(self):
        self._closing = True
        try:
            self.listener.close()
        except OSError:
            pass
        for c in self._conns.values():
            c.close()
        for s in self._served:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._conns.clear()


def bind_listener(addr) -> socket.socket:
    host, port = parse_address(addr)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(64)
    return sock


# -- groups -------------------------------------------------------------------

class RankGroup:
    def __init__(self, n_ranks: int, my_rank: int, transport, endpoint: Endpoint,
                 budget: MemoryBudget, fabric: Optional[LocalFabric] = None):
        if not 0 <= my_rank < n_ranks:
            raise ValueError(f"rank {my_rank} outside group of {n_ranks}")
        self.n_ranks = n_ranks
        self.my_rank = my_rank
        self.transport = transport
        self.endpoint = endpoint
        self.budget = budget
        self.fabric = fabric
        self._seq = 0
        self._next_window_id = 1

    @property
    def is_local(self) -> bool:
        return self.transport.kind == "local"

    def allgather(self, data: bytes = b"", timeout: Optional[float] = None) -> list[bytes]:
        seq = self._seq
        self._seq += 1
        return self.transport.contribute(seq, data, timeout)

    def allgather_obj(self, obj) -> list:
        return [json.loads(p) for p in self.allgather(json.dumps(obj).encode())]

    def barrier(self) -> None:
        self.allgather(b"")

    def propose_window_id(self) -> int:
        return self._next_window_id

    def commit_window_id(self, proposals: Sequence[int]) -> int:
        wid = max(proposals)
        self._next_window_id = wid + 1
        return wid

    def abort(self, reason: str = "peer rank failed") -> None:
        self.transport.abort(reason)

    def close(self) -> None:
        self.transport.close()

    def __repr__(self):
        return f"RankGroup(rank {self.my_rank}/{self.n_ranks}, {self.transport.kind})"


def barrier(group: RankGroup) -> None:
    group.barrier()


def create_local_groups(n_ranks: int, memory_budget: Optional[int] = None) -> list[RankGroup]:
    if n_ranks < 1:
        raise ValueError("need at least one rank")
    fabric = LocalFabric(n_ranks, memory_budget)
    return [RankGroup(n_ranks, r, LocalTransport(fabric, r), fabric.endpoints[r],
                      fabric.budget, fabric) for r in range(n_ranks)]


def create_socket_group(rank: int, addresses: Sequence, listener: Optional[socket.socket] = None,
                        timeout: float = DEFAULT_CONNECT_TIMEOUT,
                        memory_budget: Optional[int] = None) -> RankGroup:
    """Join a socket group. ``addresses`` lists every rank's listen address
    in rank order; this rank listens on ``addresses[rank]``."""
    n = len(addresses)
    endpoint = Endpoint(rank, n)
    transport = SocketTransport(endpoint, addresses, rank, listener, timeout)
    group = RankGroup(n, rank, transport, endpoint, MemoryBudget(memory_budget))
    try:
        transport.connect()
        group.allgather(b"", timeout=timeout)
    except BaseException:
        transport.close()
        raise
    return group


def create_group(n_ranks: int, transport_config=None, **kw):
    """``transport_config`` is ``None``/"local" (returns one group per rank)
    or a dict with ``rank`` and ``addresses`` (returns this rank's group)."""
    if transport_config in (None, "local"):
        return create_local_groups(n_ranks, **kw)
    cfg = dict(transport_config)
    if len(cfg["addresses"]) != n_ranks:
        raise ValueError("socket mode needs an address for every rank")
    return create_socket_group(cfg["rank"], cfg["addresses"], timeout=cfg.get("timeout", DEFAULT_CONNECT_TIMEOUT),
                               listener=cfg.get("listener"), **kw)


def run_ranks(groups: Sequence[RankGroup], fn: Callable, *args, **kwargs) -> list:
    """Run ``fn(group, *args, **kwargs)`` on one thread per group."""
    results: list = [None] * len(groups)
    errors: list = [None] * len(groups)

    def body(i, g):
        try:
            results[i] = fn(g, *args, **kwargs)
        except BaseException as e:  # noqa: BLE001 - re-raised below
            errors[i] = e
            g.abort(f"rank {g.my_rank} failed: {e!r}")

    threads = [threading.Thread(target=body, args=(i, g), name=f"rank-{g.my_rank}")
               for i, g in enumerate(groups)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for e in errors:
        if e is not None and not isinstance(e, TransportFailed):
            raise e
    for e in errors:
        if e is not None:
            raise e
    return results


def run_local(n_ranks: int, fn: Callable, *args, memory_budget: Optional[int] = None, **kwargs) -> list:
    groups = create_local_groups(n_ranks, memory_budget)
    return run_ranks(groups, fn, *args, **kwargs)


def socket_groups_inprocess(n_ranks: int, host: str = "127.0.0.1",
                            memory_budget: Optional[int] = None,
                            timeout: float = DEFAULT_CONNECT_TIMEOUT) -> list[RankGroup]:
    """Socket groups for every rank inside this process, on loopback ports."""
    listeners = [bind_listener((host, 0)) for _ in range(n_ranks)]
    addresses = [l.getsockname() for l in listeners]
    groups: list = [None] * n_ranks

    def join(r):
        groups[r] = create_socket_group(r, addresses, listeners[r], timeout, memory_budget)

    threads = [threading.Thread(target=join, args=(r,)) for r in range(n_ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if any(g is None for g in groups):
        for g in groups:
            if g is not None:
                g.close()
        raise ConnectFailed("in-process socket group did not form")
    return groups
