import random
import socket
import threading
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from storagewin.errors import (BadMagic, BadVersion, ConnectFailed, RankCollision, Truncated,
                               Unsupported)
from storagewin.fabric import (Frame, Opcode, create_group, create_local_groups, decode_frame,
                               decode_reply, encode_frame, encode_reply, run_local, run_ranks,
                               socket_groups_inprocess)
from storagewin.fabric import wire
from storagewin.fabric.group import (Collector, SocketTransport, bind_listener,
                                     create_socket_group)
from storagewin.locks import LockMode
from storagewin.window import allocate, free

from golden_frames import REPLIES, REQUESTS, h


@pytest.mark.parametrize("name,frame,hexstr", REQUESTS, ids=[r[0] for r in REQUESTS])
def test_golden_request(name, frame, hexstr):
    assert Opcode[name] == frame.opcode
    assert encode_frame(frame) == h(hexstr)
    assert decode_frame(h(hexstr)) == frame


@pytest.mark.parametrize("name,status,payload,hexstr", REPLIES, ids=[r[0] for r in REPLIES])
def test_golden_reply(name, status, payload, hexstr):
    assert encode_reply(status, payload) == h(hexstr)
    assert decode_reply(h(hexstr)) == (status, payload)


def test_put_frame_is_header_plus_payload():
    raw = encode_frame(Frame(Opcode.PUT, 1, 0, b"ab"))
    assert len(raw) == 24 + 2


@pytest.mark.parametrize("raw,err", [
    (b"XX" + bytes(22), BadMagic),
    (b"S", Truncated),
    (b"SW\x01\x01" + bytes(10), Truncated),
    (b"SW\x02\x01" + bytes(20), BadVersion),
    (b"SW\x01\x01" + bytes(16) + (10).to_bytes(4, "little") + b"12345", Truncated),
])
def test_malformed_frames(raw, err):
    with pytest.raises(err):
        decode_frame(raw)


def test_malformed_payload_helpers():
    with pytest.raises(Truncated):
        wire.unpack_chunks(b"\x05\x00\x00\x00ab")
    with pytest.raises(Truncated):
        wire.unpack_attributes(wire.pack_chunks([b"lonely"]))
    with pytest.raises(Truncated):
        wire.unpack_barrier(b"\x01")
    with pytest.raises(Truncated):
        decode_reply(b"\x00\x05\x00\x00\x00ab")


@given(st.integers(0, 255), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
       st.binary(max_size=64))
def test_frame_roundtrip(op, wid, off, payload):
    f = Frame(op, wid, off, payload)
    assert decode_frame(encode_frame(f)) == f


@given(st.dictionaries(st.text(max_size=8), st.text(max_size=8), max_size=6))
def test_attribute_roundtrip(attrs):
    assert wire.unpack_attributes(wire.pack_attributes(attrs)) == attrs


class _Recorder:
    def __init__(self, reply=b""):
        self.sent = []
        self.reply = reply

    def call(self, frame):
        self.sent.append(encode_frame(frame))
        return self.reply


def _recording_transport(reply=b""):
    t = SocketTransport.__new__(SocketTransport)
    t.rank = 0
    rec = _Recorder(reply)
    t._conn = lambda target: rec
    return t, rec


def test_transport_emits_golden_frames():
    """Each operation of the socket transport produces the checked-in bytes."""
    golden = {name: h(x) for name, _, x in REQUESTS}
    cases = [
        ("PUT", lambda t: t.put(1, 1, 0, b"ab"), b""),
        ("GET", lambda t: t.get(1, 2, 16, 8), b""),
        ("ACC_SUM", lambda t: t.accumulate(1, 3, 8, [1, -1]), bytes(16)),
        ("FAO", lambda t: t.fetch_and_op(1, 4, 0, 5), bytes(8)),
        ("CAS", lambda t: t.compare_and_swap(1, 5, 24, 0, 7), bytes(8)),
        ("LOCK", lambda t: t.lock(1, 6, LockMode.EXCLUSIVE), b""),
        ("UNLOCK", lambda t: t.unlock(1, 6, LockMode.SHARED), b""),
        ("SYNC", lambda t: t.sync(1, 7), bytes(8)),
        ("ATTR", lambda t: t.attributes(1, 0x0102030405060708), b""),
    ]
    for name, op, reply in cases:
        t, rec = _recording_transport(reply)
        op(t)
        assert rec.sent == [golden[name]], name
    t, rec = _recording_transport(wire.pack_chunks([b"", b"hi", b""]))
    t.rank = 2
    t.contribute(3, b"hi")
    assert rec.sent == [golden["BARRIER"]]


def test_unknown_opcode_keeps_connection():
    groups = socket_groups_inprocess(2)
    try:
        ws = run_ranks(groups, lambda g: allocate(g, 16, 8))
        tr = groups[0].transport
        with pytest.raises(Unsupported):
            tr.request(1, 99, ws[1].window_id)
        assert tr.get(1, ws[1].window_id, 0, 4) == bytes(4)
        run_ranks(groups, lambda g: free(ws[g.my_rank]))
    finally:
        for g in groups:
            g.close()


def test_unknown_window_reported_as_error():
    groups = socket_groups_inprocess(2)
    try:
        from storagewin.errors import UnknownWindow
        with pytest.raises(UnknownWindow):
            groups[0].transport.get(1, 12345, 0, 1)
    finally:
        for g in groups:
            g.close()


def test_remote_cas_race_single_winner():
    groups = socket_groups_inprocess(3)

    def body(g):
        w = allocate(g, 8, 8)
        wins = 0
        for _ in range(20):
            g.barrier()
            if g.my_rank:
                with w.epoch(0):
                    wins += w.compare_and_swap(0, 0, 0, g.my_rank) == 0
            g.barrier()
            if g.my_rank == 0:
                w.store(0, bytes(8))
        g.barrier()
        free(w)
        return wins

    try:
        assert sum(run_ranks(groups, body)) == 20
    finally:
        for g in groups:
            g.close()


def test_barrier_single_rank_and_local_groups():
    g, = create_local_groups(1)
    g.barrier()
    groups = create_group(4)
    assert [x.my_rank for x in groups] == [0, 1, 2, 3]
    assert {x.n_ranks for x in groups} == {4}


@pytest.mark.parametrize("kind", ["local", "socket"])
def test_barrier_stress_sequence_tagged(kind):
    n, rounds = 4, 30
    groups = create_local_groups(n) if kind == "local" else socket_groups_inprocess(n)
    arrived = [[0] * rounds for _ in range(n)]

    def body(g):
        rng = random.Random(g.my_rank)
        out = []
        for r in range(rounds):
            if rng.random() < 0.2:
                time.sleep(rng.random() * 0.003)
            arrived[g.my_rank][r] = 1
            got = g.allgather(f"{g.my_rank}:{r}".encode())
            # everyone arrived at round r before anyone left it
            assert all(arrived[x][r] for x in range(n))
            out.append(got)
        return out

    try:
        res = run_ranks(groups, body)
    finally:
        for g in groups:
            g.close()
    for per_rank in res:
        for r, got in enumerate(per_rank):
            assert got == [f"{x}:{r}".encode() for x in range(n)]


def test_barrier_waits_for_late_rank():
    order = []

    def body(g):
        if g.my_rank == 3:
            time.sleep(0.1)
            order.append("late")
        g.barrier()
        order.append(g.my_rank)

    run_local(4, body)
    assert order[0] == "late"


def test_connect_failed_when_peer_absent():
    lst = bind_listener(("127.0.0.1", 0))
    dead = socket.socket()
    dead.bind(("127.0.0.1", 0))
    dead_port = dead.getsockname()[1]
    dead.close()
    addrs = [lst.getsockname(), ("127.0.0.1", dead_port)]
    t0 = time.monotonic()
    with pytest.raises(ConnectFailed):
        create_socket_group(0, addrs, lst, timeout=0.5)
    assert time.monotonic() - t0 < 5


def test_rank_collision_detected():
    c = Collector()
    res = {}

    def first():
        try:
            c.contribute(0, 0, b"a", 2, timeout=2)
        except Exception as e:  # collector aborts the round
            res["first"] = e

    t = threading.Thread(target=first)
    t.start()
    time.sleep(0.05)
    with pytest.raises(RankCollision):
        c.contribute(0, 0, b"b", 2, timeout=2)
    c.abort("test over")
    t.join()
