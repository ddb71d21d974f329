import os
import subprocess
import sys
import threading
from fractions import Fraction

import numpy as np
import pytest

from storagewin.apps import (RECORD_SIZE, DhtConfig, InsertOutcome, ParticleSet, checkpoint,
                             dht_checkpoint, dht_create, dht_fill, dht_free, dht_insert,
                             dht_lookup, generate_particles, hacc_checkpoint, hacc_restart,
                             hacc_window, local_items, owner, reference_checkpoint,
                             reference_map, swap_checkpoint)
from storagewin.apps.dht import (ELEMENT_SIZE, fill_keys, load_table_files, lv_slot,
                                 table_files, value_for)
from storagewin.apps.hacc import RECORD_DTYPE, reference_restart
from storagewin.errors import ShortFile, TableFull
from storagewin.fabric import run_local
from storagewin.hints import AllocationHints, AllocType
from storagewin.locks import LockMode
from storagewin.window import allocate, free

import crash_helper
from oracles import pack_particles

HERE = os.path.dirname(__file__)


def storage(path, **kw):
    return AllocationHints(AllocType.STORAGE, path, **kw)


def merged_items(results):
    out = {}
    for r in results:
        out.update(r)
    return out


# -- DHT -----------------------------------------------------------------------------

def test_paper_table_size():
    cfg = DhtConfig(20_000_000, 4)
    assert cfg.capacity(8) == 8 * 5 * 20_000_000
    assert round(cfg.image_bytes(8) / 2**30, 2) == 11.92


def test_owner_is_deterministic_and_single_rank():
    assert {owner(k, 1) for k in range(1, 500)} == {0}
    assert owner(123456789, 8) == owner(123456789, 8)


def test_owner_distribution_within_two_percent():
    rng = np.random.default_rng(1)
    keys = rng.integers(1, 2**63 - 1, 1_000_000, dtype=np.int64).tolist()
    counts = np.bincount([owner(k, 8) for k in keys], minlength=8)
    assert np.all(np.abs(counts - 125_000) <= 0.02 * 125_000)


def _colliding_keys(n_ranks, lv, want=2):
    """Keys sharing one owner and one LV slot."""
    seen = {}
    k = 1
    while True:
        slot = (owner(k, n_ranks), lv_slot(k, n_ranks, lv))
        seen.setdefault(slot, []).append(k)
        if len(seen[slot]) == want:
            return seen[slot]
        k += 1


def test_insert_lookup_collision_and_update():
    a, b = _colliding_keys(2, 16)

    def body(g):
        t = dht_create(g, DhtConfig(16, 2))
        out = None
        if g.my_rank == 0:
            assert dht_lookup(t, a) is None
            assert dht_insert(t, a, 11) is InsertOutcome.NEW_SLOT
            assert dht_insert(t, b, 22) is InsertOutcome.HEAP_SLOT
            assert dht_insert(t, b, 23) is InsertOutcome.UPDATED
            assert dht_insert(t, a, 12) is InsertOutcome.UPDATED
            out = (dht_lookup(t, a), dht_lookup(t, b), dht_lookup(t, a ^ b ^ 1 or 5))
        g.barrier()
        dht_free(t)
        return out

    assert run_local(2, body)[0] == (12, 23, None)


def test_zero_key_rejected():
    def body(g):
        t = dht_create(g, DhtConfig(4, 1))
        with pytest.raises(ValueError):
            dht_insert(t, 0, 1)
        assert dht_lookup(t, 0) is None
        dht_free(t)

    run_local(1, body)


def test_no_heap_means_collisions_are_fatal():
    a, b = _colliding_keys(1, 8)

    def body(g):
        t = dht_create(g, DhtConfig(8, 0))
        assert t.heap is None
        dht_insert(t, a, 1)
        with pytest.raises(TableFull):
            dht_insert(t, b, 2)
        st = dht_fill(t, 3.0)
        dht_free(t)
        return st

    st = run_local(1, body)[0]
    assert st.table_full > 0 and st.inserted <= 8


def test_full_heap_raises_table_full():
    keys = _colliding_keys(1, 2, want=4)

    def body(g):
        t = dht_create(g, DhtConfig(2, 1))
        outs = []
        for k in keys[:3]:
            outs.append(dht_insert(t, k, k))
        with pytest.raises(TableFull):
            dht_insert(t, keys[3], 0)
        dht_free(t)
        return outs

    assert run_local(1, body)[0] == [InsertOutcome.NEW_SLOT, InsertOutcome.HEAP_SLOT,
                                     InsertOutcome.HEAP_SLOT]


def test_capacity_law_under_overfill():
    cfg = DhtConfig(50, 1, 3.0, seed=4)

    def body(g):
        t = dht_create(g, cfg)
        st = dht_fill(t)
        items = local_items(t)
        dht_free(t)
        return st, items

    res = run_local(3, body)
    accepted = sum(st.inserted for st, _ in res)
    assert accepted <= cfg.capacity(3)
    assert sum(len(i) for _, i in res) == accepted
    assert sum(st.table_full for st, _ in res) > 0
    ref = reference_map(cfg, 3)
    assert all(ref[k] == v for _, i in res for k, v in i.items())


def test_fill_examples():
    for frac, expect in ((0.0, 0), (0.8, 3200)):
        cfg = DhtConfig(1000, 4, frac, seed=9)

        def body(g):
            t = dht_create(g, cfg)
            st = dht_fill(t)
            items = local_items(t)
            dht_free(t)
            return st, items

        res = run_local(4, body)
        assert sum(st.attempted for st, _ in res) == expect
        assert sum(st.inserted for st, _ in res) == expect
        assert merged_items(i for _, i in res) == reference_map(cfg, 4)


def test_concurrent_distinct_inserts_match_sequential_map():
    n, per = 4, 2500

    def body(g):
        t = dht_create(g, DhtConfig(4000, 4))
        keys = [k * n + g.my_rank + 1 for k in range(per)]
        g.barrier()
        for k in keys:
            dht_insert(t, k, -k)
        g.barrier()
        items = local_items(t)
        missing = [k for k in keys[:200] if dht_lookup(t, k) != -k]
        g.barrier()
        dht_free(t)
        return items, missing

    res = run_local(n, body)
    assert all(not m for _, m in res)
    ref = {k: -k for k in range(1, n * per + 1)}
    assert merged_items(i for i, _ in res) == ref


def test_occupied_lv_slots_hash_to_owner():
    cfg = DhtConfig(300, 4, 0.8, seed=2)

    def body(g):
        t = dht_create(g, cfg)
        dht_fill(t)
        arr = np.frombuffer(t.lv.memory, dtype="<i8").reshape(-1, 2)
        bad = [(s, int(k)) for s, (k, _) in enumerate(arr.tolist())
               if k and (owner(k, g.n_ranks) != g.my_rank or lv_slot(k, g.n_ranks, 300) != s)]
        g.barrier()
        dht_free(t)
        return bad

    assert run_local(3, body) == [[], [], []]


def test_combined_dht_windows_split(tmp_path):
    cfg = DhtConfig(1024, 4, 0.5, storage(str(tmp_path / "c"), factor=Fraction(1, 2)))

    def body(g):
        t = dht_create(g, cfg)
        dht_fill(t)
        splits = [(w.layout.memory_bytes, w.layout.storage_bytes) for w in t.windows]
        items = local_items(t)
        dht_free(t)
        return splits, items

    res = run_local(2, body)
    lv = 1024 * ELEMENT_SIZE
    assert res[0][0] == [(lv // 2, lv // 2), (2 * lv, 2 * lv)]
    assert merged_items(i for _, i in res) == reference_map(cfg, 2)


def test_memory_checkpoint_flushes_nothing():
    def body(g):
        t = dht_create(g, DhtConfig(100, 1))
        dht_fill(t)
        r = dht_checkpoint(t).bytes_flushed
        dht_free(t)
        return r

    assert run_local(2, body) == [0, 0]


def test_storage_checkpoint_then_second_is_empty(tmp_path):
    cfg = DhtConfig(500, 2, 0.8, storage(str(tmp_path / "s")), seed=1)

    def body(g):
        t = dht_create(g, cfg)
        dht_fill(t)
        first = dht_checkpoint(t).bytes_flushed
        second = dht_checkpoint(t).bytes_flushed
        files = table_files(t)
        g.barrier()
        dht_free(t)
        return first, second, files

    res = run_local(2, body)
    assert all(f > 0 and s == 0 for f, s, _ in res)
    assert load_table_files(p for _, _, fs in res for p in fs) == reference_map(cfg, 2)


def test_insert_never_straddles_checkpoint():
    """Every insert is entirely before or after an exclusive section."""
    events = []
    lock = threading.Lock()

    def note(e):
        with lock:
            events.append(e)

    def body(g):
        t = dht_create(g, DhtConfig(64, 4))
        g.barrier()
        if g.my_rank == 0:
            for _ in range(30):
                for w in t.windows:
                    w.lock(0, LockMode.EXCLUSIVE)
                note("enter")
                for w in t.windows:
                    w.win_sync()
                note("leave")
                for w in t.windows:
                    w.unlock(0)
        else:
            k = 0
            while k < 120:
                k += 1
                key = next(x for x in range(k * 1000, k * 1000 + 1000) if owner(x, 2) == 0)
                with t.lv.epoch(0), t.heap.epoch(0):
                    note("begin")
                    dht_insert(t, key, 1)
                    note("end")
        g.barrier()
        dht_free(t)

    run_local(2, body)
    inside_ckpt = inside_insert = False
    for e in events:
        if e == "enter":
            assert not inside_insert
            inside_ckpt = True
        elif e == "leave":
            inside_ckpt = False
        elif e == "begin":
            assert not inside_ckpt
            inside_insert = True
        else:
            inside_insert = False


def test_checkpoint_survives_kill(tmp_path):
    seed = 17
    out = subprocess.run([sys.executable, os.path.join(HERE, "crash_helper.py"), "dht",
                          str(tmp_path), str(seed)], capture_output=True, text=True, timeout=120)
    assert out.returncode == 0, out.stderr
    cfg = crash_helper.dht_config(str(tmp_path), seed)
    paths = [str(tmp_path / f"t.{part}.{r}") for r in range(4) for part in ("lv", "heap")]
    assert load_table_files(paths) == reference_map(cfg, 4)


def test_fill_keys_are_seeded_and_nonzero():
    a = fill_keys(3, 1, 500)
    assert a == fill_keys(3, 1, 500) and 0 not in a
    assert a != fill_keys(3, 2, 500)
    assert value_for(a[0]) == value_for(a[0])


# -- HACC --------------------------------------------------------------------------

def test_record_layout_is_packed():
    assert RECORD_SIZE == 38
    assert RECORD_DTYPE.names == ("xx", "yy", "zz", "vx", "vy", "vz", "phi", "pid", "mask")


def test_three_particles_byte_exact(tmp_path):
    path = str(tmp_path / "h")
    rows = [(1.0, 2.0, 3.0, -1.5, 0.25, 8.0, 9.5, 7, 3),
            (0.0, -0.0, 1e-3, 2.0, 3.0, 4.0, 5.0, -2, 65535),
            (100.0, 200.0, 300.0, 0.0, 0.0, 0.0, 1.0, 2**62, 0)]
    p = ParticleSet(np.array(rows, dtype=RECORD_DTYPE))

    def body(g):
        w = hacc_window(g, path, p.count)
        hacc_checkpoint(g, p, w)
        free(w)

    run_local(1, body)
    assert open(path, "rb").read() == pack_particles(rows)


def test_zero_particles_leave_file_alone(tmp_path):
    path = tmp_path / "h0"
    path.write_bytes(b"previous")

    def body(g):
        w = hacc_window(g, str(path), 0)
        assert hacc_checkpoint(g, ParticleSet(np.zeros(0, RECORD_DTYPE)), w) == 0
        q = hacc_restart(g, w)
        free(w)
        return q.count

    assert run_local(2, body) == [0, 0]
    assert path.read_bytes() == b"previous"


def test_four_ranks_disjoint_blocks_and_roundtrip(tmp_path):
    path, count = str(tmp_path / "h4"), 500

    def body(g):
        p = generate_particles(count, 3, g.my_rank)
        w = hacc_window(g, path, count)
        hacc_checkpoint(g, p, w)
        free(w)
        w = hacc_window(g, path, count, restart=True)
        q = hacc_restart(g, w)
        free(w)
        return p, q

    res = run_local(4, body)
    data = open(path, "rb").read()
    assert len(data) == 4 * count * RECORD_SIZE
    for r, (p, q) in enumerate(res):
        assert p == q
        assert data[r * count * RECORD_SIZE:(r + 1) * count * RECORD_SIZE] == p.tobytes()
        assert set(p.records["pid"]) == set(range(r * count, (r + 1) * count))


def test_restart_from_plain_file_reference(tmp_path):
    path, count = str(tmp_path / "ref"), 100
    ps = [generate_particles(count, 8, r) for r in range(2)]
    for r, p in enumerate(ps):
        reference_checkpoint(path, r, p)

    def body(g):
        w = hacc_window(g, path, count, restart=True)
        q = hacc_restart(g, w)
        free(w)
        return q

    assert run_local(2, body) == ps
    assert reference_restart(path, 1, count) == ps[1]


def test_truncated_file_raises_short_file(tmp_path):
    path, count = tmp_path / "short", 10
    path.write_bytes(bytes(2 * count * RECORD_SIZE - 1))

    def body(g):
        with pytest.raises(ShortFile):
            hacc_window(g, str(path), count, restart=True)
        # mapping without the pre-check still catches it from the file length
        w = hacc_window(g, str(path), count)
        try:
            if g.my_rank == 1:
                with pytest.raises(ShortFile):
                    hacc_restart(g, w)
            else:
                assert hacc_restart(g, w).count == count
        finally:
            free(w)
        return True

    assert run_local(2, body) == [True, True]


# -- swap checkpoint -----------------------------------------------------------------

def test_swap_checkpoint_alternates_files(tmp_path):
    a, b = str(tmp_path / "A"), str(tmp_path / "B")

    def body(g):
        pair = [allocate(g, 4096, 1, storage(a)), allocate(g, 4096, 1, storage(b))]
        active, seen = 0, [0]
        for epoch in range(1, 4):
            pair[active].store(0, bytes([epoch]) * 16)
            active = swap_checkpoint(pair, active)
            seen.append(active)
        idle = checkpoint(pair[active]).bytes_flushed
        for w in pair:
            free(w)
        return seen, idle

    seen, idle = run_local(1, body)[0]
    assert seen == [0, 1, 0, 1]
    assert idle == 0
    assert open(a, "rb").read(16) == bytes([3]) * 16
    assert open(b, "rb").read(16) == bytes([2]) * 16


def test_swap_rejects_bad_index():
    with pytest.raises(ValueError):
        swap_checkpoint([None, None], 2)
