import csv
import io
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from storagewin.errors import ConfigInvalid
from storagewin.fabric import run_local
from storagewin.hints import AllocationHints, AllocType
from storagewin.mstream import (CSV_COLUMNS, TIMING_COLUMNS, BenchConfig, Kernel, iteration_tag,
                                pad_order, rnd_order, run_kernel, verify_trace, visit_order,
                                write_csv)
from storagewin.window import allocate, free

KiB, MiB, GiB = 1 << 10, 1 << 20, 1 << 30


def test_paper_scale_counts():
    cfg = BenchConfig(16 * GiB, 16 * MiB, 10, Kernel.SEQ)
    trace = verify_trace(cfg)
    assert len(trace) == 1024
    assert sum(op == "R" for _, op in trace) == 512
    assert cfg.bytes_moved == 160 * GiB


def test_seq_trace_of_four():
    assert verify_trace(BenchConfig(4, 1, 1)) == [(0, "R"), (1, "W"), (2, "R"), (3, "W")]


def test_rnd_trace_is_alternating_permutation():
    t = verify_trace(BenchConfig(4, 1, 1, Kernel.RND, rng_seed=99))
    assert sorted(i for i, _ in t) == [0, 1, 2, 3]
    assert [op for _, op in t] == ["R", "W", "R", "W"]


def test_pad_matches_stride_two_formula_for_even_n():
    for n in (2, 4, 10, 64):
        assert pad_order(n) == [(k * 2) % n + (k * 2) // n for k in range(n)]


def test_pad_is_a_permutation_for_odd_n():
    # the closed formula repeats indices when n is odd; the sweep does not
    assert [(k * 2) % 3 + (k * 2) // 3 for k in range(3)] == [0, 2, 2]
    assert pad_order(3) == [0, 2, 1]


def _interleave_reference(pad, rnd):
    """Even positions take PAD's next unused index, odd ones RND's."""
    used, out = set(), []
    sources = [iter(pad), iter(rnd)]
    for pos in range(len(pad)):
        for idx in sources[pos % 2]:
            if idx not in used:
                break
        used.add(idx)
        out.append(idx)
    return out


@pytest.mark.parametrize("n,seed", [(4, 0), (16, 7), (33, 123), (64, 2**63)])
def test_mix_is_positional_interleave(n, seed):
    cfg = BenchConfig(n, 1, 3, Kernel.MIX, rng_seed=seed)
    for it in range(3):
        want = _interleave_reference(pad_order(n), rnd_order(n, seed, it))
        assert visit_order(cfg, it) == want


@given(st.integers(1, 300), st.sampled_from(list(Kernel)), st.integers(0, 2**64 - 1),
       st.integers(0, 5))
def test_every_iteration_is_a_permutation(n, kernel, seed, it):
    cfg = BenchConfig(n * 8, 8, 5, kernel, rng_seed=seed)
    t = verify_trace(cfg, it)
    assert sorted(i for i, _ in t) == list(range(n))
    assert [op for _, op in t] == ["R" if p % 2 == 0 else "W" for p in range(n)]
    assert verify_trace(cfg, it) == t


def test_seed_changes_random_orders():
    a = visit_order(BenchConfig(64, 1, 1, Kernel.RND, rng_seed=1))
    b = visit_order(BenchConfig(64, 1, 1, Kernel.RND, rng_seed=2))
    assert a != b and sorted(a) == sorted(b)


@pytest.mark.parametrize("cfg", [BenchConfig(100, 3, 1), BenchConfig(64, 8, 0),
                                 BenchConfig(0, 8, 1), BenchConfig(64, 0, 1)])
def test_invalid_configs(cfg):
    with pytest.raises(ConfigInvalid):
        cfg.validate()


class FakeClock:
    def __init__(self, step=0.25):
        self.t = 0.0
        self.step = step

    def __call__(self):
        self.t += self.step
        return self.t


def _run(cfg, clock=None):
    def body(g):
        w = allocate(g, cfg.window_size, 1, cfg.hints)
        r = run_kernel(cfg, w, clock) if clock else run_kernel(cfg, w)
        free(w)
        return r
    return run_local(1, body)[0]


def test_accounting_with_controlled_clock():
    cfg = BenchConfig(64 * KiB, 4 * KiB, 3, Kernel.PAD)
    r = _run(cfg, FakeClock())
    assert r.bytes_moved == 3 * 64 * KiB
    assert len(r.per_iteration) == 3
    assert r.elapsed == pytest.approx(sum(r.per_iteration))
    assert math.isclose(r.bandwidth * r.elapsed, r.bytes_moved, rel_tol=1e-9)
    # the last iteration also contains the timed sync
    assert r.sync_elapsed > 0 and r.per_iteration[-1] > r.per_iteration[0]


def _expected_file(cfg):
    """Last written pattern per segment, built straight from the traces."""
    S = cfg.segment_size
    image = bytearray(cfg.window_size)
    for it in range(cfg.iterations + 1):
        tag = iteration_tag(cfg.rng_seed, it)
        for idx, op in verify_trace(cfg, it):
            if op == "W":
                word = (idx ^ tag).to_bytes(8, "little")
                image[idx * S:(idx + 1) * S] = (word * (S // 8 + 1))[:S]
    return bytes(image)


@pytest.mark.parametrize("kernel", list(Kernel))
def test_storage_file_holds_last_pattern(tmp_path, kernel):
    path = str(tmp_path / "m.img")
    cfg = BenchConfig(256 * KiB, 16 * KiB, 2, kernel,
                      AllocationHints(AllocType.STORAGE, path), rng_seed=5)
    r = _run(cfg)
    assert r.bytes_flushed > 0
    assert open(path, "rb").read() == _expected_file(cfg)


def test_segment_smaller_than_a_word(tmp_path):
    path = str(tmp_path / "tiny")
    cfg = BenchConfig(64, 4, 1, Kernel.SEQ, AllocationHints(AllocType.STORAGE, path))
    _run(cfg)
    assert open(path, "rb").read() == _expected_file(cfg)


def test_csv_rows_and_determinism():
    cfg = BenchConfig(64 * KiB, 8 * KiB, 3, Kernel.RND, rng_seed=3)
    outs = []
    for _ in range(2):
        buf = io.StringIO()
        write_csv([_run(cfg)], buf)
        outs.append(list(csv.DictReader(io.StringIO(buf.getvalue()))))
    rows = outs[0]
    assert list(rows[0].keys()) == CSV_COLUMNS
    assert [r["row"] for r in rows] == ["summary"] + ["iteration"] * 3
    assert rows[0]["bytes_moved"] == str(3 * 64 * KiB)
    strip = [[{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in o] for o in outs]
    assert strip[0] == strip[1]
