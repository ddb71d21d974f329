"""mSTREAM: segment-granular read/write sweeps over a window.

Each iteration issues ``M // S`` segment operations, alternating read
(even trace position) and write (odd). One cold iteration runs first and
is not timed; the storage sync happens inside the last timed iteration
and its duration is also reported on its own.

Kernel visit orders:

* ``SEQ``: 0, 1, ..., N-1.
* ``PAD``: even indices ascending, then odd indices ascending (a stride-2
  sweep that wraps once).
* ``RND``: a Fisher-Yates shuffle driven by xorshift64*, reseeded per
  iteration.
* ``MIX``: even positions take the next unused index in PAD order, odd
  positions the next unused index in RND order.
"""

from __future__ import annotations

import csv
import enum
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO

import numpy as np

from .errors import ConfigInvalid
from .hints import AllocationHints

_M64 = 0xFFFFFFFFFFFFFFFF

READ = "R"
WRITE = "W"


class Kernel(enum.Enum):
    SEQ = "SEQ"
    PAD = "PAD"
    RND = "RND"
    MIX = "MIX"


@dataclass
class BenchConfig:
    window_size: int
    segment_size: int
    iterations: int
    kernel: Kernel = Kernel.SEQ
    hints: AllocationHints = field(default_factory=AllocationHints)
    rng_seed: int = 0

    def __post_init__(self):
        self.kernel = Kernel(self.kernel)

    @property
    def n_segments(self) -> int:
        return self.window_size // self.segment_size

    @property
    def bytes_moved(self) -> int:
        return self.window_size * self.iterations

    def validate(self) -> None:
        if self.segment_size <= 0 or self.window_size <= 0:
            raise ConfigInvalid("window and segment sizes must be positive")
        if self.window_size % self.segment_size:
            raise ConfigInvalid(f"segment size {self.segment_size} does not divide {self.window_size}")
        if self.iterations < 1:
            raise ConfigInvalid("need at least one timed iteration")


@dataclass
class BenchReport:
    kernel: Kernel
    window_size: int
    segment_size: int
    iterations: int
    bytes_moved: int
    elapsed: float
    sync_elapsed: float
    bytes_flushed: int
    per_iteration: list = field(default_factory=list)

    @property
    def bandwidth(self) -> float:
        return self.bytes_moved / self.elapsed if self.elapsed > 0 else float("inf")


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        self.state = splitmix64(seed & _M64) or 0x9E3779B97F4A7C15

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _M64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _M64


def iteration_tag(seed: int, iteration: int) -> int:
    """Per-iteration tag (iteration 0 is the cold pass)."""
    return splitmix64((seed & _M64) ^ splitmix64(iteration))


def seq_order(n: int) -> list[int]:
    return list(range(n))


def pad_order(n: int) -> list[int]:
    return list(range(0, n, 2)) + list(range(1, n, 2))


def rnd_order(n: int, seed: int, iteration: int) -> list[int]:
    order = list(range(n))
    rng = XorShift64Star(iteration_tag(seed, iteration))
    for i in range(n - 1, 0, -1):
        j = rng.next() % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def mix_order(n: int, seed: int, iteration: int) -> list[int]:
    sources = (pad_order(n), rnd_order(n, seed, iteration))
    cursors = [0, 0]
    used = bytearray(n)
    out = []
    for k in range(n):
        src = k % 2
        seq = sources[src]
        while used[seq[cursors[src]]]:
            cursors[src] += 1
        idx = seq[cursors[src]]
        used[idx] = 1
        out.append(idx)
    return out


def visit_order(cfg: BenchConfig, iteration: int = 0) -> list[int]:
    n = cfg.n_segments
    k = cfg.kernel
    if k is Kernel.SEQ:
        return seq_order(n)
    if k is Kernel.PAD:
        return pad_order(n)
    if k is Kernel.RND:
        return rnd_order(n, cfg.rng_seed, iteration)
    return mix_order(n, cfg.rng_seed, iteration)


def verify_trace(cfg: BenchConfig, iteration: int = 0) -> list[tuple[int, str]]:
    """The (segment, op) sequence of one iteration, without a window."""
    cfg.validate()
    return [(idx, READ if pos % 2 == 0 else WRITE)
            for pos, idx in enumerate(visit_order(cfg, iteration))]


def fill_value(segment: int, seed: int, iteration: int) -> int:
    return (segment ^ iteration_tag(seed, iteration)) & _M64


def fill_pattern(segment: int, seed: int, iteration: int, size: int) -> np.ndarray:
    words = np.full(-(-size // 8), fill_value(segment, seed, iteration), dtype="<u8")
    return words.view(np.uint8)[:size]


def run_kernel(cfg: BenchConfig, w, clock=time.perf_counter) -> BenchReport:
    """Run cold + ``cfg.iterations`` timed iterations over window ``w``."""
    cfg.validate()
    M, S, I = cfg.window_size, cfg.segment_size, cfg.iterations
    if w.size < M:
        raise ConfigInvalid(f"window of {w.size} bytes is smaller than M={M}")
    data = w.as_array()
    scratch = np.empty(S, dtype=np.uint8)
    per_iteration = []
    sync_elapsed = 0.0
    flushed = 0
    for it in range(I + 1):
        trace = verify_trace(cfg, it)
        t0 = clock()
        for idx, op in trace:
            a = idx * S
            if op == READ:
                np.copyto(scratch, data[a:a + S])
            else:
                data[a:a + S] = fill_pattern(idx, cfg.rng_seed, it, S)
                w.mark_dirty(a, a + S)
        if it == I:
            ts = clock()
            flushed = w.win_sync().bytes_flushed
            sync_elapsed = clock() - ts
        if it:
            per_iteration.append(clock() - t0)
    elapsed = sum(per_iteration)
    return BenchReport(cfg.kernel, M, S, I, cfg.bytes_moved, elapsed, sync_elapsed, flushed, per_iteration)


def expected_image(cfg: BenchConfig, initial: Optional[bytes] = None) -> bytes:
    """Window content after run_kernel, from the traces alone."""
    S = cfg.segment_size
    image = bytearray(initial if initial is not None else bytes(cfg.window_size))
    last: dict[int, int] = {}
    for it in range(cfg.iterations + 1):
        for idx, op in verify_trace(cfg, it):
            if op == WRITE:
                last[idx] = it
    for idx, it in last.items():
        image[idx * S:(idx + 1) * S] = fill_pattern(idx, cfg.rng_seed, it, S).tobytes()
    return bytes(image)


CSV_COLUMNS = ["row", "kernel", "M", "S", "I", "iteration", "elapsed_s", "sync_s",
               "bandwidth_MBps", "bytes_moved"]
TIMING_COLUMNS = {"elapsed_s", "sync_s", "bandwidth_MBps"}


def write_csv(reports: Iterable[BenchReport], out: TextIO) -> None:
    """One summary row plus one row per timed iteration, per report."""
    wr = csv.writer(out)
    wr.writerow(CSV_COLUMNS)
    for r in reports:
        M, S, I = r.window_size, r.segment_size, r.iterations
        wr.writerow(["summary", r.kernel.value, M, S, I, "", f"{r.elapsed:.6f}",
                     f"{r.sync_elapsed:.6f}", f"{r.bandwidth / 1e6:.3f}", r.bytes_moved])
        for i, dt in enumerate(r.per_iteration, 1):
            bw = M / dt / 1e6 if dt > 0 else float("inf")
            wr.writerow(["iteration", r.kernel.value, M, S, I, i, f"{dt:.6f}", "",
                         f"{bw:.3f}", M])
