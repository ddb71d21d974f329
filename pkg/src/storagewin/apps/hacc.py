"""HACC-style particle checkpoint/restart over a global shared file.

Every rank stores ``count`` packed 38-byte records at byte offset
``rank * count * 38`` of one file through a storage window, then syncs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ShortFile
from ..fabric.group import RankGroup
from ..hints import AllocationHints, AllocType
from ..window import Window, allocate

RECORD_DTYPE = np.dtype([
    ("xx", "<f4"), ("yy", "<f4"), ("zz", "<f4"),
    ("vx", "<f4"), ("vy", "<f4"), ("vz", "<f4"),
    ("phi", "<f4"), ("pid", "<i8"), ("mask", "<u2"),
])
RECORD_SIZE = RECORD_DTYPE.itemsize
assert RECORD_SIZE == 38


@dataclass
class ParticleSet:
    records: np.ndarray

    @property
    def count(self) -> int:
        return len(self.records)

    def tobytes(self) -> bytes:
        return self.records.tobytes()

    @classmethod
    def frombytes(cls, raw) -> "ParticleSet":
        return cls(np.frombuffer(bytes(raw), dtype=RECORD_DTYPE).copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, ParticleSet) and self.tobytes() == other.tobytes()


def generate_particles(count: int, seed: int = 0, rank: int = 0) -> ParticleSet:
    rng = np.random.default_rng([seed, rank])
    rec = np.zeros(count, dtype=RECORD_DTYPE)
    for name in ("xx", "yy", "zz"):
        rec[name] = rng.uniform(0.0, 256.0, count)
    for name in ("vx", "vy", "vz"):
        rec[name] = rng.normal(0.0, 1.0, count)
    rec["phi"] = rng.normal(0.0, 10.0, count)
    rec["pid"] = np.arange(count, dtype=np.int64) + np.int64(rank) * count
    rec["mask"] = rng.integers(0, 1 << 16, count, dtype=np.uint16)
    return ParticleSet(rec)


def rank_offset(rank: int, count: int) -> int:
    return rank * count * RECORD_SIZE


def hacc_window(group: RankGroup, path: str, count: int, *, hints: Optional[AllocationHints] = None,
                restart: bool = False, fsync: bool = False) -> Window:
    """Collective: a storage window over this rank's block of ``path``.

    With ``restart`` the file must already hold every rank's block; a short
    file raises ShortFile before anything is mapped (so it is not grown).
    """
    h = (hints or AllocationHints()).with_(
        alloc_type=AllocType.STORAGE, filename=path,
        offset=rank_offset(group.my_rank, count))
    if restart:
        need = group.n_ranks * count * RECORD_SIZE
        have = os.stat(path).st_size if os.path.exists(path) else -1
        sizes = group.allgather_obj(have)
        if min(sizes) < need:
            raise ShortFile(f"{path}: {min(sizes)} bytes, need {need}")
    return allocate(group, count * RECORD_SIZE, 1, h, fsync=fsync)


def hacc_checkpoint(group: RankGroup, p: ParticleSet, w: Window) -> int:
    """Store the records into the window and sync; returns bytes flushed."""
    raw = p.tobytes()
    if len(raw) > w.size:
        raise ValueError(f"{p.count} particles do not fit a {w.size}-byte window")
    if raw:
        w.store(0, raw)
    return w.win_sync().bytes_flushed


def hacc_restart(group: RankGroup, w: Window) -> ParticleSet:
    """Read the records of this rank's block back."""
    reg = w.region
    backing = reg.backing
    if backing is not None and reg.size:
        start = reg.vh.hints.offset
        if backing.initial_file_length < start + reg.size:
            raise ShortFile(f"file held {backing.initial_file_length} bytes before mapping, "
                            f"block ends at {start + reg.size}")
    return ParticleSet.frombytes(w.load(0, reg.size) if reg.size else b"")


def reference_checkpoint(path: str, rank: int, p: ParticleSet) -> None:
    """Plain-file path: pwrite the same block and fsync."""
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o600)
    try:
        os.pwrite(fd, p.tobytes(), rank_offset(rank, p.count))
        os.fsync(fd)
    finally:
        os.close(fd)


def reference_restart(path: str, rank: int, count: int) -> ParticleSet:
    with open(path, "rb") as fh:
        fh.seek(rank_offset(rank, count))
        raw = fh.read(count * RECORD_SIZE)
    if len(raw) < count * RECORD_SIZE:
        raise ShortFile(f"{path}: block of rank {rank} is truncated")
    return ParticleSet.frombytes(raw)
