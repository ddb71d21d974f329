"""Distributed hash table over two windows per rank.

Each rank owns a local volume (LV) and an overflow heap of
``heap_factor * lv_elements`` slots. A slot is 16 bytes, key then value
(int64 little-endian); key 0 marks an empty slot. Slots are claimed with
compare-and-swap on the key under a shared epoch on the owner, then the
value is put. A lost claim probes the owner's heap linearly.
"""

from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from ..errors import TableFull
from ..fabric.group import RankGroup
from ..hints import AllocationHints
from ..locks import LockMode
from ..mapping import SyncReport
from ..mstream import XorShift64Star, splitmix64
from ..window import Window, allocate, free
from .checkpoint import checkpoint

ELEMENT_SIZE = 16
EMPTY = 0
_M64 = 0xFFFFFFFFFFFFFFFF


class InsertOutcome(enum.Enum):
    NEW_SLOT = "new_slot"
    UPDATED = "updated"
    HEAP_SLOT = "heap_slot"
    TABLE_FULL = "table_full"


@dataclass
class DhtConfig:
    lv_elements: int
    heap_factor: int = 4
    fill_fraction: float = 0.80
    hints: AllocationHints = field(default_factory=AllocationHints)
    seed: int = 0
    fsync: bool = False

    @property
    def heap_elements(self) -> int:
        return self.heap_factor * self.lv_elements

    def capacity(self, n_ranks: int) -> int:
        return n_ranks * (self.lv_elements + self.heap_factor * self.lv_elements)

    def image_bytes(self, n_ranks: int) -> int:
        return self.capacity(n_ranks) * ELEMENT_SIZE


def _signed(x: int) -> int:
    return x - (1 << 64) if x >= 1 << 63 else x


def key_hash(key: int) -> int:
    return splitmix64(key & _M64)


def owner(key: int, n_ranks: int) -> int:
    return key_hash(key) % n_ranks


def lv_slot(key: int, n_ranks: int, lv_elements: int) -> int:
    return (key_hash(key) // n_ranks) % lv_elements


def heap_start(key: int, heap_elements: int) -> int:
    return splitmix64(key_hash(key) ^ 0x5851F42D4C957F2D) % heap_elements


def value_for(key: int) -> int:
    """Deterministic payload so concurrent duplicate inserts agree."""
    return _signed(splitmix64((key & _M64) ^ 0xD1B54A32D192ED03))


def fill_keys(seed: int, rank: int, count: int) -> list[int]:
    rng = XorShift64Star(splitmix64(seed & _M64) ^ splitmix64(rank + 1))
    keys = []
    while len(keys) < count:
        k = _signed(rng.next())
        if k != EMPTY:
            keys.append(k)
    return keys


def _rank_filename(filename: str, rank: int, part: str) -> str:
    if "{rank}" in filename or "{part}" in filename:
        return filename.format(rank=rank, part=part)
    return f"{filename}.{part}.{rank}"


@dataclass
class DhtTable:
    group: RankGroup
    cfg: DhtConfig
    lv: Window
    heap: Optional[Window]

    @property
    def windows(self) -> list[Window]:
        return [w for w in (self.lv, self.heap) if w is not None]


def dht_create(group: RankGroup, cfg: DhtConfig) -> DhtTable:
    """Collective: allocate the LV and heap windows (one file each per rank
    when the hints ask for storage)."""
    if cfg.lv_elements < 1 or cfg.heap_factor < 0:
        raise ValueError("lv_elements must be >= 1 and heap_factor >= 0")

    def hints_for(part):
        h = cfg.hints
        if h.is_storage and h.filename:
            h = h.with_(filename=_rank_filename(h.filename, group.my_rank, part))
        return h

    lv = allocate(group, cfg.lv_elements * ELEMENT_SIZE, 8, hints_for("lv"), fsync=cfg.fsync)
    heap = None
    if cfg.heap_factor:
        heap = allocate(group, cfg.heap_elements * ELEMENT_SIZE, 8, hints_for("heap"),
                        fsync=cfg.fsync)
    return DhtTable(group, cfg, lv, heap)


@contextlib.contextmanager
def _shared_epoch(w: Window, target: int):
    if target in w.open_epochs:
        yield
        return
    w.lock(target, LockMode.SHARED)
    try:
        yield
    finally:
        w.unlock(target)


def _claim(w: Window, target: int, slot: int, key: int, value: int) -> Optional[bool]:
    """CAS the key into ``slot``: True if newly claimed, False if the key was
    already there (value updated), None if another key holds it."""
    old = w.compare_and_swap(target, slot * 2, EMPTY, key)
    if old == EMPTY or old == key:
        w.put(target, slot * 2 + 1, value.to_bytes(8, "little", signed=True))
        return old == EMPTY
    return None


def dht_insert(t: DhtTable, key: int, value: int) -> InsertOutcome:
    if key == EMPTY:
        raise ValueError("key 0 is reserved for empty slots")
    n = t.group.n_ranks
    dest = owner(key, n)
    with _shared_epoch(t.lv, dest):
        got = _claim(t.lv, dest, lv_slot(key, n, t.cfg.lv_elements), key, value)
    if got is not None:
        return InsertOutcome.NEW_SLOT if got else InsertOutcome.UPDATED
    if t.heap is None:
        raise TableFull(f"LV slot taken on rank {dest} and no heap")
    h = t.cfg.heap_elements
    start = heap_start(key, h)
    with _shared_epoch(t.heap, dest):
        for i in range(h):
            got = _claim(t.heap, dest, (start + i) % h, key, value)
            if got is not None:
                return InsertOutcome.HEAP_SLOT if got else InsertOutcome.UPDATED
    raise TableFull(f"heap of rank {dest} is full")


def dht_lookup(t: DhtTable, key: int) -> Optional[int]:
    if key == EMPTY:
        return None
    n = t.group.n_ranks
    dest = owner(key, n)
    with _shared_epoch(t.lv, dest):
        raw = t.lv.get(dest, lv_slot(key, n, t.cfg.lv_elements) * 2, ELEMENT_SIZE)
    k = int.from_bytes(raw[:8], "little", signed=True)
    if k == key:
        return int.from_bytes(raw[8:], "little", signed=True)
    if k == EMPTY or t.heap is None:
        return None
    h = t.cfg.heap_elements
    start = heap_start(key, h)
    with _shared_epoch(t.heap, dest):
        for i in range(h):
            raw = t.heap.get(dest, ((start + i) % h) * 2, ELEMENT_SIZE)
            k = int.from_bytes(raw[:8], "little", signed=True)
            if k == key:
                return int.from_bytes(raw[8:], "little", signed=True)
            if k == EMPTY:
                return None
    return None


@dataclass
class FillStats:
    rank: int
    attempted: int = 0
    new_slots: int = 0
    updated: int = 0
    heap_slots: int = 0
    table_full: int = 0

    @property
    def inserted(self) -> int:
        return self.new_slots + self.heap_slots

    @property
    def conflicts(self) -> int:
        return self.heap_slots + self.table_full


def dht_fill(t: DhtTable, fraction: Optional[float] = None) -> FillStats:
    """Collective: every rank inserts ``fraction * lv_elements`` seeded keys.

    Shared epochs on all owners stay open for the whole fill.
    """
    fraction = t.cfg.fill_fraction if fraction is None else fraction
    me = t.group.my_rank
    count = int(fraction * t.cfg.lv_elements)
    stats = FillStats(me, attempted=count)
    t.group.barrier()
    ranks = range(t.group.n_ranks)
    with contextlib.ExitStack() as stack:
        if count:
            for w in t.windows:
                for r in ranks:
                    w.lock(r, LockMode.SHARED)
                    stack.callback(w.unlock, r)
        for key in fill_keys(t.cfg.seed, me, count):
            try:
                out = dht_insert(t, key, value_for(key))
            except TableFull:
                stats.table_full += 1
                continue
            if out is InsertOutcome.NEW_SLOT:
                stats.new_slots += 1
            elif out is InsertOutcome.HEAP_SLOT:
                stats.heap_slots += 1
            else:
                stats.updated += 1
    t.group.barrier()
    return stats


def dht_checkpoint(t: DhtTable) -> SyncReport:
    """Per-rank, barrier-free: exclusive self-lock, sync, unlock, per window."""
    return SyncReport(sum(checkpoint(w).bytes_flushed for w in t.windows))


def scan_image(*images) -> dict[int, int]:
    """Occupied slots of raw LV/heap images."""
    out: dict[int, int] = {}
    for img in images:
        if img is None:
            continue
        n = len(img) // ELEMENT_SIZE
        arr = np.frombuffer(img, dtype="<i8", count=2 * n).reshape(n, 2)
        for k, v in arr[arr[:, 0] != EMPTY].tolist():
            out[k] = v
    return out


def local_items(t: DhtTable) -> dict[int, int]:
    return scan_image(*(w.memory for w in t.windows))


def reference_map(cfg: DhtConfig, n_ranks: int, fraction: Optional[float] = None) -> dict[int, int]:
    """What a sequential map holds after dht_fill with the same config."""
    fraction = cfg.fill_fraction if fraction is None else fraction
    count = int(fraction * cfg.lv_elements)
    ref: dict[int, int] = {}
    for r in range(n_ranks):
        for k in fill_keys(cfg.seed, r, count):
            ref[k] = value_for(k)
    return ref


def table_files(t: DhtTable) -> list[str]:
    return [w.query_attributes().get("storage_alloc_filename") for w in t.windows]


def load_table_files(paths: Iterable[str]) -> dict[int, int]:
    images = []
    for p in paths:
        with open(p, "rb") as fh:
            images.append(fh.read())
    return scan_image(*images)


def dht_free(t: DhtTable) -> None:
    for w in t.windows:
        free(w)
