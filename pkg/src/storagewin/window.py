"""One-sided windows over memory, storage, or both.

A :class:`Window` is one rank's handle. Operations on a target rank go
through the group's transport and land on that rank's
:class:`WindowTarget`, which owns the backing, the dirty log and the
passive-target lock.
"""

from __future__ import annotations

import contextlib
import os
import struct
import threading
from typing import Optional, Sequence

from . import mapping
from .errors import (CollectiveMismatch, MisalignedElement, NoEpoch, NotAttached,
                     NotCoLocated, OpenEpoch, OutOfBounds, Overlap, StorageWinError,
                     TransportFailed, error_for_status)
from .fabric.group import RankGroup
from .hints import (ALLOC_TYPE, AllocationHints, ValidatedHints, hint_attributes,
                    validate_for_allocation)
from .locks import LockMode, RWLock
from .mapping import DirtyLog, Layout, SyncReport

ELEMENT = 8
_I64 = struct.Struct("<q")
_UNLIMITED = 1 << 62
_STRIPES = 64

SHARED = LockMode.SHARED
EXCLUSIVE = LockMode.EXCLUSIVE


def _wrap64(v: int) -> int:
    return ((v + (1 << 63)) & 0xFFFFFFFFFFFFFFFF) - (1 << 63)


class Region:
    """A mapped byte range plus the dirty log that feeds selective sync.

    ``origin`` is where this region starts inside its backing; shared
    windows hand each rank a slice of one backing.
    """

    def __init__(self, size: int, backing: Optional[mapping.MappedWindowBacking],
                 vh: Optional[ValidatedHints], origin: int = 0, owner: bool = True,
                 budget=None, charge: int = 0):
        self.size = size
        self.backing = backing
        self.vh = vh
        self.origin = origin
        self.owner = owner
        self._budget = budget
        self._charge = charge
        limit = backing.layout.size_rounded if backing is not None else 0
        self.log = DirtyLog(limit)
        self.lock = threading.Lock()
        self._stripes = [threading.Lock() for _ in range(_STRIPES)]

    @property
    def address(self) -> int:
        return self.backing.base_address + self.origin if self.backing is not None else 0

    @property
    def layout(self) -> Optional[Layout]:
        return self.backing.layout if self.backing is not None else None

    @property
    def view(self) -> memoryview:
        if self.backing is None:
            return memoryview(b"")
        return self.backing.view[self.origin:self.origin + self.size]

    @property
    def closed(self) -> bool:
        return self.backing is not None and self.backing.closed

    def mark(self, off: int, n: int) -> None:
        if n <= 0:
            return
        if off < 0 or off + n > self.size:
            raise OutOfBounds(f"[{off},{off + n}) outside region of {self.size} bytes")
        a = self.origin + off
        with self.lock:
            self.log.mark(a, a + n)

    def mark_absolute(self, a: int, b: int) -> None:
        """Mark backing coordinates (used for stores into a neighbour's slice)."""
        with self.lock:
            self.log.mark(a, b)

    def write(self, off: int, data) -> None:
        n = len(data)
        a = self.origin + off
        self.backing.view[a:a + n] = data
        with self.lock:
            self.log.mark(a, a + n)

    def read(self, off: int, n: int) -> bytes:
        a = self.origin + off
        return bytes(self.backing.view[a:a + n])

    def stripe(self, off: int) -> threading.Lock:
        return self._stripes[(off // ELEMENT) % _STRIPES]

    def sync(self) -> SyncReport:
        if self.backing is None:
            return SyncReport(0)
        with self.lock:
            return mapping.sync_storage(self.backing, self.log)

    def release(self) -> mapping.ReleaseReport:
        if self.backing is None or self.backing.closed:
            return mapping.ReleaseReport()
        if not self.owner:
            flushed = 0 if self.vh.hints.discard else self.sync().bytes_flushed
            self.log.clear()
            return mapping.ReleaseReport(flushed)
        with self.lock:
            report = mapping.release(self.backing, self.log, self.vh)
        if self._budget is not None and self._charge:
            self._budget.refund(self._charge)
            self._charge = 0
        return report


def _build_region(group: RankGroup, size: int, hints: AllocationHints, fsync: bool,
                  page_size: int) -> Region:
    if size == 0:
        return Region(0, None, None)
    vh = validate_for_allocation(hints, size)
    budget = group.budget
    with budget.lock:
        remaining = budget.remaining
        avail = _UNLIMITED if remaining is None else max(remaining, 1)
        layout = mapping.plan_layout(vh, size, avail, page_size)
        backing = mapping.materialize(layout, vh, fsync)
        budget.charge(layout.memory_bytes)
    return Region(size, backing, vh, budget=budget, charge=layout.memory_bytes)


class WindowTarget:
    """Target side of one rank's window; every public method is thread-safe."""

    def __init__(self, window_id: int, attributes: dict, region: Optional[Region] = None,
                 dynamic: bool = False):
        self.window_id = window_id
        self._attributes = dict(attributes)
        self.region = region
        self.dynamic = dynamic
        self._attached: list[Region] = []
        self._attach_lock = threading.Lock()
        self.rwlock = RWLock()

    # address resolution
    def _resolve(self, off: int, n: int) -> tuple[Region, int]:
        if not self.dynamic:
            r = self.region
            if r is None or r.size == 0 or off < 0 or off + n > r.size:
                size = 0 if r is None else r.size
                raise OutOfBounds(f"[{off},{off + n}) outside window of {size} bytes")
            return r, off
        for r in self._attached:
            base = r.address
            if base <= off and off + n <= base + r.size:
                return r, off - base
        raise NotAttached(f"address range [{off:#x},{off + n:#x}) is not attached")

    def put(self, off: int, data) -> None:
        n = len(data)
        if n == 0:
            return
        region, o = self._resolve(off, n)
        region.write(o, data)

    def get(self, off: int, n: int) -> bytes:
        if n == 0:
            return b""
        region, o = self._resolve(off, n)
        return region.read(o, n)

    def _element(self, off: int, count: int = 1) -> tuple[Region, int]:
        region, o = self._resolve(off, ELEMENT * count)
        if o % ELEMENT:
            raise MisalignedElement(f"offset {off} is not {ELEMENT}-byte aligned")
        return region, o

    def accumulate(self, off: int, values: Sequence[int]) -> list[int]:
        if not values:
            return []
        region, o = self._element(off, len(values))
        view = region.backing.view
        base = region.origin + o
        old = []
        for i, v in enumerate(values):
            a = base + i * ELEMENT
            with region.stripe(a):
                (cur,) = _I64.unpack_from(view, a)
                _I64.pack_into(view, a, _wrap64(cur + v))
            old.append(cur)
        region.mark(o, ELEMENT * len(values))
        return old

    def fetch_and_op(self, off: int, value: int) -> int:
        region, o = self._element(off)
        view = region.backing.view
        a = region.origin + o
        with region.stripe(a):
            (cur,) = _I64.unpack_from(view, a)
            if value:
                _I64.pack_into(view, a, _wrap64(cur + value))
        if value:
            region.mark(o, ELEMENT)
        return cur

    def compare_and_swap(self, off: int, compare: int, new: int) -> int:
        region, o = self._element(off)
        view = region.backing.view
        a = region.origin + o
        with region.stripe(a):
            (cur,) = _I64.unpack_from(view, a)
            if cur == compare:
                _I64.pack_into(view, a, new)
        if cur == compare:
            region.mark(o, ELEMENT)
        return cur

    def lock_acquire(self, mode: LockMode) -> None:
        self.rwlock.acquire(LockMode(mode))

    def lock_release(self, mode: LockMode) -> None:
        self.rwlock.release(LockMode(mode))

    def sync(self) -> int:
        if self.dynamic:
            with self._attach_lock:
                regions = list(self._attached)
        else:
            regions = [self.region] if self.region is not None else []
        return sum(r.sync().bytes_flushed for r in regions)

    def attributes(self) -> dict:
        return self._attributes

    # dynamic windows
    def attach(self, region: Region) -> None:
        if not self.dynamic:
            raise TypeError("attach needs a dynamic window")
        lo, hi = region.address, region.address + region.size
        with self._attach_lock:
            for r in self._attached:
                if r is region or (lo < r.address + r.size and r.address < hi):
                    raise Overlap(f"[{lo:#x},{hi:#x}) overlaps an attached region")
            self._attached.append(region)

    def detach(self, region: Region) -> None:
        with self._attach_lock:
            for i, r in enumerate(self._attached):
                if r is region:
                    del self._attached[i]
                    return
        raise NotAttached("region is not attached to this window")


class Window:
    """One rank's handle on a collectively allocated window."""

    def __init__(self, group: RankGroup, window_id: int, target: WindowTarget,
                 sizes: Sequence[int], disp_units: Sequence[int], kind: str,
                 hints: Optional[AllocationHints] = None, shared_regions=None):
        self.group = group
        self.window_id = window_id
        self.target = target
        self.sizes = list(sizes)
        self.disp_units = list(disp_units)
        self.kind = kind
        self.hints = hints
        self._shared = shared_regions
        self._epochs: dict[int, LockMode] = {}
        self._epoch_lock = threading.Lock()
        self.freed = False

    # -- local access ---------------------------------------------------------
    @property
    def rank(self) -> int:
        return self.group.my_rank

    @property
    def size(self) -> int:
        return self.sizes[self.rank]

    @property
    def disp_unit(self) -> int:
        return self.disp_units[self.rank]

    @property
    def region(self) -> Optional[Region]:
        return self.target.region

    @property
    def layout(self) -> Optional[Layout]:
        return self.region.layout if self.region is not None else None

    @property
    def memory(self) -> memoryview:
        """Local load/store view. Stores through it must be reported with
        :meth:`mark_dirty` to be picked up by ``win_sync``."""
        return self.region.view if self.region is not None else memoryview(b"")

    def as_array(self, dtype="u1"):
        import numpy as np
        return np.frombuffer(self.memory, dtype=dtype)

    def mark_dirty(self, a: int, b: int) -> None:
        if b > a:
            self.region.mark(a, b - a)

    def store(self, offset: int, data) -> None:
        """Local store that also records the dirty range."""
        if len(data) == 0:
            return
        if offset < 0 or offset + len(data) > self.size:
            raise OutOfBounds(f"store [{offset},{offset + len(data)}) outside {self.size} bytes")
        self.region.write(offset, data)

    def load(self, offset: int, n: int) -> bytes:
        if offset < 0 or offset + n > self.size:
            raise OutOfBounds(f"load [{offset},{offset + n}) outside {self.size} bytes")
        return bytes(self.memory[offset:offset + n])

    def shared_query(self, rank: int) -> tuple[memoryview, int, int]:
        """Direct view of ``rank``'s part of a shared window."""
        if self._shared is None:
            raise TypeError("shared_query needs a window from allocate_shared")
        backing, prefix = self._shared
        n = self.sizes[rank]
        if backing is None:
            return memoryview(b""), 0, self.disp_units[rank]
        return backing.view[prefix[rank]:prefix[rank] + n], n, self.disp_units[rank]

    def shared_store(self, rank: int, offset: int, data) -> None:
        """Store into ``rank``'s slice of a shared window by direct addressing."""
        if self._shared is None:
            raise TypeError("shared_store needs a window from allocate_shared")
        backing, prefix = self._shared
        if offset < 0 or offset + len(data) > self.sizes[rank]:
            raise OutOfBounds("shared store outside the target slice")
        a = prefix[rank] + offset
        backing.view[a:a + len(data)] = data
        if len(data):
            self.region.mark_absolute(a, a + len(data))

    # -- RMA ------------------------------------------------------------------
    def _byte_offset(self, target: int, disp: int, nbytes: int) -> int:
        if not 0 <= target < self.group.n_ranks:
            raise OutOfBounds(f"rank {target} outside group of {self.group.n_ranks}")
        if self.kind == "dynamic":
            return disp
        size = self.sizes[target]
        off = disp * self.disp_units[target]
        if size == 0 or off < 0 or off + nbytes > size:
            raise OutOfBounds(f"[{off},{off + nbytes}) outside rank {target}'s window of {size} bytes")
        return off

    def _require_epoch(self, target: int) -> None:
        if target not in self._epochs:
            raise NoEpoch(f"no passive-target epoch open on rank {target}")

    def _call(self, target, fn, *args):
        try:
            return fn(target, self.window_id, *args)
        except TransportFailed:
            with self._epoch_lock:
                self._epochs.pop(target, None)
            raise

    def put(self, target_rank: int, target_disp: int, data) -> None:
        off = self._byte_offset(target_rank, target_disp, len(data))
        self._require_epoch(target_rank)
        if len(data) == 0:
            return
        self._call(target_rank, self.group.transport.put, off, data)

    def get(self, target_rank: int, target_disp: int, n: int) -> bytes:
        off = self._byte_offset(target_rank, target_disp, n)
        self._require_epoch(target_rank)
        if n == 0:
            return b""
        return self._call(target_rank, self.group.transport.get, off, n)

    def accumulate(self, target_rank: int, target_disp: int, values: Sequence[int],
                   op: str = "sum") -> None:
        if op != "sum":
            raise ValueError(f"unsupported accumulate op {op!r}")
        values = [int(v) for v in values]
        off = self._byte_offset(target_rank, target_disp, ELEMENT * len(values))
        self._require_epoch(target_rank)
        if not values:
            return
        if off % ELEMENT:
            raise MisalignedElement(f"offset {off} is not {ELEMENT}-byte aligned")
        self._call(target_rank, self.group.transport.accumulate, off, values)

    def fetch_and_op(self, target_rank: int, target_disp: int, value: int, op: str = "sum") -> int:
        if op != "sum":
            raise ValueError(f"unsupported op {op!r}")
        off = self._byte_offset(target_rank, target_disp, ELEMENT)
        self._require_epoch(target_rank)
        if off % ELEMENT:
            raise MisalignedElement(f"offset {off} is not {ELEMENT}-byte aligned")
        return self._call(target_rank, self.group.transport.fetch_and_op, off, int(value))

    def compare_and_swap(self, target_rank: int, target_disp: int, compare: int, new: int) -> int:
        off = self._byte_offset(target_rank, target_disp, ELEMENT)
        self._require_epoch(target_rank)
        if off % ELEMENT:
            raise MisalignedElement(f"offset {off} is not {ELEMENT}-byte aligned")
        return self._call(target_rank, self.group.transport.compare_and_swap, off,
                          int(compare), int(new))

    # -- passive-target synchronisation -------------------------------------
    def lock(self, target_rank: int, mode: LockMode = SHARED) -> None:
        mode = LockMode(mode)
        with self._epoch_lock:
            if target_rank in self._epochs:
                raise OpenEpoch(f"epoch on rank {target_rank} already open")
            # reserve the slot so a concurrent thread cannot open a second epoch
            self._epochs[target_rank] = mode
        try:
            self.group.transport.lock(target_rank, self.window_id, mode)
        except BaseException:
            with self._epoch_lock:
                self._epochs.pop(target_rank, None)
            raise

    def unlock(self, target_rank: int) -> None:
        with self._epoch_lock:
            mode = self._epochs.get(target_rank)
            if mode is None:
                raise NoEpoch(f"unlock without an epoch on rank {target_rank}")
        try:
            self.group.transport.unlock(target_rank, self.window_id, mode)
        finally:
            with self._epoch_lock:
                self._epochs.pop(target_rank, None)

    @contextlib.contextmanager
    def epoch(self, target_rank: int, mode: LockMode = SHARED):
        self.lock(target_rank, mode)
        try:
            yield self
        finally:
            self.unlock(target_rank)

    @property
    def open_epochs(self) -> dict[int, LockMode]:
        return dict(self._epochs)

    def win_sync(self) -> SyncReport:
        """Flush this rank's dirty storage ranges (local only)."""
        return SyncReport(self.target.sync())

    def query_attributes(self) -> dict[str, str]:
        return dict(self.target.attributes())

    def remote_attributes(self, target_rank: int) -> dict[str, str]:
        return self.group.transport.attributes(target_rank, self.window_id)

    # -- dynamic windows ----------------------------------------------------
    def attach(self, region: Region) -> None:
        self.target.attach(region)

    def detach(self, region: Region) -> None:
        self.target.detach(region)

    def free(self) -> None:
        free(self)


# -- collective construction --------------------------------------------------

def _storage_file(h: AllocationHints) -> Optional[str]:
    return os.path.abspath(h.filename) if h.is_storage and h.filename else None


def _agree(group: RankGroup, intent: dict) -> tuple[int, list[dict]]:
    intent = dict(intent, wid=group.propose_window_id())
    intents = group.allgather_obj(intent)
    wid = group.commit_window_id([i["wid"] for i in intents])
    return wid, intents


def _check_status(group: RankGroup, err: Optional[BaseException]) -> None:
    """Allgather success; raise on every rank if any rank failed."""
    status = 0 if err is None else getattr(err, "status", 255)
    statuses = group.allgather_obj([status, "" if err is None else str(err)])
    if err is not None:
        raise err
    for rank, (st, msg) in enumerate(statuses):
        if st:
            raise error_for_status(st, f"rank {rank}: {msg}")


def _check_shared_files(intents: list[dict]) -> None:
    by_file: dict[str, list[dict]] = {}
    for i in intents:
        if i["file"]:
            by_file.setdefault(i["file"], []).append(i)
    for path, users in by_file.items():
        if len(users) < 2:
            continue
        explicit = any(u["offset"] for u in users)
        if not explicit and len({u["size"] for u in users}) > 1:
            raise CollectiveMismatch(
                f"{path}: ranks request different sizes on a shared file without offsets")


def allocate(group: RankGroup, size: int, disp_unit: int = 1,
             hints: Optional[AllocationHints] = None, *, fsync: bool = False,
             page_size: int = mapping.PAGE_SIZE) -> Window:
    """Collective: every rank allocates its own window per its hints."""
    hints = hints or AllocationHints()
    if size < 0 or disp_unit < 1:
        raise ValueError("size must be >= 0 and disp_unit >= 1")
    wid, intents = _agree(group, {"size": size, "disp_unit": disp_unit,
                                  "file": _storage_file(hints), "offset": hints.offset})
    _check_shared_files(intents)
    region, err = None, None
    try:
        region = _build_region(group, size, hints, fsync, page_size)
    except StorageWinError as e:
        err = e
    try:
        _check_status(group, err)
    except StorageWinError:
        if region is not None:
            region.release()
        raise
    target = WindowTarget(wid, hint_attributes(hints), region)
    group.endpoint.register(wid, target)
    group.barrier()
    return Window(group, wid, target, [i["size"] for i in intents],
                  [i["disp_unit"] for i in intents], "allocate", hints)


def allocate_shared(group: RankGroup, size: int, disp_unit: int = 1,
                    hints: Optional[AllocationHints] = None, *, fsync: bool = False,
                    page_size: int = mapping.PAGE_SIZE) -> Window:
    """Collective: rank regions are consecutive in one backing that every
    rank can address directly."""
    hints = hints or AllocationHints()
    if size < 0 or disp_unit < 1:
        raise ValueError("size must be >= 0 and disp_unit >= 1")
    wid, intents = _agree(group, {"size": size, "disp_unit": disp_unit,
                                  "file": _storage_file(hints), "offset": hints.offset})
    sizes = [i["size"] for i in intents]
    prefix = [sum(sizes[:r]) for r in range(len(sizes))]
    total = sum(sizes)
    me = group.my_rank

    if group.is_local:
        err = None
        if me == 0:
            try:
                whole = _build_region(group, total, hints, fsync, page_size)
                with group.fabric.shared_lock:
                    group.fabric.shared[wid] = whole
            except StorageWinError as e:
                err = e
        _check_status(group, err)
        whole = group.fabric.shared[wid]
        owner = me == 0
    else:
        files = {i["file"] for i in intents}
        if None in files or len(files) != 1 or len({i["offset"] for i in intents}) != 1:
            raise NotCoLocated("socket ranks can share a window only through one common storage file")
        err, whole = None, None
        try:
            whole = _build_region(group, total, hints, fsync, page_size)
        except StorageWinError as e:
            err = e
        _check_status(group, err)
        owner = True

    if whole.backing is None:
        region = Region(0, None, None)
    else:
        region = Region(sizes[me], whole.backing, whole.vh, origin=prefix[me], owner=owner,
                        budget=whole._budget if owner else None,
                        charge=whole._charge if owner else 0)
    target = WindowTarget(wid, hint_attributes(hints), region)
    group.endpoint.register(wid, target)
    group.barrier()
    return Window(group, wid, target, sizes, [i["disp_unit"] for i in intents], "shared",
                  hints, (whole.backing, prefix))


def create_dynamic(group: RankGroup) -> Window:
    """Collective: a window with no memory until regions are attached."""
    wid, intents = _agree(group, {})
    target = WindowTarget(wid, {ALLOC_TYPE: "memory", "flavor": "dynamic"}, dynamic=True)
    group.endpoint.register(wid, target)
    group.barrier()
    return Window(group, wid, target, [0] * group.n_ranks, [1] * group.n_ranks, "dynamic")


def alloc_mem(group: RankGroup, size: int, hints: Optional[AllocationHints] = None, *,
              fsync: bool = False, page_size: int = mapping.PAGE_SIZE) -> Region:
    """Local (non-collective) hint-aware allocation for dynamic windows."""
    if size <= 0:
        raise ValueError("alloc_mem needs a positive size")
    return _build_region(group, size, hints or AllocationHints(), fsync, page_size)


def free_mem(region: Region) -> mapping.ReleaseReport:
    return region.release()


def attach(w: Window, region: Region) -> None:
    w.attach(region)


def detach(w: Window, region: Region) -> None:
    w.detach(region)


def free(w: Window) -> mapping.ReleaseReport:
    """Collective. Honors the unlink/discard hints of each rank."""
    if w.freed:
        return mapping.ReleaseReport()
    group = w.group
    opened = group.allgather_obj(sorted(w._epochs))
    if any(opened):
        raise OpenEpoch(f"free with open epochs: {opened}")
    group.endpoint.unregister(w.window_id)
    region = w.target.region
    report = mapping.ReleaseReport()
    if region is not None and not region.owner:
        report = region.release()
    group.barrier()
    if region is not None and region.owner:
        report = region.release()
    if w.kind == "shared" and group.is_local and group.my_rank == 0:
        with group.fabric.shared_lock:
            group.fabric.shared.pop(w.window_id, None)
    w.freed = True
    return report


# -- functional aliases ---------------------------------------------------------

def put(w: Window, target_rank: int, target_disp: int, data) -> None:
    w.put(target_rank, target_disp, data)


def get(w: Window, target_rank: int, target_disp: int, n: int) -> bytes:
    return w.get(target_rank, target_disp, n)


def accumulate(w: Window, target_rank: int, target_disp: int, values, op: str = "sum") -> None:
    w.accumulate(target_rank, target_disp, values, op)


def fetch_and_op(w: Window, target_rank: int, target_disp: int, value: int, op: str = "sum") -> int:
    return w.fetch_and_op(target_rank, target_disp, value, op)


def compare_and_swap(w: Window, target_rank: int, target_disp: int, compare: int, new: int) -> int:
    return w.compare_and_swap(target_rank, target_disp, compare, new)


def lock(w: Window, target_rank: int, mode: LockMode = SHARED) -> None:
    w.lock(target_rank, mode)


def unlock(w: Window, target_rank: int) -> None:
    w.unlock(target_rank)


def win_sync(w: Window) -> SyncReport:
    return w.win_sync()


def query_attributes(w: Window) -> dict[str, str]:
    return w.query_attributes()
