"""Window backing: one reserved virtual range carved into an anonymous
memory segment and/or a file-backed segment.

Linux only. Python's ``mmap`` module cannot place a mapping at a fixed
address, so the system calls are issued through ctypes.
"""

from __future__ import annotations

import bisect
import ctypes
import ctypes.util
import enum
import logging
import mmap
import os
import stat
from dataclasses import dataclass
from typing import Optional

from .errors import (FileCreateFailed, FileResizeFailed, FlushFailed,
                     InvalidCombination, MapFailed, OutOfBounds, UnlinkFailed)
from .hints import AUTO, Order, ValidatedHints

logger = logging.getLogger(__name__)

PAGE_SIZE = mmap.PAGESIZE

PROT_NONE = 0x0
PROT_READ = 0x1
PROT_WRITE = 0x2
MAP_SHARED = 0x01
MAP_PRIVATE = 0x02
MAP_FIXED = 0x10
MAP_ANONYMOUS = 0x20
MAP_NORESERVE = 0x4000
MS_SYNC = 0x4

_libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int,
                       ctypes.c_int, ctypes.c_int, ctypes.c_long]
_libc.munmap.restype = ctypes.c_int
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
_libc.msync.restype = ctypes.c_int
_libc.msync.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
_MAP_FAILED = ctypes.c_void_p(-1).value


def round_up(n: int, page: int) -> int:
    return -(-n // page) * page


def round_down(n: int, page: int) -> int:
    return n // page * page


class SegmentKind(enum.Enum):
    MEMORY = "memory"
    STORAGE = "storage"


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    range_start: int
    length: int
    file_path: Optional[str] = None
    file_offset: int = 0

    @property
    def range_end(self) -> int:
        return self.range_start + self.length


@dataclass(frozen=True)
class Layout:
    total_size: int
    segments: tuple
    page_size: int

    @property
    def size_rounded(self) -> int:
        return round_up(self.total_size, self.page_size)

    @property
    def memory_bytes(self) -> int:
        return sum(s.length for s in self.segments if s.kind is SegmentKind.MEMORY)

    @property
    def storage_bytes(self) -> int:
        return sum(s.length for s in self.segments if s.kind is SegmentKind.STORAGE)

    def storage_segment(self) -> Optional[Segment]:
        for s in self.segments:
            if s.kind is SegmentKind.STORAGE:
                return s
        return None


def plan_layout(vh: ValidatedHints, size: int, memory_budget: int,
                page_size: int = PAGE_SIZE) -> Layout:
    """Split ``size`` bytes into memory/storage segments.

    The factor is the memory share of the window. It is rounded down to a
    page and the remainder goes to storage; the order hint only permutes
    the two pieces. Auto always puts memory first.
    """
    if size <= 0:
        raise ValueError("size must be positive")
    if memory_budget <= 0:
        raise ValueError("memory_budget must be positive")
    h = vh.hints
    total = round_up(size, page_size)

    if not h.is_storage:
        mem = total
    elif h.factor is None:
        mem = 0
    elif h.factor is AUTO:
        mem = total if size <= memory_budget else min(round_down(memory_budget, page_size), total)
    else:
        mem = min(max(round_down(int(h.factor * size), page_size), 0), total)
    sto = total - mem

    if mem and sto and h.offset % page_size:
        raise InvalidCombination(
            f"combined windows need a page-aligned file offset (got {h.offset})")

    pieces = [(SegmentKind.MEMORY, mem), (SegmentKind.STORAGE, sto)]
    if h.effective_order is Order.STORAGE_FIRST and h.factor is not AUTO:
        pieces.reverse()
    segments = []
    start = 0
    for kind, length in pieces:
        if not length:
            continue
        if kind is SegmentKind.STORAGE:
            segments.append(Segment(kind, start, length, h.filename, h.offset))
        else:
            segments.append(Segment(kind, start, length))
        start += length
    return Layout(size, tuple(segments), page_size)


class DirtyLog:
    """Normalized set of half-open byte intervals."""

    def __init__(self, limit: Optional[int] = None):
        self.limit = limit
        self._starts: list[int] = []
        self._ends: list[int] = []

    @property
    def intervals(self) -> list[tuple[int, int]]:
        return list(zip(self._starts, self._ends))

    def __bool__(self):
        return bool(self._starts)

    def __len__(self):
        return len(self._starts)

    def measure(self) -> int:
        return sum(e - s for s, e in zip(self._starts, self._ends))

    def mark(self, a: int, b: int) -> None:
        if not 0 <= a < b or (self.limit is not None and b > self.limit):
            raise OutOfBounds(f"dirty range [{a},{b}) outside window of {self.limit} bytes")
        # every interval touching [a, b] (adjacency coalesces) is absorbed
        lo = bisect.bisect_left(self._ends, a)
        hi = bisect.bisect_right(self._starts, b)
        if lo < hi:
            a = min(a, self._starts[lo])
            b = max(b, self._ends[hi - 1])
        self._starts[lo:hi] = [a]
        self._ends[lo:hi] = [b]

    def intersect(self, lo: int, hi: int):
        """Yield the parts of the logged intervals inside [lo, hi)."""
        i = bisect.bisect_right(self._ends, lo)
        while i < len(self._starts) and self._starts[i] < hi:
            yield max(self._starts[i], lo), min(self._ends[i], hi)
            i += 1

    def clear(self) -> None:
        self._starts.clear()
        self._ends.clear()


def mark_dirty(log: DirtyLog, a: int, b: int) -> None:
    log.mark(a, b)


@dataclass
class SyncReport:
    bytes_flushed: int = 0


@dataclass
class ReleaseReport:
    bytes_flushed: int = 0
    unlink_error: Optional[UnlinkFailed] = None


@dataclass
class _StorageMap:
    segment: Segment
    fd: int
    address: int          # page-aligned start of the mapping
    length: int           # bytes mapped (page multiple)
    window_start: int     # window offset that ``address`` stands for (may be negative)
    file_start: int       # file offset mapped at ``address``
    file_end: int         # last file byte belonging to the window, exclusive
    private: bool
    is_regular: bool
    initial_length: int


class MappedWindowBacking:
    """A live reservation. ``view`` is a writable memoryview over the
    window bytes; keep no references to it past ``release``."""

    def __init__(self, layout: Layout, reserve_addr: int, reserve_len: int, lead: int,
                 fsync: bool):
        self.layout = layout
        self.size = layout.total_size
        self.page_size = layout.page_size
        self._reserve_addr = reserve_addr
        self._reserve_len = reserve_len
        self.lead = lead
        self.fsync = fsync
        self.base_address = reserve_addr + lead
        self.storage: list[_StorageMap] = []
        self.closed = False
        n = layout.size_rounded
        self._buf = (ctypes.c_ubyte * n).from_address(self.base_address)
        self.view = memoryview(self._buf).cast("B")

    @property
    def initial_file_length(self) -> Optional[int]:
        return self.storage[0].initial_length if self.storage else None

    def segment_at(self, offset: int) -> Segment:
        for s in self.layout.segments:
            if s.range_start <= offset < s.range_end:
                return s
        raise OutOfBounds(offset)


def _mmap(addr, length, prot, flags, fd, offset):
    res = _libc.mmap(addr, length, prot, flags, fd, offset)
    if res is None or res == _MAP_FAILED:
        err = ctypes.get_errno()
        raise MapFailed(f"mmap failed: {os.strerror(err)}", err)
    return res


def _open_target(seg: Segment, used: int, perm: int) -> tuple[int, bool, int]:
    try:
        fd = os.open(seg.file_path, os.O_RDWR | os.O_CREAT, perm)
    except OSError as e:
        raise FileCreateFailed(f"cannot open {seg.file_path}: {e.strerror}", e.errno) from e
    try:
        st = os.fstat(fd)
        regular = stat.S_ISREG(st.st_mode)
        length = st.st_size if regular else os.lseek(fd, 0, os.SEEK_END)
        need = seg.file_offset + used
        if regular and length < need:
            os.ftruncate(fd, need)
        elif not regular and 0 < length < need:
            raise FileResizeFailed(
                f"{seg.file_path}: device holds {length} bytes, window needs {need}")
    except OSError as e:
        os.close(fd)
        raise FileResizeFailed(f"cannot size {seg.file_path}: {e.strerror}", e.errno) from e
    except FileResizeFailed:
        os.close(fd)
        raise
    return fd, regular, length


def materialize(layout: Layout, vh: ValidatedHints, fsync: bool = False) -> MappedWindowBacking:
    """Reserve the window range and map every segment into it in place."""
    page = layout.page_size
    if page % PAGE_SIZE:
        raise ValueError(f"page_size {page} is not a multiple of the OS page {PAGE_SIZE}")
    h = vh.hints
    storage_only = len(layout.segments) == 1 and layout.segments[0].kind is SegmentKind.STORAGE
    lead = h.offset % PAGE_SIZE if storage_only else 0
    reserve_len = round_up(lead + layout.size_rounded, PAGE_SIZE)
    addr = _mmap(None, reserve_len, PROT_NONE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0)
    backing = MappedWindowBacking(layout, addr, reserve_len, lead, fsync)
    try:
        for seg in layout.segments:
            if seg.kind is SegmentKind.MEMORY:
                _mmap(addr + seg.range_start, seg.length, PROT_READ | PROT_WRITE,
                      MAP_SHARED | MAP_ANONYMOUS | MAP_NORESERVE | MAP_FIXED, -1, 0)
                continue
            used = min(seg.length, layout.total_size - seg.range_start)
            fd, regular, initial = _open_target(seg, used, h.file_perm)
            private = h.discard
            flags = (MAP_PRIVATE if private else MAP_SHARED) | MAP_NORESERVE | MAP_FIXED
            map_addr = addr + seg.range_start
            map_len = round_up(lead + seg.length, PAGE_SIZE)
            file_start = seg.file_offset - lead
            sm = _StorageMap(seg, fd, map_addr, map_len, seg.range_start - lead, file_start,
                             seg.file_offset + used, private, regular, initial)
            backing.storage.append(sm)
            _mmap(map_addr, map_len, PROT_READ | PROT_WRITE, flags, fd, file_start)
    except BaseException:
        _teardown(backing)
        raise
    return backing


def _teardown(backing: MappedWindowBacking) -> None:
    if backing.closed:
        return
    backing.closed = True
    try:
        backing.view.release()
    except BufferError:
        # a caller still holds an export; it must not be touched again
        pass
    backing._buf = None
    _libc.munmap(backing._reserve_addr, backing._reserve_len)
    for sm in backing.storage:
        os.close(sm.fd)


def _dirty_pages(backing: MappedWindowBacking, sm: _StorageMap, log: DirtyLog):
    """Merged, page-aligned mapping-relative ranges covering dirty bytes."""
    seg = sm.segment
    page = PAGE_SIZE
    ranges: list[list[int]] = []
    for a, b in log.intersect(seg.range_start, seg.range_end):
        lo = round_down(a - sm.window_start, page)
        hi = round_up(b - sm.window_start, page)
        if ranges and lo <= ranges[-1][1]:
            ranges[-1][1] = max(ranges[-1][1], hi)
        else:
            ranges.append([lo, hi])
    return ranges


def dirty_page_bytes(backing: MappedWindowBacking, log: DirtyLog) -> int:
    """Bytes the next sync would flush."""
    return sum(hi - lo for sm in backing.storage for lo, hi in _dirty_pages(backing, sm, log))


def sync_storage(backing: MappedWindowBacking, log: DirtyLog) -> SyncReport:
    """Flush dirty ranges that fall on storage; drop the rest. Blocks until
    the data is on the device."""
    if backing is None or not log:
        if log is not None:
            log.clear()
        return SyncReport(0)
    flushed = 0
    for sm in backing.storage:
        touched = False
        for lo, hi in _dirty_pages(backing, sm, log):
            if sm.private:
                f_lo = max(sm.file_start + lo, sm.segment.file_offset)
                f_hi = min(sm.file_start + hi, sm.file_end)
                if f_lo < f_hi:
                    start = f_lo - sm.file_start + sm.window_start
                    data = backing.view[start:start + (f_hi - f_lo)]
                    try:
                        os.pwrite(sm.fd, data, f_lo)
                    except OSError as e:
                        raise FlushFailed(f"write-back failed: {e.strerror}", e.errno) from e
            elif _libc.msync(sm.address + lo, hi - lo, MS_SYNC) != 0:
                err = ctypes.get_errno()
                raise FlushFailed(f"msync failed: {os.strerror(err)}", err)
            flushed += hi - lo
            touched = True
        if touched and (sm.private or backing.fsync):
            try:
                os.fsync(sm.fd)
            except OSError as e:
                raise FlushFailed(f"fsync failed: {e.strerror}", e.errno) from e
    log.clear()
    return SyncReport(flushed)


def release(backing: MappedWindowBacking, log: DirtyLog, vh: ValidatedHints) -> ReleaseReport:
    """Final sync (unless discard), unmap, then unlink if requested."""
    report = ReleaseReport()
    if backing is None or backing.closed:
        return report
    try:
        if not vh.hints.discard:
            report.bytes_flushed = sync_storage(backing, log).bytes_flushed
    finally:
        storage = list(backing.storage)
        _teardown(backing)
        log.clear()
    if vh.hints.unlink:
        for sm in storage:
            if not sm.is_regular:
                continue
            try:
                os.unlink(sm.segment.file_path)
            except OSError as e:
                report.unlink_error = UnlinkFailed(
                    f"cannot unlink {sm.segment.file_path}: {e.strerror}", e.errno)
                logger.warning("%s", report.unlink_error)
    return report
