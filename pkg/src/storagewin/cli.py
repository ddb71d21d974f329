"""Command line entry point: ``storagewin {mstream,dht,hacc,inspect}``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import re
import sys
import time
from typing import Callable, Optional, Sequence

from . import errors
from .errors import ConfigInvalid, OutOfBounds, StorageWinError, VerificationFailed
from .fabric.group import (DEFAULT_CONNECT_TIMEOUT, bind_listener, create_local_groups,
                           create_socket_group, run_ranks)
from .hints import HINT_KEYS, AllocationHints, parse_hints
from .mstream import BenchConfig, BenchReport, Kernel, run_kernel, write_csv
from .window import allocate, free

log = logging.getLogger("storagewin")

EXIT_INTERNAL = 10

_SIZE_RE = re.compile(r"^\s*(\d+)\s*([kmgt]?)(i?)b?\s*$", re.IGNORECASE)
_POW = {"": 0, "k": 1, "m": 2, "g": 3, "t": 4}


def parse_size(text: str) -> int:
    """``4096``, ``64MiB``, ``1GiB`` (binary) or ``10MB`` (decimal)."""
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ConfigInvalid(f"bad size {text!r}")
    n, unit, binary = m.groups()
    # "10MB" is decimal; "10MiB" and a bare "10M" are binary
    decimal = unit and not binary and str(text).strip()[-1] in "bB"
    return int(n) * (1000 if decimal else 1024) ** _POW[unit.lower()]


def read_config(path: str) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise ConfigInvalid(f"cannot read config {path}: {e.strerror}") from e
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigInvalid(f"{path}:{n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigInvalid(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser, *, storage: bool = True) -> None:
    p.add_argument("--config", help="key=value file; command line flags win")
    p.add_argument("--ranks", type=int, default=1, help="ranks in local mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV report path (default stdout)")
    p.add_argument("--memory-budget", type=parse_size,
                   help="node memory budget used by --factor auto")
    p.add_argument("--rank", type=int, help="socket mode: this process's rank")
    p.add_argument("--listen", help="socket mode: host:port to listen on")
    p.add_argument("--peers", help="socket mode: comma-separated host:port of all ranks")
    p.add_argument("--connect-timeout", type=float, default=DEFAULT_CONNECT_TIMEOUT)
    p.add_argument("--fsync", action="store_true", help="fsync after every sync")
    p.add_argument("-v", "--verbose", action="store_true")
    if storage:
        p.add_argument("--alloc", choices=["memory", "storage"], default="memory")
        p.add_argument("--file", help="backing file (per-rank files get a suffix)")
        p.add_argument("--offset", help="byte offset into the backing file")
        p.add_argument("--factor", help="memory share of a combined window, or 'auto'")
        p.add_argument("--order", choices=["memory_first", "storage_first"])
        p.add_argument("--unlink", action="store_true")
        p.add_argument("--discard", action="store_true")
        p.add_argument("--hint", action="append", default=[], metavar="KEY=VALUE",
                       help="raw allocation hint, may repeat")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="storagewin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mstream", help="segment read/write bandwidth sweeps")
    _add_common(p)
    p.add_argument("--size", type=parse_size, default=parse_size("64MiB"))
    p.add_argument("--segment", type=parse_size, default=parse_size("1MiB"))
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--kernel", default="SEQ", help="SEQ, PAD, RND, MIX, comma list or 'all'")

    p = sub.add_parser("dht", help="fill a distributed hash table and check it")
    _add_common(p)
    p.add_argument("--lv", type=int, default=1000, help="elements per local volume")
    p.add_argument("--heap-factor", type=int, default=4)
    p.add_argument("--fill", type=float, default=0.8)
    p.add_argument("--checkpoint", action="store_true", help="checkpoint after the fill")
    p.add_argument("--no-verify", action="store_true", help="skip the oracle comparison")

    p = sub.add_parser("hacc", help="particle checkpoint/restart round trip")
    _add_common(p, storage=False)
    p.add_argument("--particles", type=int, default=10000, help="particles per rank")
    p.add_argument("--file", required=False, help="global shared checkpoint file")
    p.add_argument("--reference", help="also write this file through plain file I/O and compare")

    p = sub.add_parser("inspect", help="hex dump of a raw window image")
    p.add_argument("path")
    p.add_argument("--offset", type=parse_size, default=0)
    p.add_argument("--len", dest="length", type=parse_size, default=64)
    p.add_argument("--raw", action="store_true", help="bytes only, no int64 column")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    conf = read_config(args.config)
    hints = [f"{k}={v}" for k, v in conf.items() if k in HINT_KEYS]
    known = vars(args)
    defaults = {}
    for key, value in conf.items():
        if key in HINT_KEYS:
            continue
        dest = key.replace("-", "_")
        if dest not in known or dest in ("command", "config"):
            raise ConfigInvalid(f"{args.config}: unknown key {key!r}")
        flag = "--" + dest.replace("_", "-")
        defaults[dest] = (flag, value)
    extra: list[str] = []
    for dest, (flag, value) in defaults.items():
        if isinstance(known[dest], bool):
            if value.lower() in ("1", "true", "yes", "on"):
                extra.append(flag)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise ConfigInvalid(f"{args.config}: {dest} expects a boolean")
        else:
            extra += [flag, value]
    for h in hints:
        extra += ["--hint", h]
    # config first, then the real command line so it wins
    return parser.parse_args([argv[0], *extra, *argv[1:]])


def hints_from_args(args: argparse.Namespace) -> AllocationHints:
    pairs: list[tuple[str, str]] = [("alloc_type", args.alloc)]
    if args.file:
        pairs.append(("storage_alloc_filename", args.file))
    if args.offset is not None:
        pairs.append(("storage_alloc_offset", str(parse_size(args.offset))))
    if args.factor is not None:
        pairs.append(("storage_alloc_factor", args.factor))
    if args.order:
        pairs.append(("storage_alloc_order", args.order))
    if args.unlink:
        pairs.append(("storage_alloc_unlink", "true"))
    if args.discard:
        pairs.append(("storage_alloc_discard", "true"))
    for raw in args.hint:
        key, sep, value = raw.partition("=")
        if not sep:
            raise ConfigInvalid(f"--hint expects KEY=VALUE, got {raw!r}")
        pairs.append((key.strip(), value.strip()))
    return parse_hints(pairs)


def _rank_results(args, fn: Callable) -> Optional[list]:
    """Run ``fn(group)`` on every rank; returns all results on the reporting
    process (rank 0) and None elsewhere."""
    if args.rank is None and args.peers is None:
        if args.ranks < 1:
            raise ConfigInvalid("--ranks must be >= 1")
        groups = create_local_groups(args.ranks, args.memory_budget)
        return run_ranks(groups, fn)
    if args.rank is None or not args.peers:
        raise ConfigInvalid("socket mode needs --rank and --peers")
    peers = [p.strip() for p in args.peers.split(",") if p.strip()]
    if not 0 <= args.rank < len(peers):
        raise ConfigInvalid(f"--rank {args.rank} outside {len(peers)} peers")
    listener = bind_listener(args.listen or peers[args.rank])
    group = create_socket_group(args.rank, peers, listener, timeout=args.connect_timeout,
                                memory_budget=args.memory_budget)
    try:
        mine = fn(group)
        everything = group.allgather_obj(mine)
        group.barrier()
    finally:
        group.close()
    return everything if args.rank == 0 else None


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path is None:
        yield sys.stdout
        return
    with open(path, "w", newline="") as fh:
        yield fh


def _kernels(text: str) -> list[Kernel]:
    if text.strip().lower() == "all":
        return list(Kernel)
    try:
        return [Kernel(k.strip().upper()) for k in text.split(",") if k.strip()]
    except ValueError as e:
        raise ConfigInvalid(f"unknown kernel in {text!r}") from e


def cmd_mstream(args) -> int:
    hints = hints_from_args(args)
    configs = [BenchConfig(args.size, args.segment, args.iters, k, hints, args.seed)
               for k in _kernels(args.kernel)]
    for cfg in configs:
        cfg.validate()

    def body(group):
        out = []
        for cfg in configs:
            h = cfg.hints
            if group.n_ranks > 1 and h.filename:
                h = h.with_(filename=f"{h.filename}.{group.my_rank}")
            w = allocate(group, cfg.window_size, 1, h, fsync=args.fsync)
            try:
                out.append(run_kernel(cfg, w))
            finally:
                free(w)
        # JSON-friendly for socket mode
        return [(r.kernel.value, r.window_size, r.segment_size, r.iterations, r.bytes_moved,
                 r.elapsed, r.sync_elapsed, r.bytes_flushed, r.per_iteration) for r in out]

    results = _rank_results(args, body)
    if results is None:
        return 0
    # the report covers rank 0; every rank runs the same sweep
    reports = [BenchReport(Kernel(k), *rest) for k, *rest in results[0]]
    with _output(args.out) as fh:
        write_csv(reports, fh)
    return 0


DHT_COLUMNS = ["rank", "attempted", "new_slots", "updated", "heap_slots", "table_full",
               "bytes_flushed", "items", "elapsed_s"]


def cmd_dht(args) -> int:
    from .apps.dht import (DhtConfig, dht_checkpoint, dht_create, dht_fill, dht_free,
                           local_items, reference_map)
    cfg = DhtConfig(args.lv, args.heap_factor, args.fill, hints_from_args(args), args.seed,
                    args.fsync)
    if not 0.0 <= cfg.fill_fraction:
        raise ConfigInvalid("--fill must be >= 0")

    def body(group):
        t = dht_create(group, cfg)
        try:
            t0 = time.perf_counter()
            st = dht_fill(t)
            flushed = dht_checkpoint(t).bytes_flushed if args.checkpoint else 0
            dt = time.perf_counter() - t0
            items = local_items(t)
            group.barrier()
        finally:
            dht_free(t)
        return {"row": [group.my_rank, st.attempted, st.new_slots, st.updated, st.heap_slots,
                        st.table_full, flushed, len(items), f"{dt:.6f}"],
                "items": [[k, v] for k, v in items.items()],
                "full": st.table_full}

    results = _rank_results(args, body)
    if results is None:
        return 0
    n = len(results)
    status = "skipped"
    if not args.no_verify:
        merged: dict[int, int] = {}
        for r in results:
            merged.update((k, v) for k, v in r["items"])
        ref = reference_map(cfg, n)
        if any(r["full"] for r in results):
            bad = sum(1 for k, v in merged.items() if ref.get(k) != v)
        else:
            bad = len(set(ref.items()) ^ set(merged.items()))
        status = "ok" if bad == 0 else f"{bad} discrepancies"
    with _output(args.out) as fh:
        wr = csv.writer(fh)
        wr.writerow(DHT_COLUMNS)
        for r in results:
            wr.writerow(r["row"])
        totals = [sum(r["row"][i] for r in results) for i in range(1, 8)]
        wr.writerow(["total", *totals, ""])
    print(f"dht oracle: {status}", file=sys.stderr)
    if status not in ("ok", "skipped"):
        raise VerificationFailed(f"DHT content differs from the reference map: {status}")
    return 0


HACC_COLUMNS = ["rank", "particles", "bytes", "checkpoint_s", "restart_s", "identical"]


def cmd_hacc(args) -> int:
    from .apps.hacc import (RECORD_SIZE, generate_particles, hacc_checkpoint, hacc_restart,
                            hacc_window, reference_checkpoint)
    if not args.file:
        raise ConfigInvalid("hacc needs --file")
    if args.particles < 0:
        raise ConfigInvalid("--particles must be >= 0")
    if args.reference and os.path.exists(args.reference):
        os.unlink(args.reference)

    def body(group):
        p = generate_particles(args.particles, args.seed, group.my_rank)
        t0 = time.perf_counter()
        w = hacc_window(group, args.file, p.count, fsync=args.fsync)
        hacc_checkpoint(group, p, w)
        free(w)
        t1 = time.perf_counter()
        w = hacc_window(group, args.file, p.count, restart=True)
        q = hacc_restart(group, w)
        free(w)
        t2 = time.perf_counter()
        if args.reference:
            reference_checkpoint(args.reference, group.my_rank, p)
        return [group.my_rank, p.count, p.count * RECORD_SIZE, f"{t1 - t0:.6f}",
                f"{t2 - t1:.6f}", int(p == q)]

    rows = _rank_results(args, body)
    if rows is None:
        return 0
    with _output(args.out) as fh:
        wr = csv.writer(fh)
        wr.writerow(HACC_COLUMNS)
        wr.writerows(rows)
    if not all(r[-1] for r in rows):
        raise VerificationFailed("restart did not reproduce the checkpointed particles")
    if args.reference:
        with open(args.file, "rb") as a, open(args.reference, "rb") as b:
            if a.read() != b.read():
                raise VerificationFailed("window file differs from the plain-file reference")
    return 0


def hexdump(data: bytes, base: int = 0, int64: bool = True) -> list[str]:
    """Eight bytes per line; a full line also shows its int64-LE value."""
    lines = []
    for i in range(0, len(data), 8):
        chunk = data[i:i + 8]
        line = " ".join(f"{b:02x}" for b in chunk)
        if int64 and len(chunk) == 8:
            line += f" | {int.from_bytes(chunk, 'little', signed=True)}"
        lines.append(line)
    return lines


def cmd_inspect(args) -> int:
    size = os.path.getsize(args.path)
    if args.offset > size or (args.length and args.offset >= size):
        raise OutOfBounds(f"offset {args.offset} beyond end of {args.path} ({size} bytes)")
    with open(args.path, "rb") as fh:
        fh.seek(args.offset)
        data = fh.read(args.length)
    for line in hexdump(data, args.offset, not args.raw):
        print(line)
    return 0


COMMANDS = {"mstream": cmd_mstream, "dht": cmd_dht, "hacc": cmd_hacc, "inspect": cmd_inspect}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        if not argv or argv[0] in ("-h", "--help"):
            parser.parse_args(argv or ["--help"])
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except StorageWinError as e:
        print(f"storagewin: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"storagewin: {type(e).__name__}: {e}", file=sys.stderr)
        return errors.MappingError.exit_code
    except Exception as e:  # noqa: BLE001 - last-resort diagnostic
        print(f"storagewin: internal error: {e!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
