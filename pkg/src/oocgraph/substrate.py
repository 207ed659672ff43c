"""Block-oriented external-memory primitives.

Everything that touches scratch disk goes through this module: fixed-record
external arrays, a stable multiway merge sort, a spill-to-disk priority
queue, a memory-budget tracker, and the ledger that prices every transfer
in logical blocks of ``block_size_bytes``.

The ledger counts logical block transfers (ceil(bytes / B) per sequential
read or write session), not physical device I/O, so the numbers are
reproducible on any machine regardless of page cache behaviour.
"""

from __future__ import annotations

import heapq
import itertools
import json
import shutil
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetExceededError, ConfigError, QueueEmptyError, StorageError

DEFAULT_BLOCK_SIZE = 1 << 20      # 1 MiB
DEFAULT_MEMORY_BUDGET = 256 << 20

# Physical chunk size used for file reads/writes; independent of the logical
# block size, which only drives accounting and buffer sizing.
_PHYSICAL_CHUNK_BYTES = 1 << 20


def ceil_div(a, b):
    return -(-int(a) // int(b))


@dataclass(frozen=True)
class BlockConfig:
    """Machine model parameters: logical block size and internal memory."""

    block_size_bytes: int = DEFAULT_BLOCK_SIZE
    memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        if self.block_size_bytes < 1:
            raise ConfigError("block size must be positive")
        if self.memory_budget_bytes < 4 * self.block_size_bytes:
            raise ConfigError(
                "memory budget must be at least 4 blocks "
                f"({self.memory_budget_bytes} < 4 * {self.block_size_bytes})"
            )

    def elements_per_block(self, record_size):
        n = self.block_size_bytes // int(record_size)
        if n < 1:
            raise ConfigError(
                f"record of {record_size} bytes does not fit a "
                f"{self.block_size_bytes}-byte block"
            )
        return n


@dataclass(frozen=True)
class IOSnapshot:
    """Immutable view of ledger counters at one point in time."""

    blocks_read: int = 0
    blocks_written: int = 0
    read_by_tag: dict = field(default_factory=dict)
    written_by_tag: dict = field(default_factory=dict)

    @property
    def blocks_total(self):
        return self.blocks_read + self.blocks_written

    def delta(self, earlier):
        """Counter increase since an ``earlier`` snapshot."""
        return IOSnapshot(
            blocks_read=self.blocks_read - earlier.blocks_read,
            blocks_written=self.blocks_written - earlier.blocks_written,
            read_by_tag={
                t: v - earlier.read_by_tag.get(t, 0)
                for t, v in self.read_by_tag.items()
                if v - earlier.read_by_tag.get(t, 0)
            },
            written_by_tag={
                t: v - earlier.written_by_tag.get(t, 0)
                for t, v in self.written_by_tag.items()
                if v - earlier.written_by_tag.get(t, 0)
            },
        )


class IOLedger:
    """Counts logical block transfers, broken down by tag (scan/sort/pq).

    Counters only ever increase; concurrent increments are safe.
    """

    def __init__(self, block_size_bytes):
        self.block_size_bytes = int(block_size_bytes)
        self._lock = threading.Lock()
        self._read = {}
        self._written = {}

    def charge_read(self, nbytes, tag="scan"):
        return self._charge(self._read, ceil_div(nbytes, self.block_size_bytes), tag)

    def charge_write(self, nbytes, tag="scan"):
        return self._charge(self._written, ceil_div(nbytes, self.block_size_bytes), tag)

    def charge_read_blocks(self, nblocks, tag="scan"):
        return self._charge(self._read, int(nblocks), tag)

    def charge_write_blocks(self, nblocks, tag="scan"):
        return self._charge(self._written, int(nblocks), tag)

    def _charge(self, table, nblocks, tag):
        if nblocks < 0:
            raise ValueError("ledger charges are non-negative")
        if nblocks:
            with self._lock:
                table[tag] = table.get(tag, 0) + nblocks
        return nblocks

    def snapshot(self):
        with self._lock:
            return IOSnapshot(
                blocks_read=sum(self._read.values()),
                blocks_written=sum(self._written.values()),
                read_by_tag=dict(self._read),
                written_by_tag=dict(self._written),
            )


class MemoryBudget:
    """Tracks named buffer reservations against a hard byte limit."""

    def __init__(self, limit_bytes):
        self.limit_bytes = int(limit_bytes)
        self.current_bytes = 0
        self.peak_bytes = 0
        self._lock = threading.Lock()

    def acquire(self, nbytes, label=""):
        nbytes = int(nbytes)
        with self._lock:
            if self.current_bytes + nbytes > self.limit_bytes:
                raise BudgetExceededError(
                    f"allocation of {nbytes} bytes for {label!r} exceeds budget: "
                    f"{self.current_bytes} + {nbytes} > {self.limit_bytes}"
                )
            self.current_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        return nbytes

    def release(self, nbytes):
        with self._lock:
            self.current_bytes -= int(nbytes)
            assert self.current_bytes >= 0, "budget release underflow"

    @contextmanager
    def reserve(self, nbytes, label=""):
        self.acquire(nbytes, label)
        try:
            yield
        finally:
            self.release(nbytes)


class Runtime:
    """Bundle of config, ledger, budget and scratch directory.

    One Runtime owns one scratch namespace; arrays and queues created
    through it share a single ledger so deltas are easy to reason about.
    """

    def __init__(self, config=None, scratch_dir=None):
        self.config = config if config is not None else BlockConfig()
        self.ledger = IOLedger(self.config.block_size_bytes)
        self.budget = MemoryBudget(self.config.memory_budget_bytes)
        self._own_scratch = scratch_dir is None
        if scratch_dir is None:
            self.scratch_dir = Path(tempfile.mkdtemp(prefix="oocgraph-"))
        else:
            self.scratch_dir = Path(scratch_dir)
            self.scratch_dir.mkdir(parents=True, exist_ok=True)
        self._seq = itertools.count()

    def io_report(self):
        return self.ledger.snapshot()

    def scratch_path(self, name=None, suffix=".bin"):
        if name is None:
            name = f"tmp{next(self._seq):06d}{suffix}"
        return self.scratch_dir / name

    def new_array(self, dtype, name=None):
        """Create a fresh, empty external array in the scratch directory."""
        path = self.scratch_path(name)
        for p in (path, _meta_path(path)):
            if p.exists():
                p.unlink()
        return ExternalArray(path, dtype, self, _fresh=True)

    def close(self):
        if self._own_scratch and self.scratch_dir.exists():
            shutil.rmtree(self.scratch_dir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _meta_path(path):
    return Path(str(path) + ".meta.json")


class ExternalArray:
    """Fixed-size records in a flat little-endian file.

    Only sequential access is offered: scans, appends (through a writer
    session) and whole-array sorts.  A companion ``.meta.json`` file records
    the record size and length.  ``forward_reader`` additionally allows a
    monotone partial scan (strictly forward seeks) for semi-external callers
    that skip uninteresting stretches; it is not random access.
    """

    def __init__(self, path, dtype, runtime, _fresh=False):
        self.path = Path(path)
        self.dtype = np.dtype(dtype)
        self.runtime = runtime
        self.record_size = self.dtype.itemsize
        self.length = 0
        self._writer_open = False
        if not _fresh and _meta_path(self.path).exists():
            self._load_meta()

    # -- metadata ---------------------------------------------------------

    @classmethod
    def open(cls, path, dtype, runtime):
        path = Path(path)
        if not _meta_path(path).exists():
            raise StorageError(f"no metadata for external array at {path}")
        return cls(path, dtype, runtime)

    def _load_meta(self):
        meta = json.loads(_meta_path(self.path).read_text())
        if meta["record_size"] != self.record_size:
            raise StorageError(
                f"{self.path}: record size mismatch "
                f"(file {meta['record_size']}, expected {self.record_size})"
            )
        self.length = int(meta["length"])

    def _write_meta(self):
        _meta_path(self.path).write_text(
            json.dumps({"record_size": self.record_size, "length": self.length})
        )

    @property
    def nbytes(self):
        return self.length * self.record_size

    def _check_backing(self):
        if self.length == 0:
            return
        if not self.path.exists():
            raise StorageError(f"backing file missing: {self.path}")
        actual = self.path.stat().st_size
        if actual < self.nbytes:
            raise StorageError(
                f"backing file truncated: {self.path} has {actual} bytes, "
                f"metadata says {self.nbytes}"
            )

    def delete(self):
        for p in (self.path, _meta_path(self.path)):
            if p.exists():
                p.unlink()
        self.length = 0

    def truncate(self):
        """Drop all records (bucket reuse between passes)."""
        assert not self._writer_open
        if self.path.exists():
            self.path.unlink()
        self.length = 0
        self._write_meta()

    # -- sequential access ------------------------------------------------

    def writer(self, tag="scan"):
        return ArrayWriter(self, tag)

    def scan_chunks(self, tag="scan", records_per_chunk=None):
        """Yield the records in storage order as numpy chunks.

        The whole scan is charged ceil(length * record_size / B) block reads
        up front, which is the exact logical cost of reading the array once.
        """
        assert not self._writer_open, "scan while a writer session is open"
        self._check_backing()
        if records_per_chunk is None:
            records_per_chunk = max(
                1, _PHYSICAL_CHUNK_BYTES // self.record_size
            )
        if self.length == 0:
            self.runtime.ledger.charge_read(0, tag)
            return
        self.runtime.ledger.charge_read(self.nbytes, tag)
        remaining = self.length
        with open(self.path, "rb") as f:
            while remaining > 0:
                count = min(remaining, records_per_chunk)
                chunk = np.fromfile(f, dtype=self.dtype, count=count)
                if len(chunk) < count:
                    raise StorageError(f"short read from {self.path}")
                remaining -= count
                yield chunk

    def scan(self, visitor, tag="scan"):
        """Invoke ``visitor(record)`` once per record in storage order."""
        for chunk in self.scan_chunks(tag=tag):
            for rec in chunk:
                visitor(rec)

    def read_all(self, tag="scan"):
        """One whole-array scan materialised in memory (semi-external use).

        The caller is responsible for reserving budget for the result.
        """
        parts = list(self.scan_chunks(tag=tag))
        if not parts:
            return np.empty(0, dtype=self.dtype)
        return np.concatenate(parts)

    def forward_reader(self, tag="scan"):
        return ForwardReader(self, tag)

    def replace_with(self, other):
        """Adopt another array's backing file (atomic swap of contents)."""
        assert other.dtype == self.dtype
        self.delete()
        other.path.rename(self.path)
        _meta_path(other.path).rename(_meta_path(self.path))
        self.length = other.length


class ArrayWriter:
    """Append session: buffers one block, charges ceil(bytes/B) on close."""

    def __init__(self, array, tag):
        if array._writer_open:
            raise StorageError(f"writer already open for {array.path}")
        self.array = array
        self.tag = tag
        rt = array.runtime
        self._cap = rt.config.elements_per_block(array.record_size)
        self._buf = np.empty(self._cap, dtype=array.dtype)
        self._buf_bytes = self._buf.nbytes
        rt.budget.acquire(self._buf_bytes, "array write buffer")
        self._fill = 0
        self._appended = 0
        self._file = open(array.path, "ab")
        self._closed = False
        array._writer_open = True

    def append(self, records):
        if not isinstance(records, np.ndarray):
            records = np.array(records, dtype=self.array.dtype)
        if records.dtype != self.array.dtype:
            records = records.astype(self.array.dtype)
        n = len(records)
        self._appended += n
        pos = 0
        while pos < n:
            take = min(n - pos, self._cap - self._fill)
            self._buf[self._fill:self._fill + take] = records[pos:pos + take]
            self._fill += take
            pos += take
            if self._fill == self._cap:
                self._buf.tofile(self._file)
                self._fill = 0

    def append_one(self, *fields):
        self._buf[self._fill] = fields
        self._fill += 1
        self._appended += 1
        if self._fill == self._cap:
            self._buf.tofile(self._file)
            self._fill = 0

    def close(self):
        if self._closed:
            return
        if self._fill:
            self._buf[:self._fill].tofile(self._file)
            self._fill = 0
        self._file.close()
        arr = self.array
        rt = arr.runtime
        rt.budget.release(self._buf_bytes)
        rt.ledger.charge_write(self._appended * arr.record_size, self.tag)
        arr.length += self._appended
        arr._write_meta()
        arr._writer_open = False
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ForwardReader:
    """Monotone partial scan with block-granular charging.

    Each logical block is charged at most once per reader; requests must
    move strictly forward (start positions non-decreasing), which keeps the
    access pattern a subset of one sequential scan.
    """

    def __init__(self, array, tag):
        array._check_backing()
        self.array = array
        self.tag = tag
        self._file = open(array.path, "rb") if array.length else None
        self._next_uncharged_block = 0
        self._last_start = -1

    def read(self, start, count):
        arr = self.array
        if count <= 0:
            return np.empty(0, dtype=arr.dtype)
        if start < self._last_start:
            raise StorageError("forward reader moved backwards")
        self._last_start = start
        end = min(start + count, arr.length)
        if end <= start:
            return np.empty(0, dtype=arr.dtype)
        rs, bs = arr.record_size, arr.runtime.config.block_size_bytes
        first_block = (start * rs) // bs
        last_block = (end * rs - 1) // bs
        lo = max(first_block, self._next_uncharged_block)
        if last_block >= lo:
            arr.runtime.ledger.charge_read_blocks(last_block - lo + 1, self.tag)
            self._next_uncharged_block = last_block + 1
        self._file.seek(start * rs)
        out = np.fromfile(self._file, dtype=arr.dtype, count=end - start)
        if len(out) != end - start:
            raise StorageError(f"short read from {arr.path}")
        return out

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- sorting ---------------------------------------------------------------


def _key_columns(chunk, order):
    return [chunk[f].astype(np.uint64, copy=False) for f in order]


def _lexsort_indices(chunk, order):
    # lexsort sorts by the last key first; reverse so order[0] is primary.
    return np.lexsort(tuple(reversed(_key_columns(chunk, order))))


class _RunCursor:
    """Reads one sorted run chunk by chunk during a merge."""

    def __init__(self, array, order, tag, records_per_fetch):
        self.array = array
        self.order = order
        self.tag = tag
        self.per_fetch = records_per_fetch
        self.pos = 0
        self.chunk = None
        self.chunk_pos = 0
        self._file = open(array.path, "rb")
        self._fetch()

    def _fetch(self):
        remaining = self.array.length - self.pos
        if remaining <= 0:
            self.chunk = None
            return
        count = min(remaining, self.per_fetch)
        self._file.seek(self.pos * self.array.record_size)
        self.chunk = np.fromfile(self._file, dtype=self.array.dtype, count=count)
        self.array.runtime.ledger.charge_read(
            count * self.array.record_size, self.tag
        )
        self.pos += count
        self.chunk_pos = 0

    @property
    def exhausted(self):
        return self.chunk is None

    def remaining_view(self):
        return self.chunk[self.chunk_pos:]

    def advance(self, n):
        self.chunk_pos += n
        if self.chunk_pos >= len(self.chunk):
            self._fetch()

    def head_key(self):
        rec = self.chunk[self.chunk_pos]
        return tuple(int(rec[f]) for f in self.order)

    def last_key(self):
        rec = self.chunk[-1]
        return tuple(int(rec[f]) for f in self.order)

    def close(self):
        self._file.close()


def _take_upto(view, order, key, inclusive):
    """Number of leading records of a sorted view with key </<= ``key``."""
    if len(order) == 1:
        side = "right" if inclusive else "left"
        return int(np.searchsorted(view[order[0]], key[0], side=side))
    lo, hi = 0, len(view)
    while lo < hi:
        mid = (lo + hi) // 2
        rec = view[mid]
        k = tuple(int(rec[f]) for f in order)
        if k < key or (inclusive and k == key):
            lo = mid + 1
        else:
            hi = mid
    return lo


def _merge_runs(runs, order, out, tag):
    """Stable k-way merge of sorted runs into ``out`` (an open writer target).

    Ties across runs resolve by run index, so a stable run formation yields
    a stable total sort.
    """
    rt = out.runtime
    per_fetch = rt.config.elements_per_block(runs[0].record_size)
    cursors = [_RunCursor(r, order, tag, per_fetch) for r in runs]
    with out.writer(tag=tag) as w:
        alive = [c for c in cursors if not c.exhausted]
        while alive:
            if len(alive) == 1:
                c = alive[0]
                while not c.exhausted:
                    w.append(c.remaining_view())
                    c.advance(len(c.remaining_view()))
                break
            cutoff = min(c.last_key() for c in alive)
            parts = []
            emitted_strict = 0
            for i, c in enumerate(alive):
                view = c.remaining_view()
                take = _take_upto(view, order, cutoff, inclusive=False)
                if take:
                    parts.append((i, view[:take]))
                    emitted_strict += take
            if emitted_strict:
                merged = _merge_sorted_parts(parts, order)
                w.append(merged)
                for i, part in parts:
                    alive[i].advance(len(part))
            else:
                # Every alive run's chunk tops out at the cutoff key: drain
                # all records equal to it in run order to preserve stability.
                for c in alive:
                    while not c.exhausted:
                        view = c.remaining_view()
                        take = _take_upto(view, order, cutoff, inclusive=True)
                        if take == 0:
                            break
                        w.append(view[:take])
                        c.advance(take)
            alive = [c for c in alive if not c.exhausted]
    for c in cursors:
        c.close()


def _merge_sorted_parts(parts, order):
    """Merge already-sorted numpy parts; ties keep part order (stability)."""
    if len(parts) == 1:
        return parts[0][1]
    arrays = [p for _, p in parts]
    src = np.concatenate(arrays)
    run_idx = np.concatenate(
        [np.full(len(a), i, dtype=np.uint32) for i, (_, a) in enumerate(parts)]
    )
    # lexsort: last key is primary, so order[0] goes last and run index first.
    idx = np.lexsort((run_idx,) + tuple(reversed([src[f] for f in order])))
    return src[idx]


def external_sort(array, order, tag="sort"):
    """Stable merge sort of an external array by the given field names.

    Returns a new array; the input is left untouched.  Run formation uses
    about a third of the memory budget, merging uses one block per run plus
    an output block, all reserved against the budget tracker.
    """
    rt = array.runtime
    order = tuple(order)
    out_cls_dtype = array.dtype
    result = rt.new_array(out_cls_dtype)
    if array.length == 0:
        with result.writer(tag=tag):
            pass
        return result

    budget = rt.config.memory_budget_bytes
    block = rt.config.block_size_bytes
    # room for the chunk itself, its key columns and the sorted copy
    run_records = max(1, (budget // 3) // array.record_size)
    fan_in = budget // (2 * block) - 1
    if fan_in < 2:
        raise ConfigError("memory budget admits no 2-way merge")

    runs = []
    with rt.budget.reserve(min(run_records * array.record_size * 3, budget), "sort runs"):
        for chunk in array.scan_chunks(tag=tag, records_per_chunk=run_records):
            idx = _lexsort_indices(chunk, order)
            run = rt.new_array(array.dtype)
            with run.writer(tag=tag) as w:
                w.append(chunk[idx])
            runs.append(run)

    while len(runs) > 1:
        merged = []
        for i in range(0, len(runs), fan_in):
            group = runs[i:i + fan_in]
            if len(group) == 1:
                merged.append(group[0])
                continue
            target = rt.new_array(array.dtype)
            with rt.budget.reserve(2 * (len(group) + 1) * block, "merge buffers"):
                _merge_runs(group, order, target, tag)
            for g in group:
                g.delete()
            merged.append(target)
        runs = merged

    result.replace_with(runs[0])
    return result


# -- external priority queue -------------------------------------------------


class ExternalPriorityQueue:
    """Min-priority queue over (uint64 key, fixed payload) records.

    Small insert volumes live in an in-memory heap; overflow is flushed as
    sorted runs on disk which are lazily merged.  Records with equal keys
    come back before any larger key; among equal keys the order is
    insertion order (runs are older than the heap), which keeps drains
    deterministic.
    """

    def __init__(self, runtime, payload_fields=(), name=None):
        self.runtime = runtime
        fields = [("key", "<u8")] + list(payload_fields)
        self.dtype = np.dtype(fields)
        self.payload_names = [f[0] for f in payload_fields]
        self._heap = []
        self._seq = itertools.count()
        self._runs = []
        self._cursors = []
        cfg = runtime.config
        self._spill_records = max(
            cfg.elements_per_block(self.dtype.itemsize),
            (cfg.memory_budget_bytes // 8) // self.dtype.itemsize,
        )
        self._max_runs = max(2, cfg.memory_budget_bytes // (2 * cfg.block_size_bytes) - 1)
        self._heap_bytes = self._spill_records * self.dtype.itemsize
        runtime.budget.acquire(self._heap_bytes, "pq insert buffer")
        self._per_fetch = cfg.elements_per_block(self.dtype.itemsize)
        self.size = 0
        self._name = name

    # heap entries are (key, seq, payload tuple); seq keeps FIFO among equals

    def push(self, key, *payload):
        heapq.heappush(self._heap, (int(key), next(self._seq), payload))
        self.size += 1
        if len(self._heap) >= self._spill_records:
            self._spill()

    def push_many(self, keys, *payload_columns):
        n = len(keys)
        if n == 0:
            return
        cols = [np.asarray(c) for c in payload_columns]
        for i in range(n):
            heapq.heappush(
                self._heap,
                (int(keys[i]), next(self._seq), tuple(int(c[i]) for c in cols)),
            )
        self.size += n
        if len(self._heap) >= self._spill_records:
            self._spill()

    def _spill(self):
        if not self._heap:
            return
        entries = sorted(self._heap)
        self._heap = []
        arr = np.empty(len(entries), dtype=self.dtype)
        arr["key"] = [e[0] for e in entries]
        for j, name in enumerate(self.payload_names):
            arr[name] = [e[2][j] for e in entries]
        run = self.runtime.new_array(self.dtype)
        with run.writer(tag="pq") as w:
            w.append(arr)
        self._open_cursor(run)
        if len(self._runs) > self._max_runs:
            self._consolidate()

    def _open_cursor(self, run):
        self._runs.append(run)
        self._cursors.append(
            _RunCursor(run, ("key",), "pq", self._per_fetch)
        )

    def _consolidate(self):
        for c in self._cursors:
            c.close()
        live = []
        for run, cur in zip(self._runs, self._cursors):
            if cur.pos - (len(cur.chunk) - cur.chunk_pos if cur.chunk is not None else 0) < run.length:
                live.append((run, cur))
        # Rebuild each run minus its consumed prefix, then merge.
        remainders = []
        for run, cur in live:
            consumed = cur.pos - (len(cur.chunk) - cur.chunk_pos if cur.chunk is not None else 0)
            if consumed == 0:
                remainders.append(run)
                continue
            rest = self.runtime.new_array(self.dtype)
            with rest.writer(tag="pq") as w, run.forward_reader(tag="pq") as fr:
                pos = consumed
                while pos < run.length:
                    take = min(self._per_fetch, run.length - pos)
                    w.append(fr.read(pos, take))
                    pos += take
            run.delete()
            remainders.append(rest)
        merged = self.runtime.new_array(self.dtype)
        if remainders:
            _merge_runs(remainders, ("key",), merged, "pq")
            for r in remainders:
                r.delete()
        self._runs = []
        self._cursors = []
        if merged.length:
            self._open_cursor(merged)
        else:
            merged.delete()

    def __len__(self):
        return self.size

    def _min_source(self):
        """Return ('heap', None) or ('run', cursor) holding the global min."""
        best = None
        best_src = None
        if self._heap:
            best = (self._heap[0][0],)
            best_src = ("heap", None)
        for cur in self._cursors:
            if cur.exhausted:
                continue
            k = (cur.head_key()[0],)
            # runs hold older records than the heap: prefer them on ties
            if best is None or k < best or (k == best and best_src[0] == "heap"):
                best = k
                best_src = ("run", cur)
        return best_src

    def top(self):
        src = self._min_source()
        if src is None:
            raise QueueEmptyError("top on empty queue")
        kind, cur = src
        if kind == "heap":
            key, _, payload = self._heap[0]
            return key, payload
        rec = cur.chunk[cur.chunk_pos]
        return int(rec["key"]), tuple(int(rec[n]) for n in self.payload_names)

    def pop_min(self):
        src = self._min_source()
        if src is None:
            raise QueueEmptyError("pop on empty queue")
        kind, cur = src
        self.size -= 1
        if kind == "heap":
            key, _, payload = heapq.heappop(self._heap)
            return key, payload
        rec = cur.chunk[cur.chunk_pos]
        cur.advance(1)
        self._gc_cursors()
        return int(rec["key"]), tuple(int(rec[n]) for n in self.payload_names)

    def pop_key(self, key):
        """Pop every record whose key equals ``key``; vectorised on runs.

        Returns a structured array (possibly empty) of the popped records.
        """
        key = int(key)
        parts = []
        for cur in self._cursors:
            while not cur.exhausted:
                view = cur.remaining_view()
                take = _take_upto(view, ("key",), (key,), inclusive=True)
                low = _take_upto(view, ("key",), (key,), inclusive=False)
                if low != 0:
                    raise QueueEmptyError(
                        f"pop_key({key}) skipped smaller key {int(view[0]['key'])}"
                    )
                if take == 0:
                    break
                parts.append(view[:take].copy())
                cur.advance(take)
        heap_recs = []
        while self._heap and self._heap[0][0] == key:
            k, _, payload = heapq.heappop(self._heap)
            heap_recs.append((k,) + payload)
        if self._heap and self._heap[0][0] < key:
            raise QueueEmptyError(
                f"pop_key({key}) would skip smaller key {self._heap[0][0]}"
            )
        if heap_recs:
            parts.append(np.array(heap_recs, dtype=self.dtype))
        self._gc_cursors()
        if not parts:
            return np.empty(0, dtype=self.dtype)
        out = parts[0] if len(parts) == 1 else np.concatenate(parts)
        self.size -= len(out)
        return out

    def _gc_cursors(self):
        dead = [i for i, c in enumerate(self._cursors) if c.exhausted]
        for i in reversed(dead):
            self._cursors[i].close()
            self._runs[i].delete()
            del self._cursors[i]
            del self._runs[i]

    def min_key(self):
        src = self._min_source()
        if src is None:
            return None
        kind, cur = src
        if kind == "heap":
            return self._heap[0][0]
        return int(cur.chunk[cur.chunk_pos]["key"])

    def clear(self):
        self._heap = []
        for c in self._cursors:
            c.close()
        for r in self._runs:
            r.delete()
        self._cursors = []
        self._runs = []
        self.size = 0

    def close(self):
        self.clear()
        self.runtime.budget.release(self._heap_bytes)
        self._heap_bytes = 0
