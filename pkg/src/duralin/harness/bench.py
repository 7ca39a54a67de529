"""Throughput and sync-latency measurement over the emulated heap.

These are desk-scale sanity benchmarks: the point is the *shape* (persistent
vs. transient ratio, latency distribution), not absolute numbers, since the
heap is emulated bytes and the atomics are lock-striped Python.
"""

import csv
import statistics
import threading
import time

from ..epoch import EpochRuntime, TransientRuntime
from ..hashmap import LockFreeHashMap
from ..pmem import _DEFAULT_SHARES, HDR_SIZE, SIZE_CLASSES, PersistentHeap
from ..queue import NonblockingQueue
from .workload import op_stream, unique_value


def heap_size_for(spec, items):
    """A heap size whose payload class can hold ``items`` blocks with slack."""
    need = HDR_SIZE + (32 + spec.value_size if spec.structure == "hashmap" else spec.value_size)
    cls = next((c for c in SIZE_CLASSES if c >= need), SIZE_CLASSES[-1])
    # Size the whole heap so the payload class alone fits ~1.6x the items
    # at its default share of the budget (detach anti-blocks ride the
    # smallest class, which the same scaling covers many times over).
    total = int(items * cls * 1.6 / _DEFAULT_SHARES[cls])
    return max(total, 4 << 20)


def build_structure(spec, persistent=True, heap_path=None, heap_size=None, mutation=None):
    """Returns (heap_or_None, runtime, structure)."""
    if persistent:
        size = heap_size or heap_size_for(spec, spec.resolved_warmup() * 2 + 65536)
        heap = PersistentHeap(size=size, thread_count=max(spec.threads, 1), path=heap_path)
        rt = EpochRuntime(heap, mutation=mutation)
    else:
        heap = None
        rt = TransientRuntime(thread_count=max(spec.threads, 1))
    if spec.structure == "hashmap":
        obj = LockFreeHashMap(rt, buckets=spec.buckets, key_size=32, value_size=spec.value_size)
    else:
        obj = NonblockingQueue(rt, value_size=spec.value_size)
    return heap, rt, obj


def warm_structure(spec, rt, obj):
    """Prefill from thread 0 (must already be registered)."""
    n = spec.resolved_warmup()
    if spec.structure == "hashmap":
        stride = max(spec.key_space // max(n, 1), 1)
        for i in range(n):
            obj.insert((i * stride) % spec.key_space, unique_value(63, i))
    else:
        for i in range(n):
            obj.enqueue(unique_value(63, i))
    rt.sync()
    return n


def _apply(obj, op, key, val):
    if op == "get":
        return obj.get(key)
    if op == "insert":
        return obj.insert(key, val)
    if op == "remove":
        return obj.remove(key)
    if op == "enqueue":
        return obj.enqueue(val)
    return obj.dequeue()


def run_throughput(spec, persistent=True, heap_path=None, heap_size=None):
    """Timed mixed workload; returns a CSV-ready result row."""
    heap, rt, obj = build_structure(spec, persistent, heap_path, heap_size)
    rt.register_thread(0)
    warmed = warm_structure(spec, rt, obj)

    stop = threading.Event()
    counts = [0] * spec.threads
    errors = []

    def worker(tid):
        try:
            rt.register_thread(tid)
            stream = op_stream(spec, tid)
            rng = spec.thread_rng(tid + 4096)
            sync_gap = spec.sync_every
            until_sync = rng.randint(1, 2 * sync_gap) if sync_gap else 0
            n = 0
            while not stop.is_set():
                op, key, val = next(stream)
                _apply(obj, op, key, val)
                n += 1
                if sync_gap:
                    until_sync -= 1
                    if until_sync <= 0:
                        rt.sync()
                        until_sync = rng.randint(1, 2 * sync_gap)
            counts[tid] = n
        except BaseException as exc:
            errors.append(exc)
            stop.set()

    threads = [threading.Thread(target=worker, args=(tid,)) for tid in range(spec.threads)]
    if persistent and spec.epoch_length_ms > 0:
        rt.start_ticker(spec.epoch_length_ms / 1000.0)
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    time.sleep(spec.duration)
    stop.set()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    rt.stop_ticker()
    if errors:
        raise errors[0]

    ops = sum(counts)
    row = spec.as_row()
    row.update(
        mode="persistent" if persistent else "transient",
        warmed=warmed,
        ops=ops,
        seconds=round(elapsed, 4),
        ops_per_s=round(ops / elapsed, 1),
    )
    return row


def run_sync_latency(spec, heap_size=None):
    """Latency of explicit sync() calls under a mixed workload, ticker off.

    Returns a row with mean/median/p99 in milliseconds.
    """
    heap, rt, obj = build_structure(spec, persistent=True, heap_size=heap_size)
    rt.register_thread(0)
    warmed = warm_structure(spec, rt, obj)

    stop = threading.Event()
    lats = [[] for _ in range(spec.threads)]
    errors = []
    gap = max(spec.sync_every, 1)

    def worker(tid):
        try:
            rt.register_thread(tid)
            stream = op_stream(spec, tid)
            n = 0
            while not stop.is_set():
                op, key, val = next(stream)
                _apply(obj, op, key, val)
                n += 1
                if n % gap == 0:
                    t0 = time.perf_counter()
                    rt.sync()
                    lats[tid].append(time.perf_counter() - t0)
        except BaseException as exc:
            errors.append(exc)
            stop.set()

    threads = [threading.Thread(target=worker, args=(tid,)) for tid in range(spec.threads)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    time.sleep(spec.duration)
    stop.set()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    if errors:
        raise errors[0]

    all_lats = sorted(x for per in lats for x in per)
    if not all_lats:
        raise RuntimeError("no sync() calls completed; lengthen the run")
    p99 = all_lats[min(len(all_lats) - 1, int(len(all_lats) * 0.99))]
    row = spec.as_row()
    row.update(
        mode="persistent",
        warmed=warmed,
        seconds=round(elapsed, 4),
        syncs=len(all_lats),
        sync_mean_ms=round(1000 * statistics.fmean(all_lats), 4),
        sync_median_ms=round(1000 * statistics.median(all_lats), 4),
        sync_p99_ms=round(1000 * p99, 4),
    )
    return row


def write_rows(path, rows):
    if not rows:
        return
    keys = list(rows[0].keys())
    for r in rows[1:]:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
