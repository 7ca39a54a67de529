"""Post-crash recovery: classify every block the durable image admits.

Recovery trusts exactly two kinds of durable state: block headers below each
size class's durable high-water mark, and the per-thread descriptor lines.
Allocation bitmaps are ignored (their writes are not failure-atomic).

A block with epoch tag ``f``, owner serial ``(t, s)`` is *recovered* iff

1. ``0 < f <= e - 2``, where ``e`` is the durable epoch — tags past the
   persistence frontier never come back, no matter what else is on the
   medium;
2. its owning attempt committed: ``s < sn_t`` (the owner moved on, which it
   only does after resolving the attempt and after the attempt's resets were
   covered by a fence), or ``s == sn_t`` and the descriptor's status word is
   COMMITTED;
3. it is a payload not canceled by an *in-use* anti-block (an anti passing
   rules 1-2) carrying the same allocation uid.  Canceled pairs are
   reclaimed.

Everything enumerated and not recovered gets its epoch tag scrubbed to zero
and written back before recovery reports success, so a crash during or after
recovery cannot resurrect blocks this pass discarded.  Headers with an
impossible type or owner are counted as malformed, logged, and discarded.

The scan is range-partitioned across ``parallelism`` worker threads; chunk
results are merged in deterministic range order, so the report is identical
whatever the parallelism.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .atomics import COMMITTED
from .pmem import (
    LINE,
    H_EPOCH,
    T_PAYLOAD,
    T_ANTI,
    SN_MASK,
    TID_SHIFT,
    MalformedHeader,
)
from .epoch import D_TIDSN, D_RCS_CNT_STAT


@dataclass
class RecoveryReport:
    epoch: int
    payload_offs: np.ndarray
    counts: dict
    sn_base: list
    uid_base: int
    malformed_offs: list = field(default_factory=list)

    @property
    def recovered(self):
        return self.counts["recovered"]


def _scan_chunk(u64, start, size, lo, hi):
    """Header fields for slots [lo, hi) of one class, as arrays."""
    offs = (start + np.arange(lo, hi, dtype=np.int64) * size).astype(np.int64)
    idx = offs >> 3
    return {
        "off": offs,
        "anti": u64[idx + 0],
        "epoch": u64[idx + 1],
        "type": u64[idx + 2],
        "tid_sn": u64[idx + 3],
        "uid": u64[idx + 4],
    }


def enumerate_blocks(heap, parallelism=1):
    """All slots below each class's durable high-water mark, header-decoded.

    Returns one dict of concatenated arrays, in (class, slot) order.
    """
    u64 = np.frombuffer(heap._working, dtype="<u8")
    jobs = []
    for sc in heap.classes():
        hwm = sc.hwm
        if hwm == 0:
            continue
        step = max(1, -(-hwm // max(1, parallelism)))
        for lo in range(0, hwm, step):
            jobs.append((sc.start, sc.size, lo, min(lo + step, hwm)))
    results = [None] * len(jobs)
    if parallelism <= 1 or len(jobs) <= 1:
        for i, j in enumerate(jobs):
            results[i] = _scan_chunk(u64, *j)
    else:
        nxt = [0]
        lock = threading.Lock()

        def worker():
            while True:
                with lock:
                    if nxt[0] >= len(jobs):
                        return
                    i = nxt[0]
                    nxt[0] += 1
                results[i] = _scan_chunk(u64, *jobs[i])

        threads = [threading.Thread(target=worker) for _ in range(parallelism)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if not results:
        fields = {k: np.empty(0, dtype="<u8") for k in ("anti", "epoch", "type", "tid_sn", "uid")}
        return {"off": np.empty(0, dtype=np.int64), **fields}
    return {k: np.concatenate([r[k] for r in results]) for k in results[0]}


def read_descriptor_table(heap):
    """Durable (sn, status) per thread."""
    T = heap.thread_count
    sns = np.empty(T, dtype=np.uint64)
    stats = np.empty(T, dtype=np.uint64)
    for t in range(T):
        off = heap.desc_table_off + t * LINE
        sns[t] = heap.read_u64(off + D_TIDSN) & SN_MASK
        stats[t] = heap.read_u64(off + D_RCS_CNT_STAT) & 3
    return sns, stats


def classify(heap, blocks):
    """Apply the recovery rules to enumerated blocks.

    Returns (recovered_payload_offs, scrub_offs, counts, malformed_offs,
    sn_base, uid_base).
    """
    e = heap.read_u64(heap.epoch_word_off)
    T = heap.thread_count
    desc_sn, desc_stat = read_descriptor_table(heap)

    epoch = blocks["epoch"].astype(np.int64)
    btype = blocks["type"]
    tid = (blocks["tid_sn"] >> np.uint64(TID_SHIFT)).astype(np.int64)
    sn = (blocks["tid_sn"] & np.uint64(SN_MASK)).astype(np.int64)
    uid = blocks["uid"]
    offs = blocks["off"]

    tagged = epoch > 0
    type_ok = (btype == T_PAYLOAD) | (btype == T_ANTI)
    tid_ok = tid < T
    malformed = tagged & (~type_ok | ~tid_ok)
    sane = tagged & type_ok & tid_ok

    rule1 = sane & (epoch <= e - 2)
    tid_c = np.minimum(tid, T - 1)
    own_sn = desc_sn.astype(np.int64)[tid_c]
    own_stat = desc_stat[tid_c]
    rule2 = (sn < own_sn) | ((sn == own_sn) & (own_stat == COMMITTED))

    eligible = rule1 & rule2
    live_anti_uids = uid[eligible & (btype == T_ANTI)]
    if live_anti_uids.size != np.unique(live_anti_uids).size:
        # One anti per payload by construction; two in-use antis sharing a
        # uid means the image itself is corrupt, not merely stale.
        raise MalformedHeader("duplicate blk_uid among in-use anti-blocks")
    is_payload = btype == T_PAYLOAD
    canceled = eligible & is_payload & np.isin(uid, live_anti_uids)
    recovered = eligible & is_payload & ~canceled

    counts = {
        "recovered": int(np.count_nonzero(recovered)),
        "discarded_recent": int(np.count_nonzero(sane & is_payload & (epoch > e - 2))),
        "discarded_uncommitted": int(np.count_nonzero(rule1 & ~rule2 & is_payload)),
        "canceled_by_anti": int(np.count_nonzero(canceled)),
        "malformed": int(np.count_nonzero(malformed)),
    }

    scrub = tagged & ~recovered
    sn_base = []
    for t in range(T):
        surviving = sn[recovered & (tid == t)]
        base = int(desc_sn[t])
        if surviving.size:
            base = max(base, int(surviving.max()))
        sn_base.append(base)
    uid_base = int(uid[recovered].max()) + 1 if counts["recovered"] else 1

    return (
        offs[recovered],
        offs[scrub],
        counts,
        offs[malformed][:100].tolist(),
        sn_base,
        uid_base,
    )


def recover(heap, parallelism=1, log=None):
    """Run full recovery on a crash-loaded heap, in place.

    After this returns, the heap's durable image holds exactly the recovered
    payloads (everything else scrubbed), the allocator reflects them, and the
    report carries what a resumed runtime needs (epoch, serial and uid bases).
    """
    blocks = enumerate_blocks(heap, parallelism)
    recovered_offs, scrub_offs, counts, malformed, sn_base, uid_base = classify(heap, blocks)

    if log is not None:
        for off in malformed:
            log(f"MALFORMED_HEADER at offset {off}: discarded")

    for off in scrub_offs.tolist():
        heap.write_u64(off + H_EPOCH, 0)
        heap.write_back(off + H_EPOCH)
    heap.persist_fence()

    recovered_sorted = np.sort(recovered_offs).astype(np.int64)
    heap.rebuild_allocation(recovered_sorted)
    heap.persist_fence()

    return RecoveryReport(
        epoch=heap.read_u64(heap.epoch_word_off),
        payload_offs=recovered_sorted,
        counts=counts,
        sn_base=sn_base,
        uid_base=uid_base,
        malformed_offs=malformed,
    )
