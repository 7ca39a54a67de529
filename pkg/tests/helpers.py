"""Shared test plumbing: small heaps, registered worker threads, and the
hand-built crash images used by the recovery rule-table suites."""

import threading

from duralin.atomics import COMMITTED, FAILED
from duralin.epoch import D_RCS_CNT_STAT, D_TIDSN, EpochRuntime
from duralin.pmem import LINE, PersistentHeap, T_ANTI, T_PAYLOAD, pack_tid_sn


def make_runtime(threads=4, size=4 << 20, **kw):
    """A small heap plus a runtime bound to it."""
    heap = PersistentHeap(size=size, thread_count=threads)
    return heap, EpochRuntime(heap, **kw)


def run_workers(rt, fns):
    """Run fns[i](tid=i) on its own registered thread; re-raise the first error."""
    errors = []

    def body(tid, fn):
        rt.register_thread(tid)
        try:
            fn(tid)
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)

    threads = [threading.Thread(target=body, args=(i, fn)) for i, fn in enumerate(fns)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


# --------------------------------------------------------------- rule table
#
# One image per table row: durable epoch 8, thread 0's descriptor at serial 5
# with the row's status, one payload block with the row's epoch tag and
# serial, optionally canceled by an in-use anti-block sharing its uid.
#
# Expected classification, derived by hand from the three recovery rules:
#   recovered             iff tag == e-2 and (s < sn or (s == sn and
#                         status COMMITTED)) and no in-use anti
#   canceled_by_anti = 1  iff the same but with the anti present
#   discarded_recent = 1  iff tag == e-1 (rule 1 fails, tag too young)
#   discarded_uncommitted iff tag == e-2, s == sn, status FAILED
#   tag 0 means "never tagged": invisible to every counter.

RULE_EPOCH = 8
RULE_SN = 5

RULE_TABLE = [
    # (tag_kind, sn_kind, status, anti, recovered, expected_nonzero_counts)
    ("zero", "lt", "C", False, False, {}),
    ("zero", "lt", "C", True, False, {}),
    ("zero", "lt", "F", False, False, {}),
    ("zero", "lt", "F", True, False, {}),
    ("zero", "eq", "C", False, False, {}),
    ("zero", "eq", "C", True, False, {}),
    ("zero", "eq", "F", False, False, {}),
    ("zero", "eq", "F", True, False, {}),
    ("e-2", "lt", "C", False, True, {"recovered": 1}),
    ("e-2", "lt", "C", True, False, {"canceled_by_anti": 1}),
    ("e-2", "lt", "F", False, True, {"recovered": 1}),
    ("e-2", "lt", "F", True, False, {"canceled_by_anti": 1}),
    ("e-2", "eq", "C", False, True, {"recovered": 1}),
    ("e-2", "eq", "C", True, False, {"canceled_by_anti": 1}),
    ("e-2", "eq", "F", False, False, {"discarded_uncommitted": 1}),
    ("e-2", "eq", "F", True, False, {"discarded_uncommitted": 1}),
    ("e-1", "lt", "C", False, False, {"discarded_recent": 1}),
    ("e-1", "lt", "C", True, False, {"discarded_recent": 1}),
    ("e-1", "lt", "F", False, False, {"discarded_recent": 1}),
    ("e-1", "lt", "F", True, False, {"discarded_recent": 1}),
    ("e-1", "eq", "C", False, False, {"discarded_recent": 1}),
    ("e-1", "eq", "C", True, False, {"discarded_recent": 1}),
    ("e-1", "eq", "F", False, False, {"discarded_recent": 1}),
    ("e-1", "eq", "F", True, False, {"discarded_recent": 1}),
]


def set_descriptor(heap, tid, sn, status, cnt=1):
    off = heap.desc_table_off + tid * LINE
    heap.write_u64(off + D_TIDSN, pack_tid_sn(tid, sn))
    heap.write_u64(off + D_RCS_CNT_STAT, ((cnt & ((1 << 62) - 1)) << 2) | status)


def build_rule_image(tag_kind, sn_kind, status, anti):
    """A single-payload crash image for one rule-table row.

    Returns (image_bytes, payload_off).
    """
    heap = PersistentHeap(size=1 << 20, thread_count=2)
    e = RULE_EPOCH
    heap.write_u64(heap.epoch_word_off, e)
    set_descriptor(heap, 0, RULE_SN, COMMITTED if status == "C" else FAILED)
    set_descriptor(heap, 1, 0, COMMITTED)

    tag = {"zero": 0, "e-2": e - 2, "e-1": e - 1}[tag_kind]
    s = RULE_SN - 2 if sn_kind == "lt" else RULE_SN
    uid = 77
    off = heap.pm_alloc(64)
    heap.header_write(off, anti=0, epoch=tag, btype=T_PAYLOAD, tid=0, sn=s, uid=uid)
    if anti:
        a = heap.pm_alloc(64)
        # The anti itself passes rules 1-2: old tag, old serial, same uid.
        heap.header_write(a, anti=0, epoch=e - 2, btype=T_ANTI, tid=0, sn=RULE_SN - 3, uid=uid)
        heap.write_u64(off + 0, a)
    heap.persist_all()
    return bytes(heap.read_durable(0, heap.size)), off
