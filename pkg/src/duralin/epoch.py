"""Epoch clock, per-thread op lifecycle, and wait-free frontier advance.

Time is divided into epochs by a global clock word (a u64 that only moves by
CAS +1, starting at 4 so ``e-2`` arithmetic and the progress-word slots are
well defined from the first advance).  Every mutation is tagged with the
epoch it executed in; the *persistence frontier* is ``clock - 2``: a crash
in epoch ``e`` recovers every mutation committed up to the end of ``e-2``.

Per thread, the runtime keeps:

* a 64-byte persistent **descriptor** mirroring the thread's current attempt
  (old/new values, epoch, serial number, and the ``r_c_s`` status word) —
  recovery reads committed/failed verdicts from these lines;
* four **to-be-persisted** ring buffers (one per epoch slot) holding blocks
  whose cache lines still need a write-back — popped either by the owner on
  its next operation or by whoever advances the clock;
* a **to-be-freed** container of blocks awaiting the two-epoch safety window
  before their slots can be reused.

``advance()`` write-backs everything tagged ``e-1`` that its owners have not
flushed themselves (found through a min-tree over per-thread epochs), fences,
and CASes the clock forward — no step waits on any other thread, so the
frontier advance is wait-free.  Progress words gate useless advances: the
clock only moves past an epoch pair in which some operation actually
succeeded, unless the caller forces it (``sync``).
"""

from __future__ import annotations

import threading
import time

from .atomics import AtomicWord, AtomicCounter, TickSource, INIT, COMMITTED, FAILED
from .cascell import lin_cas as _lin_cas
from .pmem import (
    LINE,
    HDR_SIZE,
    H_ANTI,
    H_EPOCH,
    H_TYPE,
    H_TIDSN,
    H_UID,
    T_PAYLOAD,
    T_ANTI,
    T_DESC,
    M64,
    pack_tid_sn,
)

MIND_INF = (1 << 63) - 1
_CNT_MASK = (1 << 62) - 1

# Descriptor line layout (64B per thread):
D_OLD = 0
D_NEW = 8
D_EPOCH = 16
D_TYPE = 24
D_TIDSN = 32
D_RCS_VAL = 40
D_RCS_CNT_STAT = 48

MUTATIONS = ("skip_desc_flush", "wrong_epoch_tag", "early_tbf_free")


class _Descriptor:
    """Transient handle over one thread's persistent descriptor line."""

    __slots__ = ("rt", "tid", "off", "sn", "epoch", "old", "new", "rcs", "commit_info")

    def __init__(self, rt, tid, off, sn_base=0):
        self.rt = rt
        self.tid = tid
        self.off = off
        self.sn = sn_base
        self.epoch = 0
        self.old = 0
        self.new = 0
        self.rcs = AtomicWord((0, 0, INIT))
        self.commit_info = None  # (cnt, epoch, tick) of the last commit

    def reinit(self, epoch):
        """New attempt: bump the serial number, adopt the epoch, clear r_c_s."""
        heap = self.rt.heap
        self.sn += 1
        self.epoch = epoch
        heap.write_u64(self.off + D_EPOCH, epoch)
        heap.write_u64(self.off + D_TIDSN, pack_tid_sn(self.tid, self.sn))
        heap.write_u64(self.off + D_RCS_VAL, 0)
        heap.write_u64(self.off + D_RCS_CNT_STAT, 0)
        self.rcs.store((0, 0, INIT))

    def prepare(self, old, new, cid, cnt):
        """Point the descriptor at an attempt on (cell, cnt)."""
        heap = self.rt.heap
        self.old = old
        self.new = new
        heap.write_u64(self.off + D_OLD, old & M64)
        heap.write_u64(self.off + D_NEW, new & M64)
        heap.write_u64(self.off + D_RCS_VAL, cid)
        heap.write_u64(self.off + D_RCS_CNT_STAT, ((cnt & _CNT_MASK) << 2) | 1)
        self.rcs.store((cid, cnt, 1))

    def resolve(self, exp, status, ticks):
        """CAS r_c_s from IN_PROG to COMMITTED/FAILED, mirroring the bytes and
        (for commits) recording the tick — all indivisibly."""
        cid, cnt, _ = exp
        heap = self.rt.heap

        def effect(tick):
            heap.write_u64(self.off + D_RCS_CNT_STAT, ((cnt & _CNT_MASK) << 2) | status)
            if status == COMMITTED:
                self.commit_info = (cnt, self.epoch, tick)

        return self.rcs.cas_with(exp, (cid, cnt, status), effect, ticks)


class CircBuffer:
    """To-be-persisted ring: single producer (the owner), any-thread pop_all.

    A full push writes back the oldest entry and nudges ``popped`` forward;
    pop_all write-backs every live entry, stopping after one full lap.
    Duplicate write-backs are harmless, so racy pops stay safe.
    """

    __slots__ = ("cap", "blks", "pushed", "popped")

    def __init__(self, cap):
        self.cap = cap
        self.blks = [0] * cap
        self.pushed = AtomicWord(0)
        self.popped = AtomicWord(0)

    def push(self, heap, off):
        cpush = self.pushed.load()
        cpop = self.popped.load()
        if cpush >= cpop + self.cap:
            heap.write_back_block(self.blks[cpop % self.cap])
            self.popped.cas(cpop, cpop + 1)
        self.blks[cpush % self.cap] = off
        self.pushed.store(cpush + 1)

    def pop_all(self, heap):
        """Write back every live entry; returns how many were flushed."""
        cpop = self.popped.load()
        cpush = self.pushed.load()
        if cpop == cpush:
            return 0
        start_slot = cpop % self.cap
        seen = 0
        i = cpop
        n = 0
        while i < cpush:
            if i % self.cap == start_slot:
                seen += 1
                if seen == 2:
                    break
            heap.write_back_block(self.blks[i % self.cap])
            n += 1
            i += 1
        self.popped.cas(cpop, cpush)
        return n


class TbfContainer:
    """To-be-freed blocks, bucketed by the epoch stamp they were retired in.

    Single-owner.  Draining destroys stamps oldest-first with a fence per
    stamp group, so a payload's header reset is always durable no later than
    its anti-block's — the ordering the resurrection analysis depends on.
    """

    __slots__ = ("by_stamp",)

    def __init__(self):
        self.by_stamp = {}

    def insert(self, stamp, off):
        self.by_stamp.setdefault(stamp, []).append(off)

    def drain_upto(self, rt, upto):
        if not self.by_stamp:
            return
        for stamp in sorted(s for s in self.by_stamp if s <= upto):
            for off in self.by_stamp.pop(stamp):
                rt._destruct(off)
            rt.heap.persist_fence()


class Mindicator:
    """Min-tree over per-thread epochs (complete binary tree in an array).

    Leaf updates are monotonic CAS loops; inner nodes are recomputed with a
    capped number of retries per level — a recomputed min written late can
    only be *below* the true min, never above, so a capped retry keeps the
    'never above' invariant that advance() relies on while staying wait-free.
    """

    __slots__ = ("P", "n", "nodes", "_retry_cap")

    def __init__(self, nthreads, initial):
        P = 1
        while P < nthreads:
            P <<= 1
        self.P = P
        self.n = nthreads
        self.nodes = [AtomicWord(MIND_INF) for _ in range(2 * P)]
        for t in range(nthreads):
            self.nodes[P + t] = AtomicWord(initial)
        for i in range(P - 1, 0, -1):
            left = self.nodes[2 * i].load()
            right = self.nodes[2 * i + 1].load()
            self.nodes[i] = AtomicWord(min(left, right))
        self._retry_cap = max(16, 2 * nthreads)

    def leaf(self, t):
        return self.nodes[self.P + t].load()

    def min_value(self):
        return self.nodes[1].load()

    def update(self, t, v):
        i = self.P + t
        while True:
            cur = self.nodes[i].load()
            if cur >= v or self.nodes[i].cas(cur, v):
                break
        i >>= 1
        while i >= 1:
            for _ in range(self._retry_cap):
                cur = self.nodes[i].load()
                m = min(self.nodes[2 * i].load(), self.nodes[2 * i + 1].load())
                if m <= cur or self.nodes[i].cas(cur, m):
                    break
            i >>= 1

    def lagging(self, below):
        """Thread ids whose leaf is still under ``below``."""
        if self.nodes[1].load() >= below:
            return []
        return [t for t in range(self.n) if self.nodes[self.P + t].load() < below]


class OpContext:
    __slots__ = ("tid", "e_last", "e_curr", "detaches", "allocs", "anti_of", "last_commit")

    def __init__(self, tid):
        self.tid = tid
        self.e_last = 0
        self.e_curr = 0
        self.detaches = []
        self.allocs = []
        self.anti_of = {}
        self.last_commit = None


class EpochRuntime:
    """The persistence runtime bound to one heap.

    Threads must call :meth:`register_thread` with a dense thread id below
    the heap's ``thread_count`` before performing operations.  ``mutation``
    seeds one of three known bugs for checker validation (see MUTATIONS).
    """

    def __init__(self, heap, tbp_capacity=64, mutation=None, resume=None):
        if mutation is not None and mutation not in MUTATIONS:
            raise ValueError(f"unknown mutation {mutation!r}")
        self.heap = heap
        self.mutation = mutation
        self.persistent = True
        T = heap.thread_count
        self.thread_count = T
        self.ticks = TickSource()
        start_epoch = 4 if resume is None else resume.epoch
        self.clock = AtomicWord(start_epoch)
        self.advance_ticks = {}
        self._advance_lock = threading.Lock()
        sn_base = resume.sn_base if resume is not None else [0] * T
        uid_base = resume.uid_base if resume is not None else 0
        self.uid = AtomicCounter(uid_base)
        self.descs = [
            _Descriptor(self, t, heap.desc_table_off + t * LINE, sn_base[t]) for t in range(T)
        ]
        self.tbp = [[CircBuffer(tbp_capacity) for _ in range(4)] for _ in range(T)]
        self.tbf = [TbfContainer() for _ in range(T)]
        self.mind = Mindicator(T, start_epoch)
        self.w = [AtomicWord((i, 1)) for i in range(4)]
        self._tids = {}
        self.ctxs = [OpContext(t) for t in range(T)]
        self._ticker = None
        self._ticker_stop = None
        self.test_after_install = None

        heap.write_u64(heap.epoch_word_off, start_epoch)
        heap.write_back(heap.epoch_word_off)
        for d in self.descs:
            heap.write_u64(d.off + D_TYPE, T_DESC)
            heap.write_u64(d.off + D_TIDSN, pack_tid_sn(d.tid, d.sn))
            heap.write_back(d.off)
        heap.persist_fence()

    # ------------------------------------------------------------- threading

    def register_thread(self, tid):
        if not 0 <= tid < self.heap.thread_count:
            raise ValueError("tid out of range")
        self._tids[threading.get_ident()] = tid

    def _ctx(self):
        return self.ctxs[self._tids[threading.get_ident()]]

    def ctx(self):
        return self._ctx()

    # ------------------------------------------------------------ allocation

    def pnew(self, body):
        """Allocate a payload block; registered to the current op window."""
        ctx = self._ctx()
        off = self.heap.pm_alloc(HDR_SIZE + len(body))
        self.heap.write_u64(off + H_TYPE, T_PAYLOAD)
        self.heap.write_u64(off + H_UID, self.uid.next())
        if body:
            self.heap.write(off + HDR_SIZE, body)
        ctx.allocs.append(off)
        return off

    def read_payload(self, off, n):
        return self.heap.read(off + HDR_SIZE, n)

    def write_payload(self, off, at, data):
        self.heap.write(off + HDR_SIZE + at, data)

    def pdetach(self, off):
        """Mark a payload for logical deletion by the next committed op."""
        self._ctx().detaches.append(off)

    def pdelete(self, off):
        """Retire a payload block (and its anti, if any) for reuse.

        A block still in the op's alloc list was never published: it is freed
        immediately, with a fence so a possibly-durable tag from a failed
        attempt can't outlive the slot's reuse.  Otherwise the block waits in
        the to-be-freed container: payload under this epoch's stamp, its anti
        one stamp later.
        """
        ctx = self._ctx()
        if off in ctx.allocs:
            ctx.allocs.remove(off)
            self._destruct(off)
            self.heap.persist_fence()
            return
        e = self.clock.load()
        anti = self.heap.read_u64(off + H_ANTI)
        if anti:
            self.tbf[ctx.tid].insert(e + 1, anti)
        self.tbf[ctx.tid].insert(e, off)

    def _destruct(self, off):
        self.heap.write_u64(off + H_EPOCH, 0)
        self.heap.write_back(off)
        self.heap.pm_free(off)

    def _alloc_anti(self, payload_off, tid):
        anti = self.heap.pm_alloc(HDR_SIZE)
        self.heap.write_u64(anti + H_TYPE, T_ANTI)
        self.heap.write_u64(anti + H_UID, self.heap.read_u64(payload_off + H_UID))
        self.heap.write_u64(payload_off + H_ANTI, anti)
        return anti

    # ---------------------------------------------------------- op lifecycle

    def _setup(self, off, d, e):
        """Tag a block for epoch ``e`` under descriptor ``d`` (None = reset
        the tags to zero) and queue its write-back."""
        heap = self.heap
        if d is None:
            heap.write_u64(off + H_EPOCH, 0)
            heap.write_u64(off + H_TIDSN, 0)
        else:
            tag = e + 1 if self.mutation == "wrong_epoch_tag" else e
            heap.write_u64(off + H_EPOCH, tag)
            heap.write_u64(off + H_TIDSN, pack_tid_sn(d.tid, d.sn))
        self.tbp[self._ctx().tid][e % 4].push(heap, off)

    def _begin_op(self, ctx, reset):
        heap = self.heap
        tid = ctx.tid
        e = self.clock.load()
        ctx.e_curr = e
        if ctx.e_last < e:
            # Crossed an epoch boundary since the last op: flush our own
            # leftovers and raise our min-tree leaf so advance() need not.
            # The descriptor line is staged *before* reinit bumps its serial
            # number, so any crash image that holds a newer serial also holds
            # (via the same or an earlier fence) the zeroed tags of this
            # attempt's reset blocks — a stale block can never pass the
            # serial-number test against a descriptor it predates.
            self.tbp[tid][ctx.e_last % 4].pop_all(heap)
            heap.write_back(heap.desc_table_off + tid * LINE)
            self.mind.update(tid, e)
        # Drain before touching the descriptor: the drained blocks' zeroed
        # epochs are fenced here, so they are durable before any flush can
        # carry the descriptor's next serial number to the medium.
        upto = e - 1 if self.mutation == "early_tbf_free" else e - 2
        self.tbf[tid].drain_upto(self, upto)
        self.descs[tid].reinit(e)
        d = self.descs[tid]
        for off in ctx.detaches:
            if reset:
                anti = ctx.anti_of[off]
            else:
                anti = ctx.anti_of.get(off)
                if anti is None:
                    anti = self._alloc_anti(off, tid)
                    ctx.anti_of[off] = anti
            self._setup(anti, d, e)
        for off in ctx.allocs:
            self._setup(off, d, e)

    def _end_op(self, ctx):
        ctx.detaches.clear()
        ctx.anti_of.clear()
        ctx.allocs.clear()
        e = ctx.e_curr
        if ctx.e_last != e:
            # First success in this epoch (for this thread): raise the flag
            # that lets the next two advances through the gate.
            self.w[e % 4].cas((e, 0), (e, 1))
        ctx.e_last = e
        ctx.e_curr = 0

    def _abort_op(self, ctx, reset):
        e = ctx.e_curr
        if reset:
            for off in ctx.detaches:
                self._setup(ctx.anti_of[off], None, e)
        else:
            for off in ctx.detaches:
                self._destruct(ctx.anti_of.pop(off))
                self.heap.write_u64(off + H_ANTI, 0)
            ctx.detaches.clear()
        for off in ctx.allocs:
            self._setup(off, None, e)
        ctx.e_last = e
        ctx.e_curr = 0

    # -------------------------------------------------------------- lin_cas

    def lin_cas(self, cell, exp, new):
        return _lin_cas(self, cell, exp, new)

    # -------------------------------------------------------------- advance

    def advance(self, forced=False, steps=None):
        """One wait-free frontier step.  Returns True if the clock moved.

        Scan order matters: lagging threads' buffers are popped and their
        descriptors written back *before* the fence, the fence before the
        gate and the clock CAS, and the winner write-backs the clock line so
        the durable epoch trails the volatile one by at most one fence.

        ``steps``, if a list, receives this call's count of mindicator/TBP
        work units — the wait-freedom tests budget these counts, which depend
        only on thread count and buffered blocks, never on how long any
        thread has been stalled.
        """
        heap = self.heap
        n = 1
        e = self.clock.load()
        for t in self.mind.lagging(e):
            v = self.mind.leaf(t)
            n += 1
            if v >= e:
                continue
            if v == e - 1:
                n += self.tbp[t][(e - 1) % 4].pop_all(heap)
            else:
                for s in range(4):
                    n += self.tbp[t][s].pop_all(heap)
            if self.mutation != "skip_desc_flush":
                heap.write_back(heap.desc_table_off + t * LINE)
            self.mind.update(t, e)
            n += 2
        heap.persist_fence()

        if not forced:
            if self.w[e % 4].load() == (e, 0) and self.w[(e - 1) % 4].load() == (e - 1, 0):
                if steps is not None:
                    steps.append(n)
                return False  # nothing succeeded around here; don't spin the clock

        # Recycle the progress word four epochs ahead before the clock can
        # reach it.  Monotonic on the stored epoch, so it also absorbs the
        # initial sentinel values; skipping this (even on forced advances)
        # can strand a stale flag and wedge the gate.
        slot = self.w[(e + 1) % 4]
        cur = slot.load()
        while cur[0] < e + 1:
            n += 1
            if slot.cas(cur, (e + 1, 0)):
                break
            cur = slot.load()

        def effect(tick):
            heap.write_u64(heap.epoch_word_off, e + 1)
            self.advance_ticks[e + 1] = tick

        ok, _ = self.clock.cas_with(e, e + 1, effect, self.ticks)
        n += 1
        if ok:
            heap.write_back(heap.epoch_word_off)
            heap.persist_fence()
        if steps is not None:
            steps.append(n)
        return ok

    def sync(self):
        """Force the frontier past everything committed before the call:
        two forced advances from the epoch observed on entry.  Returns the
        total step count (see ``advance``)."""
        target = self.clock.load() + 2
        steps = []
        while self.clock.load() < target:
            self.advance(forced=True, steps=steps)
        return sum(steps)

    def snapshot_advance_ticks(self):
        return dict(self.advance_ticks)

    # --------------------------------------------------------------- ticker

    def start_ticker(self, interval_s=0.010):
        """Optional background advance pulse (off by default; tests and
        deterministic runs drive advance()/sync() explicitly)."""
        if self._ticker is not None:
            return
        stop = threading.Event()

        def loop():
            while not stop.wait(interval_s):
                self.advance()

        t = threading.Thread(target=loop, name="duralin-ticker", daemon=True)
        self._ticker = t
        self._ticker_stop = stop
        t.start()

    def stop_ticker(self):
        if self._ticker is None:
            return
        self._ticker_stop.set()
        self._ticker.join()
        self._ticker = None
        self._ticker_stop = None


class TransientRuntime:
    """Persistence compiled out: same structure-facing surface as
    :class:`EpochRuntime`, but pnew hands out plain handles, pdetach/pdelete
    and sync are no-ops, and lin_cas is a plain counted CAS.  Structures run
    unchanged on either runtime."""

    def __init__(self, thread_count=8):
        self.thread_count = thread_count
        self.persistent = False
        self.mutation = None
        self.ticks = TickSource()
        self.clock = AtomicWord(4)
        self.descs = []
        self._tids = {}
        self.ctxs = [OpContext(t) for t in range(thread_count)]
        self._handles = AtomicCounter(0)
        self.test_after_install = None

    def register_thread(self, tid):
        if not 0 <= tid < self.thread_count:
            raise ValueError("tid out of range")
        self._tids[threading.get_ident()] = tid

    def _ctx(self):
        return self.ctxs[self._tids[threading.get_ident()]]

    def ctx(self):
        return self._ctx()

    def pnew(self, body):
        return self._handles.next()

    def read_payload(self, off, n):
        raise RuntimeError("transient payloads hold no bytes")

    def write_payload(self, off, at, data):
        pass

    def pdetach(self, off):
        pass

    def pdelete(self, off):
        pass

    def lin_cas(self, cell, exp, new):
        ctx = self._ctx()
        while True:
            r = cell._load(self)
            if r[0] != exp:
                return False
            if self.test_after_install is not None:
                self.test_after_install()
            if cell.var.cas((exp, r[1], INIT), (new, r[1] + 1, INIT)):
                ctx.last_commit = (r[1], 0, self.ticks.next())
                return True

    def advance(self, forced=False, steps=None):
        return False

    def sync(self):
        return 0

    def start_ticker(self, interval_s=0.010):
        pass

    def stop_ticker(self):
        pass
