"""CAS cells and the epoch-linearized CAS that makes them recoverable.

A :class:`CasCell` is one mutable word of a data structure.  Its atomic state
is a tagged tuple ``(val, cnt, stat)``: ``cnt`` is a per-cell modification
counter (the ABA guard), and ``stat`` marks whether a linearized-CAS
descriptor is currently installed.

``lin_cas`` is the only way a structure mutation becomes durable:

1. the caller's per-thread descriptor is pointed at the cell (``r_c_s`` gets
   ``(cell, cnt, IN_PROG)``),
2. the descriptor is installed into the cell with a plain CAS on the tagged
   word,
3. ``try_complete`` — run by the owner and by any reader that finds the
   descriptor installed — checks that the clock still equals the epoch the
   descriptor was prepared in, then CASes ``r_c_s`` to COMMITTED or FAILED
   and restores the cell to the new (or old) value with ``cnt+1``.

The status CAS in step 3 requires the exact ``(cell, cnt)`` pair of this
attempt, not just the cell: the descriptor's ``r_c_s`` is published before
the install CAS, so a reader holding a stale view of the same cell must not
be able to resolve an attempt that was never installed.  Helpers can only
reach a descriptor through an installed word, and the owner rechecks the pair
on every path, so a descriptor resolves exactly once per attempt.

A FAILED resolution means the epoch moved between preparation and
verification; the caller re-prepares in the fresh epoch and retries.  A lost
install is re-read with a helping load first: only a resolved value different
from ``exp`` may produce a ``False`` return, which keeps ``lin_cas``
linearizable.
"""

from __future__ import annotations

import itertools

from .atomics import AtomicWord, INIT, IN_PROG, COMMITTED, FAILED


class CasCell:
    """One atomic word of a structure; values are ints (0 = null)."""

    __slots__ = ("var", "cid")
    _ids = itertools.count(1)

    def __init__(self, initial=0):
        self.var = AtomicWord((initial, 0, INIT))
        self.cid = next(CasCell._ids)

    def _load(self, rt):
        """Load the tagged word, helping any installed descriptor first."""
        while True:
            r = self.var.load()
            if r[2] == IN_PROG:
                d = rt.descs[-r[0] - 1]
                try_complete(rt, d, self, r[1])
                continue
            return r

    def load(self, rt):
        return self._load(rt)[0]

    def store(self, rt, val):
        while True:
            r = self._load(rt)
            if self.var.cas(r, (val, r[1] + 1, INIT)):
                return

    def cas(self, rt, exp, new):
        """Transient CAS (bumps cnt; no persistence).

        Used for helper transitions — unlink swings, mark freezes, tail
        fixups.  False is never spurious: the loop re-reads until either the
        value differs from ``exp`` or the swap lands, so a False return
        always linearizes at a load that saw a different value.
        """
        while True:
            r = self._load(rt)
            if r[0] != exp:
                return False
            if self.var.cas((exp, r[1], INIT), (new, r[1] + 1, INIT)):
                return True

    def raw_init(self, val):
        """Pre-publication initialization (no concurrency yet)."""
        self.var = AtomicWord((val, 0, INIT))


def try_complete(rt, d, cell, cnt):
    """Resolve descriptor ``d``'s attempt on ``(cell, cnt)``, then clean the
    cell.  Idempotent; safe to call from any thread that saw the install."""
    exp = (cell.cid, cnt, IN_PROG)
    cur = d.rcs.load()
    if cur == exp:
        if d.epoch == rt.clock.load():
            d.resolve(exp, COMMITTED, rt.ticks)
        else:
            d.resolve(exp, FAILED, None)
    cur = d.rcs.load()
    if cur[0] == cell.cid and cur[1] == cnt:
        val = d.new if cur[2] == COMMITTED else d.old
        cell.var.cas((-(d.tid + 1), cnt, IN_PROG), (val, cnt + 1, INIT))


def lin_cas(rt, cell, exp, new):
    """Epoch-linearized CAS: on True the transition is (buffered) durable
    once the persistence frontier passes the commit epoch."""
    ctx = rt._ctx()
    rt._begin_op(ctx, reset=False)
    d = rt.descs[ctx.tid]
    while True:
        r = cell._load(rt)
        if r[0] != exp:
            rt._abort_op(ctx, reset=False)
            return False
        cnt = r[1]
        d.prepare(exp, new, cell.cid, cnt)
        if cell.var.cas((exp, cnt, INIT), (-(ctx.tid + 1), cnt, IN_PROG)):
            if rt.test_after_install is not None:
                rt.test_after_install()
            try_complete(rt, d, cell, cnt)
            if d.rcs.load() == (cell.cid, cnt, COMMITTED):
                ctx.last_commit = d.commit_info
                rt._end_op(ctx)
                return True
            # FAILED: the epoch moved mid-attempt; retry in the new epoch.
            rt._abort_op(ctx, reset=True)
            rt._begin_op(ctx, reset=True)
            continue
        rr = cell._load(rt)
        if rr[0] == exp:
            # Lost the install but the value is still exp (cnt moved or a
            # competing attempt resolved back): retry, don't fail.
            rt._abort_op(ctx, reset=True)
            rt._begin_op(ctx, reset=True)
            continue
        rt._abort_op(ctx, reset=False)
        return False
