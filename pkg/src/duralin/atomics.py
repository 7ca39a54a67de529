"""Small atomic primitives used by the runtime.

CPython has no machine CAS we can call directly, so each atomic word hides a
stripe lock that is held only for the single read-modify-write step.  On real
hardware these operations are single instructions (LOCK CMPXCHG etc.); the
lock here is the moral equivalent of that microcode and is never held across
algorithm steps, so the lock-free structure of the algorithms above it is
preserved.

Words hold arbitrary hashable Python values.  The tagged words used by the
CAS objects are plain tuples ``(val, cnt, stat)``; tuple equality gives us
exact compare-and-swap semantics including the ABA counter.

A process-wide *yield hook* can be installed so a cooperative scheduler can
interleave threads deterministically at every atomic step; when no hook is
installed the cost is one attribute load and a None check.
"""

from __future__ import annotations

import threading

# Status values for tagged words ``(val, cnt, stat)``.
INIT = 0
IN_PROG = 1
COMMITTED = 2
FAILED = 3

_N_STRIPES = 257
_STRIPES = tuple(threading.Lock() for _ in range(_N_STRIPES))

# Cooperative scheduler hook.  Checked on every atomic operation; installed
# only by the deterministic schedule runner in the harness.
_yield_hook = None


def set_yield_hook(fn):
    """Install (or clear, with None) the global scheduler yield hook.

    Returns the previously installed hook so callers can restore it.
    """
    global _yield_hook
    prev = _yield_hook
    _yield_hook = fn
    return prev


def maybe_yield():
    h = _yield_hook
    if h is not None:
        h()


class AtomicWord:
    """A single word supporting load / store / cas / fetch_add.

    ``load`` is a plain attribute read (atomic under the GIL); mutators take
    the stripe lock so a CAS can never interleave with a store.
    """

    __slots__ = ("_v", "_lock")

    def __init__(self, value=0):
        self._v = value
        self._lock = _STRIPES[(id(self) >> 4) % _N_STRIPES]

    def load(self):
        maybe_yield()
        return self._v

    def store(self, value):
        maybe_yield()
        with self._lock:
            self._v = value

    def cas(self, expected, new):
        maybe_yield()
        with self._lock:
            if self._v == expected:
                self._v = new
                return True
            return False

    def cas_with(self, expected, new, effect=None, ticks=None):
        """CAS that, on success and still under the stripe lock, optionally
        draws a tick from ``ticks`` and runs ``effect(tick)``.

        Used where a state transition and its bookkeeping (persistent mirror
        write, commit timestamp) must be indivisible, mirroring the fact that
        on hardware they are one store to one location.

        Returns ``(ok, tick_or_None)``.
        """
        maybe_yield()
        with self._lock:
            if self._v != expected:
                return False, None
            tick = ticks.next() if ticks is not None else None
            if effect is not None:
                # Run before the value swap becomes visible: loads don't take
                # the stripe lock, so anything the effect records must be in
                # place before a reader can observe the new value.
                effect(tick)
            self._v = new
            return True, tick

    def fetch_add(self, delta=1):
        maybe_yield()
        with self._lock:
            old = self._v
            self._v = old + delta
            return old

    def __repr__(self):  # debugging aid only
        return f"AtomicWord({self._v!r})"


class AtomicCounter:
    """Monotonic counter; ``next()`` returns 1, 2, 3, ... above the base."""

    __slots__ = ("_w",)

    def __init__(self, base=0):
        self._w = AtomicWord(base)

    def next(self):
        return self._w.fetch_add(1) + 1

    def peek(self):
        return self._w.load()

    def advance_to(self, floor):
        """Raise the counter so the next value is > floor (used on recovery)."""
        while True:
            cur = self._w.load()
            if cur >= floor or self._w.cas(cur, floor):
                return


class TickSource:
    """Process-order timestamps: a locked monotonic counter.

    Commit events, epoch advances and crash snapshots all draw from one
    TickSource, giving a single total order those events can be compared in.
    """

    __slots__ = ("_n", "_lock")

    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def next(self):
        with self._lock:
            self._n += 1
            return self._n

    def peek(self):
        return self._n
