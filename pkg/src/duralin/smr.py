"""Epoch-based reclamation for the structures' transient nodes.

Python's GC keeps node objects alive while referenced, so this is not about
use-after-free of the objects — it delays the *persistent* side effect of
reclamation (``pdelete``, which recycles heap slots) until no operation that
began before the node was unlinked can still be holding it.  Without the
grace period, a stalled traversal could attach an anti-block to a payload
whose slot was already reused.
"""

from __future__ import annotations

from .atomics import AtomicWord

_IDLE = 1 << 62


class Reclaimer:
    """Classic three-epoch scheme: ops bracket themselves with enter/exit,
    retirements are stamped with the reclamation epoch, and a stamped entry
    runs once every slot is idle or entered after the stamp."""

    def __init__(self, nslots=64, scan_every=64):
        self.epoch = AtomicWord(0)
        self.res = [AtomicWord(_IDLE) for _ in range(nslots)]
        self.limbo = [[] for _ in range(nslots)]
        self._since = [0] * nslots
        self._scan_every = scan_every

    def enter(self, slot):
        self.res[slot].store(self.epoch.load())

    def exit(self, slot):
        self.res[slot].store(_IDLE)

    def retire(self, slot, fn):
        self.limbo[slot].append((self.epoch.load(), fn))
        self._since[slot] += 1
        if self._since[slot] >= self._scan_every:
            self._since[slot] = 0
            e = self.epoch.load()
            self.epoch.cas(e, e + 1)
            self.scan(slot)

    def scan(self, slot):
        horizon = min(r.load() for r in self.res)
        pending = self.limbo[slot]
        keep = []
        for item in pending:
            if item[0] < horizon:
                item[1]()
            else:
                keep.append(item)
        self.limbo[slot] = keep

    def drain(self, slot):
        """Run everything immediately; caller guarantees quiescence."""
        for _, fn in self.limbo[slot]:
            fn()
        self.limbo[slot].clear()
