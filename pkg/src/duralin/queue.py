"""Nonblocking FIFO queue (two-pointer, helped tail) over CAS cells.

Each element owns a payload block ``[sn u64 | value value_size]``.  The
serial number is drawn from a transient counter *between* the tail read and
the tail.next read, and re-drawn on every retry: successful appends
serialize on the tail's next cell, so commit order, sn order and FIFO order
all agree — recovery sorts surviving payloads by sn to rebuild the queue,
and the durability checker leans on the same property.

Dequeue detaches the head successor's payload and swings the head with a
``lin_cas``; the dequeued node becomes the new dummy, and the old dummy is
retired (its payload, already consumed by the dequeue that made it dummy,
is handed to ``pdelete``).
"""

from __future__ import annotations

import struct

from .atomics import AtomicCounter
from .cascell import CasCell
from .pmem import M64, HDR_SIZE
from .smr import Reclaimer

_U64 = struct.Struct("<Q")


class _QNode:
    __slots__ = ("val", "sn", "payload", "next")

    def __init__(self, val, sn, payload, next_id=0):
        self.val = val
        self.sn = sn
        self.payload = payload
        self.next = CasCell(next_id)


class NonblockingQueue:
    def __init__(self, rt, value_size=1024, reclaimer=None, _sn_base=0):
        if value_size < 8:
            raise ValueError("value_size must be >= 8")
        self._rt = rt
        self.value_size = value_size
        self._reg = {}
        self._idc = AtomicCounter(0)
        self._smr = reclaimer if reclaimer is not None else Reclaimer(rt.thread_count)
        self._sn = AtomicCounter(_sn_base)
        dummy = _QNode(None, _sn_base, 0)
        did = self._new_id(dummy)
        self._head = CasCell(did)
        self._tail = CasCell(did)

    def _encode(self, sn, val):
        body = bytearray(8 + self.value_size)
        _U64.pack_into(body, 0, sn & M64)
        _U64.pack_into(body, 8, val & M64)
        return bytes(body)

    @staticmethod
    def decode_payload(heap, off):
        sn = _U64.unpack_from(heap._working, off + HDR_SIZE)[0]
        val = _U64.unpack_from(heap._working, off + HDR_SIZE + 8)[0]
        return sn, val

    def _new_id(self, node):
        nid = 2 * self._idc.next()
        self._reg[nid] = node
        return nid

    def _retire(self, nid, node):
        rt = self._rt
        payload = node.payload

        def fn():
            self._reg.pop(nid, None)
            if payload:
                rt.pdelete(payload)

        self._smr.retire(rt.ctx().tid, fn)

    # ------------------------------------------------------------------- api

    def enqueue(self, val):
        """Append; returns the element's serial number."""
        rt = self._rt
        tid = rt.ctx().tid
        self._smr.enter(tid)
        payload = rt.pnew(self._encode(0, val))
        node = _QNode(val, 0, payload)
        nid = self._new_id(node)
        try:
            while True:
                t_id = self._tail.load(rt)
                tn = self._reg[t_id]
                sn = self._sn.next()
                nv = tn.next.load(rt)
                if t_id != self._tail.load(rt):
                    continue
                if nv == 0:
                    node.sn = sn
                    rt.write_payload(payload, 0, _U64.pack(sn & M64))
                    if rt.lin_cas(tn.next, 0, nid):
                        self._tail.cas(rt, t_id, nid)
                        return sn
                else:
                    self._tail.cas(rt, t_id, nv)
        finally:
            self._smr.exit(tid)

    def dequeue(self):
        """Pop the oldest element; returns (sn, val) or None when empty."""
        rt = self._rt
        tid = rt.ctx().tid
        self._smr.enter(tid)
        try:
            while True:
                h_id = self._head.load(rt)
                hn = self._reg[h_id]
                nv = hn.next.load(rt)
                if nv == 0:
                    return None
                t_id = self._tail.load(rt)
                if h_id == t_id:
                    self._tail.cas(rt, t_id, nv)
                n = self._reg[nv]
                rt.pdetach(n.payload)
                if rt.lin_cas(self._head, h_id, nv):
                    self._retire(h_id, hn)
                    return n.sn, n.val
                # Lost the head swing; the abort dropped the detach, retry.
        finally:
            self._smr.exit(tid)

    # -------------------------------------------------------------- plumbing

    def extract_items(self):
        """Quiescent snapshot [(sn, val), ...] oldest first."""
        out = []
        curr_id = self._head.var.load()[0]
        node = self._reg[curr_id]
        nxt = node.next.var.load()[0]
        while nxt:
            node = self._reg[nxt]
            out.append((node.sn, node.val))
            nxt = node.next.var.load()[0]
        return out

    @classmethod
    def rebuild(cls, rt, payload_offs, value_size=1024):
        """Reconstruct a queue from recovered payloads, oldest sn first.

        Returns (queue, [(sn, val), ...]).
        """
        q = cls(rt, value_size=value_size)
        items = []
        for off in payload_offs:
            sn, val = cls.decode_payload(rt.heap, int(off))
            items.append((sn, val, int(off)))
        items.sort()
        tail_id = q._head.var.load()[0]
        tail = q._reg[tail_id]
        for sn, val, off in items:
            node = _QNode(val, sn, off)
            nid = q._new_id(node)
            tail.next.raw_init(nid)
            tail_id, tail = nid, node
        q._tail = CasCell(tail_id)
        if items:
            q._sn = AtomicCounter(items[-1][0])
        return q, [(sn, val) for sn, val, _ in items]
