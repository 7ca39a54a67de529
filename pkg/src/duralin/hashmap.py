"""Nonblocking chained hash map over CAS cells.

Buckets are sorted singly linked lists (Michael-style).  A cell holds the id
of the next node (even ints; 0 is the end); the low bit of a node's ``next``
marks the node logically deleted.  Every mutation that must survive a crash
goes through ``lin_cas``; plain counted CAS is only used for physical
maintenance (unlink swings, mark freezes) that any thread may help with.

The update path replaces the node: the new node is first linked *at* the old
one (``new -> old``), so the chain stays intact however the old node's next
pointer moves, then the old node is frozen and spliced out.  Before
installing, the updater bumps the old node's ``next`` counter with a
same-value CAS: a remover that found the node before the update can no
longer mark it afterwards, so a committed remove always refers to the node
that really carried the mapping at that moment.

Keys and values are u64 integers; on a persistent runtime each mapping owns
a payload block ``[key key_size | value value_size]`` (ints little-endian in
the leading 8 bytes, zero padding after).  The map runs unchanged on the
transient runtime, where payloads are inert handles.
"""

from __future__ import annotations

import struct
import threading

from .atomics import AtomicCounter
from .cascell import CasCell
from .pmem import M64
from .smr import Reclaimer

_U64 = struct.Struct("<Q")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class DuplicateKey(Exception):
    """Recovered payload set names one key twice — not a consistent cut."""


def fnv1a64(data):
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & M64
    return h


class _Node:
    __slots__ = ("key", "val", "payload", "next")

    def __init__(self, key, val, payload, next_id=0):
        self.key = key
        self.val = val
        self.payload = payload
        self.next = CasCell(next_id)


class LockFreeHashMap:
    def __init__(self, rt, buckets=1 << 20, key_size=32, value_size=1024, reclaimer=None):
        if buckets & (buckets - 1):
            raise ValueError("buckets must be a power of two")
        if key_size < 8 or value_size < 8:
            raise ValueError("key_size and value_size must be >= 8")
        self._rt = rt
        self._nb = buckets
        self.key_size = key_size
        self.value_size = value_size
        self._heads = {}
        self._heads_lock = threading.Lock()
        self._reg = {}
        self._idc = AtomicCounter(0)
        self._smr = reclaimer if reclaimer is not None else Reclaimer(rt.thread_count)

    # ------------------------------------------------------------- internals

    def _encode(self, key, val):
        body = bytearray(self.key_size + self.value_size)
        _U64.pack_into(body, 0, key & M64)
        _U64.pack_into(body, self.key_size, val & M64)
        return bytes(body)

    @staticmethod
    def decode_kv(heap, off, key_size):
        from .pmem import HDR_SIZE

        key = _U64.unpack_from(heap._working, off + HDR_SIZE)[0]
        val = _U64.unpack_from(heap._working, off + HDR_SIZE + key_size)[0]
        return key, val

    def _bucket(self, key):
        return fnv1a64(_U64.pack(key & M64)) & (self._nb - 1)

    def _head(self, b):
        c = self._heads.get(b)
        if c is None:
            with self._heads_lock:
                c = self._heads.setdefault(b, CasCell(0))
        return c

    def _new_id(self, node):
        nid = 2 * self._idc.next()
        self._reg[nid] = node
        return nid

    def _retire(self, nid, node):
        rt = self._rt
        payload = node.payload

        def fn():
            self._reg.pop(nid, None)
            rt.pdelete(payload)

        self._smr.retire(rt.ctx().tid, fn)

    def _find(self, head, key):
        """Walk the bucket, helping unlink marked nodes.

        Returns (prev_cell, node_or_None, id_at_prev, next_of_node).
        """
        rt = self._rt
        while True:
            prev = head
            curr_id = prev.load(rt)
            restart = False
            while curr_id != 0:
                curr = self._reg[curr_id]
                nv = curr.next.load(rt)
                if nv & 1:
                    nxt = nv & ~1
                    if prev.cas(rt, curr_id, nxt):
                        self._retire(curr_id, curr)
                        curr_id = nxt
                        continue
                    restart = True
                    break
                if curr.key >= key:
                    return prev, (curr if curr.key == key else None), curr_id, nv
                prev = curr.next
                curr_id = nv
            if restart:
                continue
            return prev, None, curr_id, 0

    # ------------------------------------------------------------------- api

    def get(self, key):
        rt = self._rt
        tid = rt.ctx().tid
        self._smr.enter(tid)
        try:
            _, curr, _, _ = self._find(self._head(self._bucket(key)), key)
            return curr.val if curr is not None else None
        finally:
            self._smr.exit(tid)

    def insert(self, key, val):
        """Add the mapping; False if the key is already present."""
        rt = self._rt
        tid = rt.ctx().tid
        self._smr.enter(tid)
        payload = None
        try:
            head = self._head(self._bucket(key))
            while True:
                prev, curr, curr_id, _ = self._find(head, key)
                if curr is not None:
                    if payload is not None:
                        rt.pdelete(payload)
                        self._reg.pop(nid, None)
                    return False
                if payload is None:
                    payload = rt.pnew(self._encode(key, val))
                    node = _Node(key, val, payload)
                    nid = self._new_id(node)
                node.next.raw_init(curr_id)
                if rt.lin_cas(prev, curr_id, nid):
                    return True
        finally:
            self._smr.exit(tid)

    def remove(self, key):
        rt = self._rt
        tid = rt.ctx().tid
        self._smr.enter(tid)
        try:
            head = self._head(self._bucket(key))
            while True:
                prev, curr, curr_id, nv = self._find(head, key)
                if curr is None:
                    return False
                rt.pdetach(curr.payload)
                if rt.lin_cas(curr.next, nv, nv | 1):
                    if prev.cas(rt, curr_id, nv):
                        self._retire(curr_id, curr)
                    return True
                # A failed mark aborted the op window (clearing the detach);
                # re-find and re-detach.
        finally:
            self._smr.exit(tid)

    def put(self, key, val):
        """Upsert.  Returns "insert" or "update"."""
        rt = self._rt
        tid = rt.ctx().tid
        self._smr.enter(tid)
        payload = None
        try:
            head = self._head(self._bucket(key))
            while True:
                prev, curr, curr_id, nv = self._find(head, key)
                if payload is None:
                    payload = rt.pnew(self._encode(key, val))
                    node = _Node(key, val, payload)
                    nid = self._new_id(node)
                if curr is None:
                    node.next.raw_init(curr_id)
                    if rt.lin_cas(prev, curr_id, nid):
                        return "insert"
                    continue
                # Freeze-bump: invalidate marks prepared against the old node
                # before it becomes a same-key shadow behind the new one.
                if not curr.next.cas(rt, nv, nv):
                    continue
                node.next.raw_init(curr_id)
                rt.pdetach(curr.payload)
                if rt.lin_cas(prev, curr_id, nid):
                    while True:
                        cv = curr.next.load(rt)
                        if cv & 1 or curr.next.cas(rt, cv, cv | 1):
                            break
                    fv = curr.next.load(rt) & ~1
                    if node.next.cas(rt, curr_id, fv):
                        self._retire(curr_id, curr)
                    else:
                        # Someone linked past (or helped unlink) the frozen
                        # node; a re-find leaves the bucket tidy either way.
                        self._find(head, key)
                    return "update"
        finally:
            self._smr.exit(tid)

    # -------------------------------------------------------------- plumbing

    def extract_items(self):
        """Quiescent snapshot {key: val} (no helping, no SMR)."""
        out = {}
        for head in list(self._heads.values()):
            curr_id = head.var.load()[0]
            while curr_id not in (0, 1):
                node = self._reg[curr_id & ~1]
                nv = node.next.var.load()[0]
                if not nv & 1:
                    out[node.key] = node.val
                curr_id = nv & ~1
        return out

    @classmethod
    def rebuild(cls, rt, payload_offs, buckets=1 << 20, key_size=32, value_size=1024, strict=True):
        """Reconstruct a map from recovered payload blocks.

        Returns (map, {key: val}, duplicate_keys).  A duplicate key means the
        recovered set was not a consistent cut; ``strict`` raises
        :class:`DuplicateKey` instead of collecting it.
        """
        m = cls(rt, buckets=buckets, key_size=key_size, value_size=value_size)
        items = {}
        dups = []
        by_bucket = {}
        for off in payload_offs:
            key, val = cls.decode_kv(rt.heap, int(off), key_size)
            if key in items:
                if strict:
                    raise DuplicateKey(f"key {key} recovered twice")
                dups.append(key)
                continue
            items[key] = val
            by_bucket.setdefault(m._bucket(key), []).append((key, val, int(off)))
        for b, entries in by_bucket.items():
            entries.sort(reverse=True)
            nxt = 0
            for key, val, off in entries:
                node = _Node(key, val, off, next_id=nxt)
                nxt = m._new_id(node)
            m._heads[b] = CasCell(nxt)
        return m, items, dups
