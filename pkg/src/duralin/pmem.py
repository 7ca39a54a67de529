"""Emulated persistent-memory substrate with deterministic crash injection.

The heap is a flat byte region split into 64-byte lines.  Two images are
kept: *working* (what loads and stores see) and *durable* (what survives a
crash).  ``write_back(off)`` stages a snapshot of the line(s) covering the
given range, and ``persist_fence()`` merges everything staged into the
durable image — so a byte is durable exactly when a fenced write-back
covered it, which is the ADR-style contract the runtime above is written
against.

A crash can be armed at a deterministic event tick.  When the heap's event
counter reaches the armed tick (events are content writes, write-backs and
fences), the durable image and the still-unfenced staged lines are frozen.
A :class:`CrashAdversary` then decides, per staged line, whether it reached
the medium before the crash; the decision is a pure hash of (seed, line), so
a given seed always yields the same image.

Layout of a heap of ``size`` bytes (all offsets line-aligned)::

    0              superblock (magic, version, size, directory offset, ...)
    64             epoch clock line
    128            descriptor table, one 64B line per thread
    dir_off        slab directory, one 64B record per size class
    ...            allocation bitmaps, then the slabs themselves

Block headers are 48 bytes and live at the start of every allocated slot::

    +0  anti      u64   paired anti-block offset, or 0
    +8  epoch     u64   epoch tag (0 = not tagged / scrubbed)
    +16 type      u64   1 payload, 2 anti, 3 descriptor
    +24 tid_sn    u64   owner thread in the high 16 bits, serial in the low 48
    +32 blk_uid   u64   allocation-unique id pairing payloads with antis
    +40 reserved  u64
"""

from __future__ import annotations

import mmap
import os
import struct
import threading

import numpy as np


LINE = 64

SB_MAGIC = b"NBMTHEAP"
SB_VERSION = 1

HDR_SIZE = 48
H_ANTI = 0
H_EPOCH = 8
H_TYPE = 16
H_TIDSN = 24
H_UID = 32

T_PAYLOAD = 1
T_ANTI = 2
T_DESC = 3

TID_SHIFT = 48
SN_MASK = (1 << 48) - 1
MAX_THREADS = 64

SIZE_CLASSES = (64, 128, 256, 1024, 2048, 4096)
_DEFAULT_SHARES = {64: 0.10, 128: 0.06, 256: 0.12, 1024: 0.10, 2048: 0.57, 4096: 0.05}

_U64 = struct.Struct("<Q")
M64 = (1 << 64) - 1


class OutOfMemory(Exception):
    pass


class MalformedHeader(Exception):
    pass


def pack_tid_sn(tid, sn):
    return ((tid & 0xFFFF) << TID_SHIFT) | (sn & SN_MASK)


def split_tid_sn(word):
    return word >> TID_SHIFT, word & SN_MASK


def _mix64(seed, line):
    # splitmix-style finalizer; pure function of (seed, line) so adversary
    # decisions replay identically from the same seed.
    x = (seed * 0x9E3779B97F4A7C15 + line * 0xBF58476D1CE4E5B9 + 0x94D049BB133111EB) & M64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & M64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & M64
    return x ^ (x >> 31)


class CrashAdversary:
    """Decides which staged-but-unfenced lines survive a crash."""

    DROP_ALL_UNFENCED = "drop_all_unfenced"
    KEEP_ALL_UNFENCED = "keep_all_unfenced"
    RANDOM_PER_LINE = "random_per_line"

    POLICIES = (DROP_ALL_UNFENCED, KEEP_ALL_UNFENCED, RANDOM_PER_LINE)

    def __init__(self, policy, seed=0):
        if policy not in self.POLICIES:
            raise ValueError(f"unknown adversary policy {policy!r}")
        self.policy = policy
        self.seed = seed

    def keeps(self, line_no):
        if self.policy == self.DROP_ALL_UNFENCED:
            return False
        if self.policy == self.KEEP_ALL_UNFENCED:
            return True
        return _mix64(self.seed, line_no) & 1 == 1


class _SlabClass:
    __slots__ = ("size", "start", "slot_count", "hwm", "bitmap_off", "record_off", "free")

    def __init__(self, size, start, slot_count, bitmap_off, record_off):
        self.size = size
        self.start = start
        self.slot_count = slot_count
        self.hwm = 0
        self.bitmap_off = bitmap_off
        self.record_off = record_off
        self.free = []

    @property
    def end(self):
        return self.start + self.slot_count * self.size


class CrashSnapshot:
    __slots__ = ("durable", "pending", "cache_tick", "meta")

    def __init__(self, durable, pending, cache_tick, meta):
        self.durable = durable
        self.pending = pending
        self.cache_tick = cache_tick
        self.meta = meta


class PersistentHeap:
    """The emulated device plus its slab allocator.

    Allocation metadata that recovery relies on (per-class high-water marks)
    is written back on every allocation; bitmaps are transient hints and are
    rebuilt after a crash — recovery trusts block headers, not bitmaps.
    """

    def __init__(self, size=8 << 20, thread_count=8, path=None, class_shares=None):
        if not 1 <= thread_count <= MAX_THREADS:
            raise ValueError("thread_count must be in 1..64")
        size = (size // LINE) * LINE
        self.size = size
        self.thread_count = thread_count
        self.path = path
        self._lock = threading.Lock()
        self._alloc_lock = threading.Lock()
        self._pending = {}
        self._tick = 0
        self._armed_at = None
        self._meta_hook = None
        self._snap = None

        if path is not None:
            f = open(path, "w+b")
            f.truncate(size)
            self._file = f
            self._working = mmap.mmap(f.fileno(), size)
        else:
            self._file = None
            self._working = bytearray(size)
        self._durable = bytearray(size)

        self.epoch_word_off = LINE
        self.desc_table_off = 2 * LINE
        self.dir_off = self.desc_table_off + thread_count * LINE
        self._classes = self._layout(class_shares or _DEFAULT_SHARES)
        self._write_superblock()
        self.persist_all()

    # ---------------------------------------------------------------- layout

    def _layout(self, shares):
        total_share = sum(shares.get(c, 0.0) for c in SIZE_CLASSES)
        bitmaps_off = self.dir_off + len(SIZE_CLASSES) * LINE
        budget = self.size - bitmaps_off
        if budget <= 0:
            raise ValueError("heap too small for metadata")
        # First pass: slot counts from byte shares (reserving ~2% for bitmaps).
        counts = []
        for c in SIZE_CLASSES:
            frac = shares.get(c, 0.0) / total_share
            counts.append(int(budget * 0.98 * frac) // c)
        # Place bitmaps then slabs.
        classes = []
        off = bitmaps_off
        bm_offs = []
        for c, n in zip(SIZE_CLASSES, counts):
            bm_offs.append(off)
            off += ((n + 7) // 8 + LINE - 1) // LINE * LINE
        slab_off = off
        for i, (c, n) in enumerate(zip(SIZE_CLASSES, counts)):
            rec = self.dir_off + i * LINE
            classes.append(_SlabClass(c, slab_off, n, bm_offs[i], rec))
            slab_off += c * n
        if slab_off > self.size:
            raise ValueError("heap layout overflow")
        return classes

    def _write_superblock(self):
        self._raw_write(0, SB_MAGIC)
        self._raw_write_u64(8, SB_VERSION)
        self._raw_write_u64(16, self.size)
        self._raw_write_u64(24, self.dir_off)
        self._raw_write_u64(32, self.desc_table_off)
        self._raw_write_u64(40, self.epoch_word_off)
        self._raw_write_u64(48, self.thread_count)
        for sc in self._classes:
            r = sc.record_off
            self._raw_write_u64(r + 0, sc.size)
            self._raw_write_u64(r + 8, sc.start)
            self._raw_write_u64(r + 16, sc.slot_count)
            self._raw_write_u64(r + 24, sc.hwm)
            self._raw_write_u64(r + 32, sc.bitmap_off)

    @classmethod
    def from_image(cls, image, thread_count=None):
        """Reconstruct a heap object from a crash (or saved) image.

        Working and durable both start as the image: that is exactly the
        post-crash state of the device.
        """
        if bytes(image[0:8]) != SB_MAGIC:
            raise ValueError("bad heap image: magic mismatch")
        if _U64.unpack_from(image, 8)[0] != SB_VERSION:
            raise ValueError("bad heap image: unsupported version")
        size = _U64.unpack_from(image, 16)[0]
        if size != len(image):
            raise ValueError("bad heap image: size field does not match data")
        tc = _U64.unpack_from(image, 48)[0]
        if thread_count is not None and thread_count != tc:
            raise ValueError("thread_count does not match image")
        heap = cls.__new__(cls)
        heap.size = size
        heap.thread_count = tc
        heap.path = None
        heap._lock = threading.Lock()
        heap._alloc_lock = threading.Lock()
        heap._pending = {}
        heap._tick = 0
        heap._armed_at = None
        heap._meta_hook = None
        heap._snap = None
        heap._file = None
        heap._working = bytearray(image)
        heap._durable = bytearray(image)
        heap.dir_off = _U64.unpack_from(image, 24)[0]
        heap.desc_table_off = _U64.unpack_from(image, 32)[0]
        heap.epoch_word_off = _U64.unpack_from(image, 40)[0]
        classes = []
        for i in range(len(SIZE_CLASSES)):
            r = heap.dir_off + i * LINE
            sc = _SlabClass(
                _U64.unpack_from(image, r + 0)[0],
                _U64.unpack_from(image, r + 8)[0],
                _U64.unpack_from(image, r + 16)[0],
                _U64.unpack_from(image, r + 32)[0],
                r,
            )
            sc.hwm = _U64.unpack_from(image, r + 24)[0]
            classes.append(sc)
        heap._classes = classes
        return heap

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_image(f.read())

    def save(self, path):
        """Write the durable image to a file (the on-disk heap format)."""
        with open(path, "wb") as f:
            f.write(bytes(self._durable))

    def close(self):
        if self._file is not None:
            self._working.close()
            self._file.close()
            self._file = None

    # ------------------------------------------------------- raw (init only)

    def _raw_write(self, off, data):
        self._working[off : off + len(data)] = data

    def _raw_write_u64(self, off, v):
        self._working[off : off + 8] = _U64.pack(v & M64)

    # ------------------------------------------------------------ load/store

    def read(self, off, n):
        return bytes(self._working[off : off + n])

    def read_u64(self, off):
        return _U64.unpack_from(self._working, off)[0]

    def write(self, off, data):
        with self._lock:
            self._working[off : off + len(data)] = data
            self._bump()

    def write_u64(self, off, v):
        self.write(off, _U64.pack(v & M64))

    def read_durable(self, off, n):
        return bytes(self._durable[off : off + n])

    def read_durable_u64(self, off):
        return _U64.unpack_from(self._durable, off)[0]

    # ------------------------------------------------------------ durability

    def write_back(self, off, size=1):
        """Stage the line(s) covering [off, off+size) for persistence."""
        first = off // LINE
        last = (off + max(size, 1) - 1) // LINE
        with self._lock:
            w = self._working
            for ln in range(first, last + 1):
                self._pending[ln] = bytes(w[ln * LINE : (ln + 1) * LINE])
            self._bump()

    def write_back_block(self, off):
        """Stage every line of the slot containing ``off``."""
        sc = self._class_of(off)
        self.write_back(off, sc.size if sc is not None else 1)

    def persist_fence(self):
        """Make every staged line durable."""
        with self._lock:
            d = self._durable
            for ln, data in self._pending.items():
                d[ln * LINE : (ln + 1) * LINE] = data
            self._pending.clear()
            self._bump()

    def persist_all(self):
        """Bulk flush+fence of the whole image (setup/rebuild paths only)."""
        with self._lock:
            self._durable[:] = self._working
            self._pending.clear()
            self._bump()

    def pending_lines(self):
        with self._lock:
            return dict(self._pending)

    @property
    def cache_tick(self):
        return self._tick

    # ---------------------------------------------------------------- crash

    def arm_crash(self, at_tick, meta_hook=None):
        """Freeze a crash snapshot when the event counter reaches ``at_tick``.

        ``meta_hook`` runs inside the heap lock at the crash instant and must
        not call back into the heap; its return value is stored on the
        snapshot (the harness uses it to capture the global tick order).
        """
        with self._lock:
            self._armed_at = at_tick
            self._meta_hook = meta_hook

    def _bump(self):
        self._tick += 1
        if self._armed_at is not None and self._snap is None and self._tick >= self._armed_at:
            self._snap = CrashSnapshot(
                bytes(self._durable),
                dict(self._pending),
                self._tick,
                self._meta_hook() if self._meta_hook is not None else None,
            )

    def crash_fired(self):
        return self._snap is not None

    def take_snapshot(self):
        """Return the armed snapshot, freezing one now if none fired yet."""
        with self._lock:
            if self._snap is None:
                self._snap = CrashSnapshot(
                    bytes(self._durable),
                    dict(self._pending),
                    self._tick,
                    self._meta_hook() if self._meta_hook is not None else None,
                )
            return self._snap

    @staticmethod
    def resolve_crash_image(snap, adversary):
        """Apply an adversary to a snapshot: staged lines it keeps reach the
        medium, the rest are lost.  Returns the post-crash image."""
        img = bytearray(snap.durable)
        for ln, data in snap.pending.items():
            if adversary.keeps(ln):
                img[ln * LINE : (ln + 1) * LINE] = data
        return img

    # ------------------------------------------------------------- allocator

    def _class_of(self, off):
        for sc in self._classes:
            if sc.start <= off < sc.end:
                return sc
        return None

    def classify_offset(self, off):
        sc = self._class_of(off)
        if sc is None or (off - sc.start) % sc.size != 0:
            raise ValueError(f"offset {off} is not a slot boundary")
        return sc, (off - sc.start) // sc.size

    def block_size(self, off):
        sc = self._class_of(off)
        if sc is None:
            raise ValueError(f"offset {off} outside slabs")
        return sc.size

    def pm_alloc(self, size):
        """Allocate a slot of the smallest class that fits ``size`` bytes
        (header included); falls back to larger classes when one is full.
        The slot's working bytes are zeroed; the class high-water mark is
        written back immediately so post-crash enumeration can trust it."""
        with self._alloc_lock:
            for sc in self._classes:
                if sc.size < size or sc.slot_count == 0:
                    continue
                if sc.free:
                    slot = sc.free.pop()
                elif sc.hwm < sc.slot_count:
                    slot = sc.hwm
                    sc.hwm += 1
                    self.write_u64(sc.record_off + 24, sc.hwm)
                    self.write_back(sc.record_off + 24)
                else:
                    continue
                self._set_bit(sc, slot, True)
                off = sc.start + slot * sc.size
                self.write(off, b"\0" * sc.size)
                return off
        raise OutOfMemory(f"no slot for {size} bytes")

    def pm_free(self, off):
        with self._alloc_lock:
            sc, slot = self.classify_offset(off)
            self._set_bit(sc, slot, False)
            sc.free.append(slot)

    def _set_bit(self, sc, slot, on):
        byte_off = sc.bitmap_off + slot // 8
        mask = 1 << (slot % 8)
        b = self._working[byte_off]
        self.write(byte_off, bytes([b | mask if on else b & ~mask]))

    def rebuild_allocation(self, live_offsets):
        """Reset bitmaps and free lists so exactly ``live_offsets`` are
        allocated (recovery's final step); bitmap bytes are written back,
        the caller fences.  Vectorized: recovery hands this millions of
        offsets and nothing here may dominate the scan."""
        offs = np.asarray(live_offsets, dtype=np.int64)
        claimed = 0
        with self._alloc_lock:
            for sc in self._classes:
                mine = offs[(offs >= sc.start) & (offs < sc.end)]
                rel = mine - sc.start
                if rel.size and (rel % sc.size).any():
                    raise ValueError("offset not a slot boundary")
                slots = rel // sc.size
                claimed += slots.size
                nbytes = (sc.slot_count + 7) // 8
                bits = np.zeros(nbytes * 8, dtype=np.uint8)
                bits[slots] = 1
                if nbytes:
                    self.write(sc.bitmap_off, np.packbits(bits, bitorder="little").tobytes()[:nbytes])
                    self.write_back(sc.bitmap_off, nbytes)
                # Free slots below the high-water mark, descending so pop()
                # hands out the lowest first.
                free = np.setdiff1d(np.arange(sc.hwm, dtype=np.int64), slots)
                sc.free = free[::-1].tolist()
        if claimed != offs.size:
            raise ValueError("live offset outside every slab")

    def classes(self):
        return list(self._classes)

    # --------------------------------------------------------- block headers

    def header_write(self, off, anti, epoch, btype, tid, sn, uid):
        self.write(
            off,
            struct.pack(
                "<QQQQQ",
                anti & M64,
                epoch & M64,
                btype & M64,
                pack_tid_sn(tid, sn),
                uid & M64,
            ),
        )

    def header_read(self, off):
        anti, epoch, btype, tid_sn, uid = struct.unpack_from("<QQQQQ", self._working, off)
        return anti, epoch, btype, tid_sn, uid
