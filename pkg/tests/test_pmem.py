"""Emulated persistent heap: layout, staging/fence semantics, crash injection,
and the slab allocator."""

import struct

import pytest
from hypothesis import given, strategies as st

from duralin.pmem import (
    LINE,
    SIZE_CLASSES,
    CrashAdversary,
    OutOfMemory,
    PersistentHeap,
    pack_tid_sn,
    split_tid_sn,
)


# ------------------------------------------------------------------ layout

def test_superblock_bytes_match_layout_contract():
    # Independently derived: the first line is
    #   magic[8] version u64 heap_size u64 dir_off u64
    #   desc_table_off u64 epoch_word_off u64 thread_count u64
    # with the epoch line at 64, descriptors at 128 (one line per thread),
    # and the directory right after the descriptor table.
    heap = PersistentHeap(size=1 << 20, thread_count=3)
    expected = b"NBMTHEAP" + struct.pack(
        "<QQQQQQ", 1, 1 << 20, 128 + 3 * LINE, 128, 64, 3
    )
    assert heap.read(0, len(expected)) == expected
    assert heap.read_durable(0, len(expected)) == expected  # fenced at init


def test_directory_records_are_consistent():
    heap = PersistentHeap(size=2 << 20, thread_count=4)
    classes = heap.classes()
    assert [sc.size for sc in classes] == list(SIZE_CLASSES)
    prev_end = heap.dir_off + len(SIZE_CLASSES) * LINE
    for i, sc in enumerate(classes):
        rec = heap.dir_off + i * LINE
        # Directory record mirrors the class: size, start, slot_count, hwm, bitmap.
        assert heap.read_u64(rec + 0) == sc.size
        assert heap.read_u64(rec + 8) == sc.start
        assert heap.read_u64(rec + 16) == sc.slot_count
        assert heap.read_u64(rec + 24) == sc.hwm == 0
        assert heap.read_u64(rec + 32) == sc.bitmap_off
        assert sc.bitmap_off >= prev_end  # metadata regions never overlap slabs
        assert sc.start % LINE == 0
        assert sc.end <= heap.size
    starts = [sc.start for sc in classes]
    assert starts == sorted(starts)
    for a, b in zip(classes, classes[1:]):
        assert a.end <= b.start


def test_save_load_roundtrip(tmp_path):
    heap = PersistentHeap(size=1 << 20, thread_count=2)
    off = heap.pm_alloc(64)
    heap.write_u64(off + 48, 0xDEADBEEF)
    heap.write_back(off, 64)
    heap.persist_fence()
    path = tmp_path / "heap.img"
    heap.save(str(path))
    loaded = PersistentHeap.load(str(path))
    assert loaded.size == heap.size
    assert loaded.thread_count == 2
    assert loaded.read_u64(off + 48) == 0xDEADBEEF
    assert [sc.hwm for sc in loaded.classes()] == [sc.hwm for sc in heap.classes()]


def test_from_image_rejects_corrupt_images():
    heap = PersistentHeap(size=1 << 20, thread_count=2)
    img = bytearray(heap.read_durable(0, heap.size))
    with pytest.raises(ValueError):
        PersistentHeap.from_image(img[: heap.size - LINE])  # size field mismatch
    with pytest.raises(ValueError):
        PersistentHeap.from_image(b"WRONGMAG" + bytes(img[8:]))
    with pytest.raises(ValueError):
        PersistentHeap.from_image(img, thread_count=5)  # image says 2


# ------------------------------------------------- staging and fence semantics

def test_write_is_not_durable_until_fenced():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    off = heap.pm_alloc(64)
    heap.write_u64(off + 48, 11)
    assert heap.read_u64(off + 48) == 11
    assert heap.read_durable_u64(off + 48) == 0  # store alone: volatile
    heap.persist_fence()
    assert heap.read_durable_u64(off + 48) == 0  # fence without write-back: lost
    heap.write_back(off + 48)
    assert heap.read_durable_u64(off + 48) == 0  # staged, not yet fenced
    heap.persist_fence()
    assert heap.read_durable_u64(off + 48) == 11


def test_write_back_snapshots_line_content_at_stage_time():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    off = heap.pm_alloc(64)
    heap.write_u64(off + 48, 1)
    heap.write_back(off + 48)
    heap.write_u64(off + 48, 2)  # after the stage: not part of it
    heap.persist_fence()
    assert heap.read_durable_u64(off + 48) == 1
    assert heap.read_u64(off + 48) == 2


def test_fence_covers_all_staged_lines():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    a = heap.pm_alloc(64)
    b = heap.pm_alloc(64)
    heap.write_u64(a + 48, 7)
    heap.write_u64(b + 48, 8)
    heap.write_back(a + 48)
    heap.write_back(b + 48)
    heap.persist_fence()
    assert heap.read_durable_u64(a + 48) == 7
    assert heap.read_durable_u64(b + 48) == 8
    assert heap.pending_lines() == {}


def test_write_back_block_covers_every_line_of_the_slot():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    off = heap.pm_alloc(256)  # four lines
    assert heap.block_size(off) == 256
    heap.write_u64(off + 8, 1)
    heap.write_u64(off + 200, 2)  # a different line of the same slot
    heap.write_back_block(off)
    heap.persist_fence()
    assert heap.read_durable_u64(off + 8) == 1
    assert heap.read_durable_u64(off + 200) == 2


# ------------------------------------------------------------ crash injection

def test_armed_crash_freezes_at_the_exact_event_tick():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    off = heap.pm_alloc(64)
    heap.write_u64(off + 48, 1)
    heap.write_back(off + 48)
    heap.persist_fence()

    t0 = heap.cache_tick
    meta_seen = []
    heap.arm_crash(t0 + 3, meta_hook=lambda: meta_seen.append(1) or {"m": 1})
    heap.write_u64(off + 48, 2)   # t0+1
    heap.write_back(off + 48)     # t0+2: stages the line holding 2
    heap.write_u64(off + 48, 3)   # t0+3: crash fires during this event
    heap.write_back(off + 48)     # after the crash: must not leak into the snap
    heap.persist_fence()

    assert heap.crash_fired()
    snap = heap.take_snapshot()
    assert snap.cache_tick == t0 + 3
    assert snap.meta == {"m": 1} and meta_seen == [1]
    # Durable part of the snapshot still holds the fenced value 1 ...
    assert struct.unpack_from("<Q", snap.durable, off + 48)[0] == 1
    # ... and the staged (unfenced) line holds 2: the write of 3 preceded no
    # new write-back before the crash instant.
    line = (off + 48) // LINE
    assert line in snap.pending
    staged = snap.pending[line]
    assert struct.unpack_from("<Q", staged, (off + 48) % LINE)[0] == 2
    # Snapshot is frozen: it is the same object on every later call.
    heap.write_u64(off + 48, 9)
    assert heap.take_snapshot() is snap


def test_take_snapshot_without_armed_crash_freezes_now():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    off = heap.pm_alloc(64)
    heap.write_u64(off + 48, 5)
    heap.write_back(off + 48)
    snap = heap.take_snapshot()
    line = (off + 48) // LINE
    assert line in snap.pending
    assert struct.unpack_from("<Q", snap.durable, off + 48)[0] == 0


def test_resolve_crash_image_applies_only_kept_lines():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    a = heap.pm_alloc(64)
    b = heap.pm_alloc(64)
    heap.write_u64(a + 48, 7)
    heap.write_u64(b + 48, 8)
    heap.write_back(a + 48)
    heap.write_back(b + 48)
    snap = heap.take_snapshot()

    keep = PersistentHeap.resolve_crash_image(snap, CrashAdversary("keep_all_unfenced"))
    drop = PersistentHeap.resolve_crash_image(snap, CrashAdversary("drop_all_unfenced"))
    assert struct.unpack_from("<Q", keep, a + 48)[0] == 7
    assert struct.unpack_from("<Q", keep, b + 48)[0] == 8
    assert struct.unpack_from("<Q", drop, a + 48)[0] == 0
    assert struct.unpack_from("<Q", drop, b + 48)[0] == 0

    adv = CrashAdversary("random_per_line", seed=12345)
    img = PersistentHeap.resolve_crash_image(snap, adv)
    for off in (a, b):
        want = 7 if off == a else 8
        got = struct.unpack_from("<Q", img, off + 48)[0]
        assert got == (want if adv.keeps((off + 48) // LINE) else 0)


# Keep-decision bit patterns for lines 0..63, frozen from an independent
# splitmix64-finalizer implementation of the documented hash.
_KEEP_BITS = {0: 0x646797113AED4287, 1: 0x32CEB429F8703002, 12345: 0x337909963729646D}


def _splitmix_keeps(seed, line):
    m = (1 << 64) - 1
    x = (seed * 0x9E3779B97F4A7C15 + line * 0xBF58476D1CE4E5B9 + 0x94D049BB133111EB) & m
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & m
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & m
    x ^= x >> 31
    return x & 1 == 1


def test_adversary_decisions_are_deterministic_and_match_oracle():
    for seed, bits in _KEEP_BITS.items():
        adv1 = CrashAdversary("random_per_line", seed=seed)
        adv2 = CrashAdversary("random_per_line", seed=seed)
        for line in range(64):
            want = bits >> line & 1 == 1
            assert _splitmix_keeps(seed, line) is want
            assert adv1.keeps(line) is want
            assert adv2.keeps(line) is want  # same seed, same decisions
    # Different seeds must not be the same function.
    a0 = [CrashAdversary("random_per_line", 0).keeps(ln) for ln in range(64)]
    a1 = [CrashAdversary("random_per_line", 1).keeps(ln) for ln in range(64)]
    assert a0 != a1


def test_adversary_rejects_unknown_policy():
    with pytest.raises(ValueError):
        CrashAdversary("flip_a_coin")


# --------------------------------------------------------------- allocator

def test_alloc_zeroes_slot_and_persists_hwm():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    sc = heap.classes()[0]
    off = heap.pm_alloc(64)
    assert off == sc.start  # first slot of the smallest fitting class
    assert heap.read(off, 64) == b"\0" * 64
    assert sc.hwm == 1
    heap.persist_fence()
    assert heap.read_durable_u64(sc.record_off + 24) == 1  # hwm record durable


def test_alloc_picks_smallest_fitting_class():
    heap = PersistentHeap(size=2 << 20, thread_count=1)
    by_class = {sc.size: sc for sc in heap.classes()}
    for req, want in ((1, 64), (64, 64), (65, 128), (129, 256), (257, 1024), (4096, 4096)):
        off = heap.pm_alloc(req)
        sc = by_class[want]
        assert sc.start <= off < sc.end, f"request {req} landed outside class {want}"


def test_alloc_falls_back_when_class_is_full():
    heap = PersistentHeap(size=256 << 10, thread_count=1)
    small = heap.classes()[0]
    for _ in range(small.slot_count):
        heap.pm_alloc(64)
    off = heap.pm_alloc(64)  # class 64 exhausted; next fitting class serves it
    nxt = heap.classes()[1]
    assert nxt.start <= off < nxt.end


def test_alloc_raises_when_no_slot_fits():
    heap = PersistentHeap(size=128 << 10, thread_count=1, class_shares={64: 1.0})
    n = heap.classes()[0].slot_count
    assert n > 0
    for _ in range(n):
        heap.pm_alloc(64)
    with pytest.raises(OutOfMemory):
        heap.pm_alloc(64)


def test_free_reuses_slot():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    a = heap.pm_alloc(64)
    b = heap.pm_alloc(64)
    heap.pm_free(a)
    assert heap.pm_alloc(64) == a  # freed slot reused before the hwm grows
    assert heap.pm_alloc(64) != b


def test_classify_offset_validates():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    off = heap.pm_alloc(64)
    sc, slot = heap.classify_offset(off)
    assert sc.size == 64 and slot == 0
    with pytest.raises(ValueError):
        heap.classify_offset(off + 8)  # not a slot boundary
    with pytest.raises(ValueError):
        heap.classify_offset(0)  # superblock is not a slab
    with pytest.raises(ValueError):
        heap.block_size(8)


def test_rebuild_allocation_marks_exactly_the_live_set():
    heap = PersistentHeap(size=1 << 20, thread_count=1)
    sc = heap.classes()[0]
    offs = [heap.pm_alloc(64) for _ in range(5)]  # slots 0..4
    live = [offs[1], offs[3]]
    heap.rebuild_allocation(live)
    heap.persist_fence()
    # Bitmap byte: bits 1 and 3 set -> 0b01010.
    assert heap.read(sc.bitmap_off, 1)[0] == 0b01010
    assert heap.read_durable(sc.bitmap_off, 1)[0] == 0b01010
    # Free slots below the hwm come back lowest-first.
    assert heap.pm_alloc(64) == offs[0]
    assert heap.pm_alloc(64) == offs[2]
    assert heap.pm_alloc(64) == offs[4]
    assert heap.pm_alloc(64) == sc.start + 5 * 64  # then fresh slots


# ------------------------------------------------------------ block headers

def test_header_roundtrip():
    heap = PersistentHeap(size=1 << 20, thread_count=2)
    off = heap.pm_alloc(64)
    heap.header_write(off, anti=0, epoch=6, btype=1, tid=1, sn=42, uid=99)
    anti, epoch, btype, tid_sn, uid = heap.header_read(off)
    assert (anti, epoch, btype, uid) == (0, 6, 1, 99)
    assert split_tid_sn(tid_sn) == (1, 42)


@given(st.integers(0, (1 << 16) - 1), st.integers(0, (1 << 48) - 1))
def test_tid_sn_packing_roundtrip(tid, sn):
    assert split_tid_sn(pack_tid_sn(tid, sn)) == (tid, sn)
