"""Randomized crash-recovery campaign.

Each trial builds a fresh heap and structure, runs a few thousand recorded
operations across worker threads while the epoch clock advances, crashes at
a random heap event, lets an adversary decide the fate of every cache line
still in flight, recovers, rebuilds, and checks the rebuilt state against
the operation ledger.  Thread lifetimes are staggered so some threads go
idle an epoch or two before the crash — the states most sensitive to
descriptor-flush bugs.
"""

import random
import threading
import time
from dataclasses import dataclass, field

from ..epoch import EpochRuntime
from ..hashmap import DuplicateKey, LockFreeHashMap
from ..pmem import CrashAdversary, MalformedHeader, PersistentHeap
from ..queue import NonblockingQueue
from ..recovery import recover
from ..smr import Reclaimer
from .checker import check_map_bdl, check_queue_bdl
from .ledger import RecordingMap, RecordingQueue
from .workload import unique_value

# get : insert : remove : put weights for map trials (mutation-heavy on
# purpose — reads carry no recovery obligation).
_MAP_WEIGHTS = (1, 3, 2, 2)

# Rough heap events per structure op, used only to spread crash instants
# over the run; the tail of the range lands after quiescence, which is a
# legitimate (if quiet) crash point too.
_EVENTS_PER_OP = 14


@dataclass
class TrialResult:
    trial: int
    structure: str
    adversary: str
    mutation: str
    seed: int
    crashed_midrun: bool
    crash_epoch: int
    ops: int
    committed: int
    recovered_payloads: int
    counts: dict = field(default_factory=dict)
    violation: str = ""
    recovery_s: float = 0.0
    trial_s: float = 0.0

    def as_row(self):
        row = {
            k: getattr(self, k)
            for k in (
                "trial",
                "structure",
                "adversary",
                "mutation",
                "seed",
                "crashed_midrun",
                "crash_epoch",
                "ops",
                "committed",
                "recovered_payloads",
                "violation",
                "recovery_s",
                "trial_s",
            )
        }
        row.update(self.counts)
        return row


def _map_stream(rng, key_space, tid):
    g, i, r, p = _MAP_WEIGHTS
    total = g + i + r + p
    n = 0
    while True:
        n += 1
        roll = rng.randrange(total)
        key = rng.randrange(key_space)
        if roll < g:
            yield "get", key, None
        elif roll < g + i:
            yield "insert", key, unique_value(tid, n)
        elif roll < g + i + r:
            yield "remove", key, None
        else:
            yield "put", key, unique_value(tid, n)


def _queue_stream(rng, tid):
    n = 0
    while True:
        n += 1
        if rng.randrange(2):
            yield "enqueue", None, unique_value(tid, n)
        else:
            yield "dequeue", None, None


def run_crash_trial(
    structure="hashmap",
    seed=0,
    adversary="random_per_line",
    mutation=None,
    threads=4,
    total_ops=2000,
    key_space=192,
    value_size=64,
    buckets=1024,
    heap_size=4 << 20,
    advance_every=24,
    sync_chance=0.01,
    arm_range=(0.05, 1.10),
):
    """One build-run-crash-recover-check cycle.  Returns a TrialResult."""
    t_start = time.perf_counter()
    rng = random.Random(seed)
    heap = PersistentHeap(size=heap_size, thread_count=threads)
    rt = EpochRuntime(heap, mutation=mutation)
    # A small, eager reclaimer keeps node retirement close on the heels of the
    # remove that caused it, so physical frees land in many distinct epoch
    # phases across a campaign instead of clumping long after their logical op.
    smr = Reclaimer(nslots=threads, scan_every=2)
    if structure == "hashmap":
        obj = LockFreeHashMap(
            rt, buckets=buckets, key_size=32, value_size=value_size, reclaimer=smr
        )
        rec = RecordingMap(obj, rt)
    elif structure == "queue":
        obj = NonblockingQueue(rt, value_size=value_size, reclaimer=smr)
        rec = RecordingQueue(obj, rt)
    else:
        raise ValueError(f"unknown structure {structure!r}")

    def meta():
        # Runs inside the heap lock at the crash instant: capture where the
        # global tick order and the epoch transition history stood.
        return {"tick": rt.ticks.peek(), "advance_ticks": dict(rt.advance_ticks)}

    est = total_ops * _EVENTS_PER_OP
    lo, hi = arm_range
    heap.arm_crash(rng.randrange(max(int(est * lo), 1), int(est * hi)), meta)

    # Stagger per-thread op counts: thread 0 retires earliest and sits idle
    # while later threads keep the clock moving.
    base = total_ops / sum(0.4 + 0.6 * (t + 1) / threads for t in range(threads))
    quotas = [max(int(base * (0.4 + 0.6 * (t + 1) / threads)), 1) for t in range(threads)]
    errors = []

    def worker(tid):
        try:
            rt.register_thread(tid)
            trng = random.Random(seed * 1_000_003 + tid)
            stream = (
                _map_stream(trng, key_space, tid)
                if structure == "hashmap"
                else _queue_stream(trng, tid)
            )
            for n in range(quotas[tid]):
                op, key, val = next(stream)
                if op == "get":
                    rec.get(key)
                elif op == "insert":
                    rec.insert(key, val)
                elif op == "remove":
                    rec.remove(key)
                elif op == "put":
                    rec.put(key, val)
                elif op == "enqueue":
                    rec.enqueue(val)
                else:
                    rec.dequeue()
                if n % advance_every == advance_every - 1:
                    rt.advance()
                if sync_chance and trng.random() < sync_chance:
                    rt.sync()
        except BaseException as exc:
            errors.append(exc)

    workers = [threading.Thread(target=worker, args=(t,)) for t in range(threads)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    if errors:
        raise errors[0]

    crashed = heap.crash_fired()
    snap = heap.take_snapshot()
    adv = CrashAdversary(adversary, seed ^ 0xA5A5_5A5A)
    image = PersistentHeap.resolve_crash_image(snap, adv)
    heap2 = PersistentHeap.from_image(image, thread_count=threads)

    t_rec = time.perf_counter()
    violation = ""
    counts = {}
    crash_epoch = 0
    n_payloads = 0
    try:
        report = recover(heap2)
        recovery_s = time.perf_counter() - t_rec
        crash_epoch = report.epoch
        counts = dict(report.counts)
        n_payloads = len(report.payload_offs)
        rt2 = EpochRuntime(heap2, resume=report)
        records = rec.all_records()
        snap_tick = snap.meta["tick"]
        advance_ticks = snap.meta["advance_ticks"]
        if structure == "hashmap":
            _, items, _ = LockFreeHashMap.rebuild(
                rt2,
                report.payload_offs,
                buckets=buckets,
                key_size=32,
                value_size=value_size,
                strict=True,
            )
            res = check_map_bdl(records, items, crash_epoch, advance_ticks, snap_tick)
        else:
            _, items = NonblockingQueue.rebuild(rt2, report.payload_offs, value_size=value_size)
            res = check_queue_bdl(records, items, crash_epoch, advance_ticks, snap_tick)
        if not res.ok:
            violation = res.witness
    except DuplicateKey as exc:
        recovery_s = time.perf_counter() - t_rec
        violation = f"rebuild: {exc}"
    except MalformedHeader as exc:
        recovery_s = time.perf_counter() - t_rec
        violation = f"recovery: {exc}"

    records = rec.all_records()
    return TrialResult(
        trial=0,
        structure=structure,
        adversary=adversary,
        mutation=mutation or "",
        seed=seed,
        crashed_midrun=crashed,
        crash_epoch=crash_epoch,
        ops=len(records),
        committed=sum(1 for r in records if r.commit is not None),
        recovered_payloads=n_payloads,
        counts=counts,
        violation=violation,
        recovery_s=round(recovery_s, 6),
        trial_s=round(time.perf_counter() - t_start, 6),
    )


def run_crash_campaign(
    trials,
    structure="hashmap",
    adversary="random_per_line",
    seed=0,
    mutation=None,
    stop_on_violation=False,
    progress=None,
    **trial_kw,
):
    """Run ``trials`` independent crash trials.  Returns (results, summary).

    ``progress`` (if given) is called as ``progress(i, result)`` after each
    trial.  ``stop_on_violation`` ends the campaign at the first violation —
    handy for mutation testing, where one witness settles the question.
    """
    results = []
    violations = 0
    for i in range(trials):
        res = run_crash_trial(
            structure=structure,
            seed=seed * 1_000_003 + i,
            adversary=adversary,
            mutation=mutation,
            **trial_kw,
        )
        res.trial = i
        results.append(res)
        if res.violation:
            violations += 1
            if stop_on_violation:
                break
        if progress is not None:
            progress(i, res)
    summary = {
        "trials": len(results),
        "structure": structure,
        "adversary": adversary,
        "mutation": mutation or "",
        "violations": violations,
        "crashed_midrun": sum(1 for r in results if r.crashed_midrun),
        "mean_trial_s": round(sum(r.trial_s for r in results) / max(len(results), 1), 4),
        "mean_recovery_s": round(sum(r.recovery_s for r in results) / max(len(results), 1), 6),
    }
    return results, summary
