"""Crash-consistency checking of recovered state against an operation ledger.

Model
-----
A crash lands while the durable epoch word reads ``e``.  Recovery keeps the
state as of the end of epoch ``e - 2``; anything younger may be lost.  With
every commit stamped ``(count, epoch, tick)`` from the same tick source as
epoch transitions and the crash snapshot, a committed state-changing
operation falls into one of four classes:

* FORBIDDEN — commit tick after the snapshot tick, or commit epoch above
  ``e - 2``.  Its effect must not be visible (the runtime's recovery rules
  discard such blocks unconditionally).
* MUST — commit epoch ``<= e - 2`` and commit tick below the tick at which
  the clock left ``e - 2`` (the transition to ``e - 1``).  By then the
  advance had flushed and fenced the descriptor and payloads, so the effect
  must be visible.
* MAY — committed at or past that transition tick but still tagged
  ``<= e - 2``: the flush raced the commit, so durability legitimately
  depends on which cache lines happened to drain.
* (uncommitted calls and reads carry no obligation at all.)

Same-structure effects serialize per key (map) and per slot order (queue),
so the valid recovered states per key are exactly the states after some
prefix of that key's eligible operations, where the prefix covers at least
every MUST op.  The queue's tickets make this even tighter: the recovered
items must be one contiguous run of the eligible enqueue sequence whose left
edge is explained by eligible dequeues.

``check_map_bdl_enumerated`` re-derives the same verdict by brute force over
every prefix-closed subset (histories of at most a dozen or so eligible
mutations) and exists to cross-validate the decomposed checker in tests.
"""

from dataclasses import dataclass, field

_MUTATORS = ("insert", "remove", "put")
_ABSENT = object()


@dataclass
class CheckResult:
    ok: bool
    witness: str = ""
    stats: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok


def _frontier(crash_epoch, advance_ticks):
    """Tick below which a commit tagged <= crash_epoch-2 is guaranteed durable.

    The transition into ``crash_epoch - 1`` is the advance that flushed and
    fenced everything from ``crash_epoch - 2`` and older.  If the clock never
    got that far no commitment exists yet, hence 0.
    """
    return advance_ticks.get(crash_epoch - 1, 0)


def _eligible(rec, crash_epoch, snap_tick):
    if rec.commit is None:
        return False
    _, epoch, tick = rec.commit
    return epoch <= crash_epoch - 2 and tick <= snap_tick


def _apply_map(state, rec):
    if rec.op == "remove":
        return _ABSENT
    return rec.val


def check_map_bdl(records, recovered, crash_epoch, advance_ticks, snap_tick):
    """Check a recovered ``{key: val}`` against the ledger.

    ``records`` is the full ledger (reads included; they're skipped).
    ``advance_ticks`` maps epoch -> tick of the transition into it, and
    ``snap_tick`` is the tick count at the crash instant, both from the
    crash snapshot's metadata.
    """
    boundary = _frontier(crash_epoch, advance_ticks)
    by_key = {}
    n_must = n_may = 0
    for rec in records:
        if rec.op not in _MUTATORS:
            continue
        if not _eligible(rec, crash_epoch, snap_tick):
            continue
        by_key.setdefault(rec.key, []).append(rec)

    for key, ops in by_key.items():
        ops.sort(key=lambda r: r.commit[2])
        # Commit ticks are sorted, so the MUST ops are exactly a prefix.
        j_must = sum(1 for r in ops if r.commit[2] < boundary)
        n_must += j_must
        n_may += len(ops) - j_must

        state = _ABSENT
        states = [state]
        for r in ops:
            state = _apply_map(state, r)
            states.append(state)
        got = recovered.get(key, _ABSENT)
        if got not in states[j_must:]:
            want = [("absent" if s is _ABSENT else s) for s in states[j_must:]]
            return CheckResult(
                False,
                f"key {key}: recovered "
                f"{'absent' if got is _ABSENT else got}, valid states {want} "
                f"(ops {[ (r.op, r.val, r.commit) for r in ops ]})",
            )

    for key, val in recovered.items():
        if key not in by_key:
            return CheckResult(
                False,
                f"key {key}: recovered value {val} was never written by any "
                f"operation committed inside the durable frontier",
            )

    return CheckResult(
        True,
        stats={
            "keys": len(by_key),
            "must": n_must,
            "may": n_may,
            "crash_epoch": crash_epoch,
            "frontier_tick": boundary,
        },
    )


def check_map_bdl_enumerated(records, recovered, crash_epoch, advance_ticks, snap_tick):
    """Brute-force reference for small histories (<= ~14 eligible mutations).

    Enumerates every subset of eligible ops that (a) contains all MUST ops
    and (b) is prefix-closed per key in commit order, and accepts iff some
    subset's final state equals the recovered state.
    """
    boundary = _frontier(crash_epoch, advance_ticks)
    elig = [
        r
        for r in records
        if r.op in _MUTATORS and _eligible(r, crash_epoch, snap_tick)
    ]
    elig.sort(key=lambda r: r.commit[2])
    n = len(elig)
    if n > 20:
        raise ValueError(f"{n} eligible ops is too many to enumerate")
    must_mask = 0
    for i, r in enumerate(elig):
        if r.commit[2] < boundary:
            must_mask |= 1 << i

    key_order = {}
    for i, r in enumerate(elig):
        key_order.setdefault(r.key, []).append(i)

    for mask in range(1 << n):
        if mask & must_mask != must_mask:
            continue
        closed = True
        for idxs in key_order.values():
            seen_gap = False
            for i in idxs:
                if mask >> i & 1:
                    if seen_gap:
                        closed = False
                        break
                else:
                    seen_gap = True
            if not closed:
                break
        if not closed:
            continue
        state = {}
        for i, r in enumerate(elig):
            if mask >> i & 1:
                if r.op == "remove":
                    state.pop(r.key, None)
                else:
                    state[r.key] = r.val
        if state == dict(recovered):
            return CheckResult(True)
    return CheckResult(False, "no prefix-closed eligible subset explains the state")


def check_bdl(records, recovered, crash_epoch, advance_ticks, snap_tick, structure=None):
    """Dispatch to the map or queue checker.

    ``structure`` may be "hashmap" or "queue"; left as None it is inferred
    from the ledger's operation kinds.
    """
    if structure is None:
        kinds = {r.op for r in records}
        structure = "queue" if kinds & {"enqueue", "dequeue"} else "hashmap"
    if structure == "queue":
        return check_queue_bdl(records, recovered, crash_epoch, advance_ticks, snap_tick)
    return check_map_bdl(records, recovered, crash_epoch, advance_ticks, snap_tick)


def check_queue_bdl(records, recovered_items, crash_epoch, advance_ticks, snap_tick):
    """Check recovered ``[(ticket, val)]`` (ascending) against the ledger.

    Tickets are drawn between the tail read and the install, so ticket order,
    commit order, and FIFO order all agree; the recovered items must be one
    contiguous run ``E[d:m]`` of the eligible enqueue sequence where ``d``
    dequeues are applied (at least every MUST dequeue, at most every eligible
    one) and ``m`` covers at least every MUST enqueue.
    """
    boundary = _frontier(crash_epoch, advance_ticks)

    enq = [r for r in records if r.op == "enqueue" and _eligible(r, crash_epoch, snap_tick)]
    enq.sort(key=lambda r: r.commit[2])
    sns = [r.result for r in enq]
    if sns != sorted(sns):
        return CheckResult(False, f"enqueue commit order disagrees with ticket order: {sns}")
    val_of = {r.result: r.val for r in records if r.op == "enqueue" and r.result is not None}

    deq = [
        r
        for r in records
        if r.op == "dequeue" and r.result is not None and _eligible(r, crash_epoch, snap_tick)
    ]
    deq.sort(key=lambda r: r.commit[2])
    deq_sns = [r.result[0] for r in deq]
    if deq_sns != sns[: len(deq_sns)]:
        return CheckResult(
            False,
            f"eligible dequeues {deq_sns} are not the oldest eligible enqueues {sns[:len(deq_sns)]}",
        )

    e_must = sum(1 for r in enq if r.commit[2] < boundary)
    d_must = sum(1 for r in deq if r.commit[2] < boundary)

    R = list(recovered_items)
    for sn, val in R:
        if val_of.get(sn) != val:
            return CheckResult(
                False, f"ticket {sn}: recovered value {val} never enqueued (or mismatched)"
            )

    stats = {
        "eligible_enq": len(enq),
        "eligible_deq": len(deq),
        "must_enq": e_must,
        "must_deq": d_must,
        "recovered": len(R),
        "crash_epoch": crash_epoch,
    }

    if not R:
        lo = max(d_must, e_must)
        if lo > len(deq):
            return CheckResult(
                False,
                f"queue recovered empty but only {len(deq)} eligible dequeues can "
                f"consume {e_must} guaranteed enqueues",
                stats,
            )
        return CheckResult(True, stats=stats)

    r_sns = [sn for sn, _ in R]
    try:
        d = sns.index(r_sns[0])
    except ValueError:
        return CheckResult(False, f"recovered ticket {r_sns[0]} is not an eligible enqueue", stats)
    m = d + len(R)
    if sns[d:m] != r_sns:
        return CheckResult(
            False,
            f"recovered run {r_sns} is not contiguous in the eligible sequence {sns[d:m]}",
            stats,
        )
    if d > len(deq):
        return CheckResult(
            False,
            f"{d} head items missing but only {len(deq)} eligible dequeues exist",
            stats,
        )
    if d < d_must:
        return CheckResult(
            False,
            f"only {d} head items consumed but {d_must} dequeues are guaranteed durable",
            stats,
        )
    if m < e_must:
        return CheckResult(
            False,
            f"recovered run ends at {m} but {e_must} enqueues are guaranteed durable",
            stats,
        )
    return CheckResult(True, stats=stats)
