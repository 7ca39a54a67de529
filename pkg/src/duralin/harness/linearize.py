"""Linearizability checking of concurrent histories by enumeration.

A history is a list of ``(invoke, response, op, args, result)`` tuples with
ticks drawn from one shared source.  The checker searches for a total order
that (a) respects real time — an operation that responded before another was
invoked comes first — and (b) replays against a sequential model with every
recorded result matching.  Histories here are small (tens of operations at
most), so plain memoized depth-first search is fine.

Models are step functions ``step(state, op, args, result) -> new_state`` that
return :data:`MISMATCH` when the recorded result is impossible from that
state.  States must be hashable.
"""

import functools

MISMATCH = object()
_ABSENT = object()


def step_register(state, op, args, result):
    """Single word supporting load/store/cas (and the persistent cas)."""
    if op == "load":
        return state if result == state else MISMATCH
    if op == "store":
        return args[0]
    if op in ("cas", "lin_cas"):
        exp, new = args
        if state == exp:
            return new if result is True else MISMATCH
        return state if result is False else MISMATCH
    raise ValueError(f"unknown register op {op!r}")


def step_map(state, op, args, result):
    """Sorted-tuple map state; ops get/insert/remove/put."""
    key = args[0]
    cur = _ABSENT
    for k, v in state:
        if k == key:
            cur = v
            break
    if op == "get":
        want = None if cur is _ABSENT else cur
        return state if result == want else MISMATCH
    if op == "insert":
        if cur is _ABSENT:
            if result is not True:
                return MISMATCH
            return tuple(sorted(state + ((key, args[1]),)))
        return state if result is False else MISMATCH
    if op == "remove":
        if cur is _ABSENT:
            return state if result is False else MISMATCH
        if result is not True:
            return MISMATCH
        return tuple(kv for kv in state if kv[0] != key)
    if op == "put":
        want = "insert" if cur is _ABSENT else "update"
        if result != want:
            return MISMATCH
        return tuple(sorted(tuple(kv for kv in state if kv[0] != key) + ((key, args[1]),)))
    raise ValueError(f"unknown map op {op!r}")


def step_queue(state, op, args, result):
    """FIFO of values; enqueue results (tickets) are implementation detail."""
    if op == "enqueue":
        return state + (args[0],)
    if op == "dequeue":
        if not state:
            return state if result is None else MISMATCH
        if result is None:
            return MISMATCH
        val = result[1] if isinstance(result, tuple) else result
        return state[1:] if state[0] == val else MISMATCH
    raise ValueError(f"unknown queue op {op!r}")


def linearize(history, step, init_state):
    """Return the set of model states reachable by complete linearizations.

    Empty set means the history is not linearizable from ``init_state``.
    """
    ops = sorted(history, key=lambda h: h[0])
    n = len(ops)
    if n > 63:
        raise ValueError("history too long to enumerate")
    invokes = [h[0] for h in ops]
    responses = [h[1] for h in ops]

    @functools.lru_cache(maxsize=None)
    def dfs(mask, state):
        if mask == (1 << n) - 1:
            return frozenset((state,))
        # An op may linearize next only if no other pending op already
        # responded before it was invoked.
        min_resp = min(responses[i] for i in range(n) if not mask >> i & 1)
        out = set()
        for i in range(n):
            if mask >> i & 1 or invokes[i] > min_resp:
                continue
            _, _, op, args, result = ops[i]
            nxt = step(state, op, args, result)
            if nxt is MISMATCH:
                continue
            out |= dfs(mask | 1 << i, nxt)
        return frozenset(out)

    try:
        return set(dfs(0, init_state))
    finally:
        dfs.cache_clear()


def linearizable_rounds(rounds, step, init_state):
    """Fold :func:`linearize` over successive history rounds.

    Each round's reachable end states seed the next round.  Returns
    ``(ok, failed_round_index)``; carrying the full state set keeps rounds
    honest when several linearizations disagree about the final state.
    """
    states = {init_state}
    for idx, history in enumerate(rounds):
        nxt = set()
        for st in states:
            nxt |= linearize(history, step, st)
        if not nxt:
            return False, idx
        states = nxt
    return True, -1


def record_op(ticks, log, op, args, fn):
    """Run ``fn`` between two tick draws and append the history tuple."""
    invoke = ticks.next()
    result = fn()
    log.append((invoke, ticks.next(), op, args, result))
    return result
