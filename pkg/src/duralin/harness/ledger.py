"""Operation ledgers: timestamped records of every structure call.

The recording wrappers draw an invocation tick and a response tick from the
runtime's shared tick source around each call and capture the commit stamp
``(count, epoch, tick)`` the runtime leaves in the calling thread's context.
Because commits, epoch transitions, and the crash snapshot all draw from the
same source, the ledger totally orders an operation's commit against the
persistence frontier at the instant of a crash — which is exactly what the
consistency checker needs.
"""

from dataclasses import dataclass


@dataclass
class OpRecord:
    tid: int
    op: str  # get | insert | remove | put | enqueue | dequeue
    key: object  # map key, or None for queue ops
    val: object  # value argument, or None
    result: object
    invoke_tick: int
    response_tick: int
    commit: object  # (count, epoch, tick) or None if nothing committed


class _RecorderBase:
    def __init__(self, inner, rt):
        self.inner = inner
        self.rt = rt
        # Per-thread lists: appends never contend, merge sorts afterwards.
        self.records = [[] for _ in range(rt.thread_count)]

    def _run(self, op, key, val, fn):
        rt = self.rt
        ctx = rt.ctx()
        ctx.last_commit = None
        invoke = rt.ticks.next()
        result = fn()
        response = rt.ticks.next()
        self.records[ctx.tid].append(
            OpRecord(ctx.tid, op, key, val, result, invoke, response, ctx.last_commit)
        )
        return result

    def all_records(self):
        out = [r for per_tid in self.records for r in per_tid]
        out.sort(key=lambda r: r.invoke_tick)
        return out


class RecordingMap(_RecorderBase):
    """Ledger wrapper over :class:`~duralin.hashmap.LockFreeHashMap`."""

    def get(self, key):
        return self._run("get", key, None, lambda: self.inner.get(key))

    def insert(self, key, val):
        return self._run("insert", key, val, lambda: self.inner.insert(key, val))

    def remove(self, key):
        return self._run("remove", key, None, lambda: self.inner.remove(key))

    def put(self, key, val):
        return self._run("put", key, val, lambda: self.inner.put(key, val))


class RecordingQueue(_RecorderBase):
    """Ledger wrapper over :class:`~duralin.queue.NonblockingQueue`."""

    def enqueue(self, val):
        return self._run("enqueue", None, val, lambda: self.inner.enqueue(val))

    def dequeue(self):
        return self._run("dequeue", None, None, lambda: self.inner.dequeue())
