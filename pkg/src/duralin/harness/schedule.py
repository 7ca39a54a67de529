"""Deterministic interleaving of thread programs at shared-word granularity.

Every operation on an :class:`~duralin.atomics.AtomicWord` first calls the
process-wide yield hook.  The scheduler parks registered threads there and
releases exactly one per step, so a run's interleaving is a pure function of
the decision sequence.  Hook points never hold locks, so a parked thread
cannot wedge the ones still running, and unregistered threads pass through
untouched.

The heap's byte operations deliberately have no yield points: no volatile
control decision ever reads heap memory, so scheduling at atomic words alone
already covers every outcome-relevant interleaving while keeping the
schedule space small enough to enumerate.
"""

import threading

from ..atomics import set_yield_hook


class ScheduleError(RuntimeError):
    pass


class _TState:
    __slots__ = ("ev", "status")

    def __init__(self):
        self.ev = threading.Event()
        self.status = "new"  # new | waiting | running | done


class CoopScheduler:
    """Runs a set of programs one shared-word step at a time."""

    def __init__(self, timeout=30.0):
        self.timeout = timeout
        self._by_ident = {}
        self._cv = threading.Condition()
        self._errors = []

    def _hook(self):
        st = self._by_ident.get(threading.get_ident())
        if st is None:
            return
        with self._cv:
            st.status = "waiting"
            self._cv.notify_all()
        st.ev.wait()
        st.ev.clear()

    def _body(self, st, fn):
        self._by_ident[threading.get_ident()] = st
        self._hook()  # park at a common step-zero start line
        try:
            fn()
        except BaseException as exc:  # propagated to run()'s caller
            self._errors.append(exc)
        finally:
            with self._cv:
                st.status = "done"
                self._cv.notify_all()

    def run(self, programs, decide, max_steps=1_000_000):
        """Execute ``programs`` under ``decide(step, current, runnable)``.

        ``decide`` returns the index of the thread to grant the next step;
        ``runnable`` is the sorted list of indices still parked.  Returns the
        grant order.  Program exceptions re-raise here.
        """
        states = [_TState() for _ in programs]
        threads = [
            threading.Thread(target=self._body, args=(states[i], fn), daemon=True)
            for i, fn in enumerate(programs)
        ]
        prev_hook = set_yield_hook(self._hook)
        order = []
        try:
            for t in threads:
                t.start()
            current = None
            step = 0
            while True:
                with self._cv:
                    ok = self._cv.wait_for(
                        lambda: all(s.status in ("waiting", "done") for s in states),
                        timeout=self.timeout,
                    )
                    if not ok:
                        stuck = [i for i, s in enumerate(states) if s.status not in ("waiting", "done")]
                        raise ScheduleError(f"threads {stuck} never reached a step point")
                    runnable = [i for i, s in enumerate(states) if s.status == "waiting"]
                if not runnable:
                    break
                if step >= max_steps:
                    raise ScheduleError("step limit exceeded (livelock in scheduled code?)")
                nxt = decide(step, current, runnable)
                if nxt not in runnable:
                    raise ScheduleError(f"decide() picked {nxt}, runnable {runnable}")
                order.append(nxt)
                st = states[nxt]
                st.status = "running"
                st.ev.set()
                current = nxt
                step += 1
        finally:
            set_yield_hook(prev_hook)
            # Unpark anything still parked so the daemon threads can exit.
            for s in states:
                s.ev.set()
            for t in threads:
                t.join(timeout=5.0)
        if self._errors:
            raise self._errors[0]
        return order


def run_with_preemptions(programs, preemptions, timeout=30.0):
    """Run to completion in index order, preempting at the given steps.

    ``preemptions`` is a list of ``(global_step, thread_index)`` pairs; at
    each named step control switches to the named thread (if parked).  In
    between, the current thread runs on; when it finishes, the lowest-index
    parked thread resumes.  Returns the grant order.
    """
    marks = dict(preemptions)

    def decide(step, current, runnable):
        want = marks.get(step)
        if want is not None and want in runnable:
            return want
        if current in runnable:
            return current
        return runnable[0]

    return CoopScheduler(timeout=timeout).run(programs, decide)


def count_steps(programs, timeout=30.0):
    """Steps a plain run-to-completion-in-order schedule takes."""
    return len(run_with_preemptions(programs, [], timeout=timeout))
