"""Workload descriptions shared by the benchmarks and the crash campaign.

A :class:`WorkloadSpec` pins everything needed to reproduce a run: the
structure, the operation mix, thread count, key space, sizes, and the seed.
Per-thread RNGs are derived from the seed so two runs with the same spec
draw the same operation streams regardless of scheduling.
"""

import random
from dataclasses import dataclass, asdict

# Weight order in a mix string.
MIX_OPS = ("get", "insert", "remove")


def parse_mix(text):
    """Parse a ``get:insert:remove`` weight triple such as ``"2:1:1"``."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError("mix must be three ':'-separated weights (get:insert:remove)")
    try:
        weights = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"non-integer mix weight in {text!r}") from None
    if min(weights) < 0 or sum(weights) == 0:
        raise ValueError("mix weights must be non-negative and not all zero")
    return weights


def unique_value(tid, n):
    """A value no other (thread, op) pair ever writes; never zero."""
    return ((tid + 1) << 44) + n


@dataclass
class WorkloadSpec:
    """One benchmark or campaign configuration."""

    structure: str = "hashmap"  # "hashmap" | "queue"
    mix: str = "2:1:1"  # get:insert:remove weights (queue uses insert:remove)
    threads: int = 4
    duration: float = 5.0  # seconds of timed run
    key_space: int = 1_000_000
    value_size: int = 1024
    sync_every: int = 0  # mean ops between sync() calls; 0 disables
    epoch_length_ms: float = 10.0  # background epoch ticker period; 0 disables
    seed: int = 0
    buckets: int = 1 << 20
    warmup: int = -1  # prefilled items; -1 scales with key_space

    def __post_init__(self):
        if self.structure not in ("hashmap", "queue"):
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        parse_mix(self.mix)

    @property
    def weights(self):
        return parse_mix(self.mix)

    def resolved_warmup(self):
        if self.warmup >= 0:
            return self.warmup
        if self.structure == "queue":
            return 2000
        return self.key_space // 2

    def thread_rng(self, tid):
        return random.Random((self.seed * 1_000_003 + tid) ^ 0x9E3779B97F4A7C15)

    def as_row(self):
        return asdict(self)


def op_stream(spec, tid):
    """Yield an endless (op, key, val) stream for one thread.

    Hashmap streams draw from the full mix; queue streams map the insert
    weight to enqueue and the remove weight to dequeue (gets don't apply).
    Values are globally unique so a checker can attribute any recovered
    state to the single operation that wrote it.
    """
    rng = spec.thread_rng(tid)
    g, i, r = spec.weights
    n = 0
    if spec.structure == "queue":
        i, r = (i or 1), (r or 1)
        while True:
            n += 1
            if rng.randrange(i + r) < i:
                yield "enqueue", None, unique_value(tid, n)
            else:
                yield "dequeue", None, None
    else:
        total = g + i + r
        while True:
            n += 1
            roll = rng.randrange(total)
            key = rng.randrange(spec.key_space)
            if roll < g:
                yield "get", key, None
            elif roll < g + i:
                yield "insert", key, unique_value(tid, n)
            else:
                yield "remove", key, None
