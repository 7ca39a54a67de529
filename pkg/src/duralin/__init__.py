"""duralin: a lock-free persistence runtime for nonblocking data structures.

Nonblocking structures written against :class:`CasCell` and the runtime's
allocation hooks become buffered-durably-linearizable persistent structures:
after a crash in epoch ``e``, recovery restores the abstract state of some
linearization prefix covering everything committed through epoch ``e - 2``.
The package ships an emulated persistent-memory heap with deterministic
crash injection, the epoch runtime itself, post-crash recovery, two ported
structures (a chained hash map and a FIFO queue), and a harness that
benchmarks them and property-checks the durability guarantee.
"""

from .pmem import (
    PersistentHeap,
    CrashAdversary,
    OutOfMemory,
    MalformedHeader,
    LINE,
    HDR_SIZE,
)
from .atomics import AtomicWord, AtomicCounter, TickSource
from .cascell import CasCell, lin_cas
from .epoch import EpochRuntime, TransientRuntime, Mindicator, CircBuffer, TbfContainer, MUTATIONS
from .recovery import recover, RecoveryReport, classify, enumerate_blocks
from .hashmap import LockFreeHashMap, DuplicateKey
from .queue import NonblockingQueue
from .smr import Reclaimer

__version__ = "0.1.0"

__all__ = [
    "PersistentHeap",
    "CrashAdversary",
    "OutOfMemory",
    "MalformedHeader",
    "LINE",
    "HDR_SIZE",
    "AtomicWord",
    "AtomicCounter",
    "TickSource",
    "CasCell",
    "lin_cas",
    "EpochRuntime",
    "TransientRuntime",
    "Mindicator",
    "CircBuffer",
    "TbfContainer",
    "MUTATIONS",
    "recover",
    "RecoveryReport",
    "classify",
    "enumerate_blocks",
    "LockFreeHashMap",
    "DuplicateKey",
    "NonblockingQueue",
    "Reclaimer",
    "__version__",
]
