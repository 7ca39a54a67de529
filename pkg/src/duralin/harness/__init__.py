"""Measurement and verification harness: workloads, ledgers, the
crash-consistency checker, a deterministic scheduler, benchmarks, and the
randomized crash campaign behind the ``duralin`` CLI."""

from .checker import (
    CheckResult,
    check_bdl,
    check_map_bdl,
    check_map_bdl_enumerated,
    check_queue_bdl,
)
from .ledger import OpRecord, RecordingMap, RecordingQueue
from .linearize import (
    MISMATCH,
    linearizable_rounds,
    linearize,
    record_op,
    step_map,
    step_queue,
    step_register,
)
from .campaign import TrialResult, run_crash_campaign, run_crash_trial
from .bench import run_sync_latency, run_throughput, write_rows
from .schedule import CoopScheduler, ScheduleError, count_steps, run_with_preemptions
from .workload import WorkloadSpec, op_stream, parse_mix, unique_value

__all__ = [
    "CheckResult",
    "check_bdl",
    "check_map_bdl",
    "check_map_bdl_enumerated",
    "check_queue_bdl",
    "OpRecord",
    "RecordingMap",
    "RecordingQueue",
    "MISMATCH",
    "linearize",
    "linearizable_rounds",
    "record_op",
    "step_register",
    "step_map",
    "step_queue",
    "TrialResult",
    "run_crash_trial",
    "run_crash_campaign",
    "run_throughput",
    "run_sync_latency",
    "write_rows",
    "CoopScheduler",
    "ScheduleError",
    "count_steps",
    "run_with_preemptions",
    "WorkloadSpec",
    "parse_mix",
    "op_stream",
    "unique_value",
]
