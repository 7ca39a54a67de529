"""Command-line driver.

Subcommands:

* ``bench throughput`` — timed mixed workload, persistent run plus a
  transient baseline, CSV rows with an ops/sec comparison.
* ``bench synclat`` — sync() latency distribution with the ticker off.
* ``crash`` — randomized crash-recovery campaign with the consistency
  checker; nonzero exit if any trial reports a violation.
* ``recover`` — scan a saved heap image and print the recovery counts.

Durations default to 5 s desk runs; ``--full`` restores 30 s trials.
"""

import argparse
import sys

from ..pmem import CrashAdversary, PersistentHeap
from ..recovery import recover
from .bench import run_sync_latency, run_throughput, write_rows
from .campaign import run_crash_campaign
from .workload import WorkloadSpec


def _add_workload_flags(p, sync_default=0):
    p.add_argument("--structure", choices=("hashmap", "queue"), default="hashmap")
    p.add_argument("--mix", default="2:1:1", help="get:insert:remove weights")
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--duration", type=float, default=None, help="seconds per timed run (default 5)")
    p.add_argument("--value-size", type=int, default=1024)
    p.add_argument("--epoch-ms", type=float, default=10.0, help="background advance period; 0 = off")
    p.add_argument("--sync-every", type=int, default=sync_default, help="mean ops between sync() calls")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--key-space", type=int, default=1_000_000)
    p.add_argument("--warmup", type=int, default=-1, help="prefill items; -1 scales with key space")
    p.add_argument("--buckets", type=int, default=1 << 20)
    p.add_argument("--heap", default=None, help="file to back the heap (created/overwritten)")
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--full", action="store_true", help="use 30 s timed runs instead of 5 s")


def _spec_from(args):
    duration = args.duration if args.duration is not None else (30.0 if args.full else 5.0)
    return WorkloadSpec(
        structure=args.structure,
        mix=args.mix,
        threads=args.threads,
        duration=duration,
        key_space=args.key_space,
        value_size=args.value_size,
        sync_every=args.sync_every,
        epoch_length_ms=args.epoch_ms,
        seed=args.seed,
        buckets=args.buckets,
        warmup=args.warmup,
    )


def _cmd_bench(args):
    spec = _spec_from(args)
    rows = []
    if args.bench_kind == "throughput":
        per = run_throughput(spec, persistent=True, heap_path=args.heap)
        rows.append(per)
        print(f"persistent: {per['ops']} ops in {per['seconds']}s  ({per['ops_per_s']} ops/s)")
        if not args.skip_baseline:
            base = run_throughput(spec, persistent=False)
            rows.append(base)
            ratio = per["ops_per_s"] / base["ops_per_s"] if base["ops_per_s"] else float("inf")
            per["vs_transient"] = round(ratio, 4)
            print(f"transient:  {base['ops']} ops in {base['seconds']}s  ({base['ops_per_s']} ops/s)")
            print(f"persistent/transient ratio: {ratio:.3f}")
    else:
        if spec.sync_every <= 0:
            print("synclat requires --sync-every > 0", file=sys.stderr)
            return 2
        spec = WorkloadSpec(**{**spec.as_row(), "epoch_length_ms": 0.0})  # ticker off
        row = run_sync_latency(spec)
        rows.append(row)
        print(
            f"sync() over {row['syncs']} calls at {spec.threads} threads: "
            f"mean {row['sync_mean_ms']} ms, median {row['sync_median_ms']} ms, "
            f"p99 {row['sync_p99_ms']} ms"
        )
    if args.out:
        write_rows(args.out, rows)
        print(f"wrote {args.out}")
    return 0


def _cmd_crash(args):
    done = [0, 0]  # trials, violations

    def progress(i, res):
        done[0] = i + 1
        done[1] += bool(res.violation)
        if done[0] % 50 == 0:
            print(f"  {done[0]}/{args.trials} trials, {done[1]} violations")

    results, summary = run_crash_campaign(
        trials=args.trials,
        structure=args.structure,
        adversary=args.adversary,
        seed=args.seed,
        mutation=args.mutation,
        total_ops=args.ops,
        threads=args.threads,
        progress=progress if args.verbose else None,
    )
    print(
        f"{summary['trials']} trials ({summary['structure']}, {summary['adversary']}"
        + (f", mutation={summary['mutation']}" if summary["mutation"] else "")
        + f"): {summary['violations']} violations, "
        f"{summary['crashed_midrun']} mid-run crashes, "
        f"mean trial {summary['mean_trial_s']}s, mean recovery {summary['mean_recovery_s']}s"
    )
    for res in results:
        if res.violation:
            print(f"  trial {res.trial} (seed {res.seed}): {res.violation}")
    if args.out:
        write_rows(args.out, [r.as_row() for r in results])
        print(f"wrote {args.out}")
    return 1 if summary["violations"] else 0


def _cmd_recover(args):
    heap = PersistentHeap.load(args.heap)
    report = recover(heap, parallelism=args.threads)
    print(f"durable epoch: {report.epoch}")
    for k in ("recovered", "discarded_recent", "discarded_uncommitted", "canceled_by_anti", "malformed"):
        print(f"{k}: {report.counts.get(k, 0)}")
    return 0


def main(argv=None):
    p = argparse.ArgumentParser(prog="duralin", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    b = sub.add_parser("bench", help="throughput / sync-latency benchmarks")
    bsub = b.add_subparsers(dest="bench_kind", required=True)
    bt = bsub.add_parser("throughput", help="mixed workload ops/sec vs transient baseline")
    _add_workload_flags(bt)
    bt.add_argument("--skip-baseline", action="store_true", help="skip the transient comparison run")
    bl = bsub.add_parser("synclat", help="sync() latency distribution (ticker off)")
    _add_workload_flags(bl, sync_default=100)
    b.set_defaults(fn=_cmd_bench)

    c = sub.add_parser("crash", help="crash-recovery campaign with consistency checking")
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument(
        "--adversary",
        choices=sorted(CrashAdversary.POLICIES),
        default="random_per_line",
    )
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--structure", choices=("hashmap", "queue"), default="hashmap")
    c.add_argument("--threads", type=int, default=4)
    c.add_argument("--ops", type=int, default=2000, help="operations per trial")
    c.add_argument(
        "--mutation",
        choices=("skip_desc_flush", "wrong_epoch_tag", "early_tbf_free"),
        default=None,
        help="seed a known bug (checker sensitivity testing)",
    )
    c.add_argument("--out", default=None, help="CSV of per-trial rows")
    c.add_argument("--verbose", action="store_true")
    c.set_defaults(fn=_cmd_crash)

    r = sub.add_parser("recover", help="scan a heap image and print recovery counts")
    r.add_argument("--heap", required=True, help="heap image path (see PersistentHeap.save)")
    r.add_argument("--threads", type=int, default=1, help="recovery scan parallelism")
    r.set_defaults(fn=_cmd_recover)

    args = p.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
