"""Command-line harness.

Subcommands: simulate-rrfp, simulate-1f1b, live, bounds, stats, sweep,
bruteforce.  Every run resolves one JSON config (plus ``--set`` dotted
overrides), writes artifacts under ``<out>/<run-id>/`` where the run id
is a content hash of the resolved config, and prints a one-line
summary.  Exit codes: 0 success, 2 config violation (message carries
the field path), 3 deadlock or watchdog firing (message carries the
dump path).
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .analysis import (
    breakdown,
    brute_force_makespan,
    lower_bound,
    stats_from_workloads,
    theorem_bound,
)
from .baselines import ScheduleDeadlockError, build_1f1b_schedule, run_fixed
from .config import ConfigError, RunConfig, apply_overrides, resolve_config, run_id_for
from .engine import EngineDeadlockError, run_rrfp
from .jitter import build_injection_table
from .live import LiveWatchdogError, run_live
from .presets import experiment_presets, sweep_units
from .workload import GeneratorSpec, generate_workload

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEADLOCK = 3


def _load(args) -> tuple[dict, RunConfig]:
    if args.config:
        with open(args.config) as f:
            doc = json.load(f)
    else:
        doc = {"generator": {"num_stages": 4, "num_microbatches": 8,
                             "forward": {"kind": "uniform", "lo": 80, "hi": 120},
                             "backward": {"kind": "uniform", "lo": 80, "hi": 120}}}
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.hint is not None:
        overrides.append(f"scheduler.hint={args.hint}")
    if args.limit is not None:
        overrides.append(f"scheduler.buffer_limit={args.limit}")
    if args.jitter is not None:
        if args.jitter.startswith("file:"):
            with open(args.jitter[5:]) as f:
                overrides.append(f"jitter={f.read().strip()}")
        else:
            overrides.append(f"jitter={args.jitter}")
    if args.tp is not None:
        key = "workload.tp_group_size" if "workload" in doc else "generator.tp_group_size"
        overrides.append(f"{key}={args.tp}")
    if args.out is not None:
        overrides.append(f"output.dir={args.out}")
    if args.watchdog_secs is not None:
        overrides.append(f"live.watchdog_secs={args.watchdog_secs}")
    doc = apply_overrides(doc, overrides)
    return doc, resolve_config(doc)


def _run_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.output_dir) / cfg.run_id()
    (d / "reports").mkdir(parents=True, exist_ok=True)
    return d


def _write_gantt(trace, path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "rank", "microbatch", "chunk", "direction",
                         "t_start", "t_end"])
        for e in trace.events:
            if e.event_kind == "exec":
                writer.writerow([e.stage, "" if e.rank is None else e.rank,
                                 e.microbatch, e.chunk, e.direction,
                                 e.t_start, e.t_end])


def _write_run(cfg: RunConfig, trace, metrics, extra: dict | None = None) -> Path:
    d = _run_dir(cfg)
    with open(d / "config.json", "w") as f:
        json.dump(cfg.raw, f, indent=2, sort_keys=True)
    trace.dump_jsonl(d / "trace.jsonl")
    metrics.dump(d / "metrics.json")
    _write_gantt(trace, d / "reports" / "gantt.csv")
    breakdown(trace).dump_csv(d / "reports" / "breakdown.csv")
    if extra:
        with open(d / "reports" / "summary.json", "w") as f:
            json.dump(extra, f, indent=2, sort_keys=True)
    return d


def _simulate(cfg: RunConfig, kind: str):
    if kind == "1f1b":
        injected = build_injection_table(cfg.workload, cfg.jitter, cfg.seed)
        schedule = build_1f1b_schedule(cfg.workload)
        return run_fixed(schedule, cfg.workload, injected_delays=injected)
    return run_rrfp(cfg.workload, cfg.hint, cfg.buffer_limit, cfg.seed,
                    jitter=cfg.jitter, tp=cfg.tp)


def cmd_simulate(args, kind: str) -> int:
    args.set = (args.set or []) + [f"scheduler.kind={kind}"]
    doc, cfg = _load(args)
    if kind == "rrfp" and args.live:
        return cmd_live(args)
    trace, metrics = _simulate(cfg, kind)
    d = _write_run(cfg, trace, metrics)
    print(f"{kind}: makespan={metrics.makespan}us tasks={metrics.total_tasks} "
          f"run={d}")
    return EXIT_OK


def cmd_live(args) -> int:
    doc, cfg = _load(args)
    trace, metrics = run_live(cfg.workload, cfg.hint, cfg.buffer_limit,
                              cfg.time_scale, seed=cfg.seed, jitter=cfg.jitter,
                              tp=cfg.tp, watchdog_secs=cfg.watchdog_secs)
    d = _write_run(cfg, trace, metrics)
    print(f"live: makespan={metrics.makespan}us (wall) tasks={metrics.total_tasks} "
          f"run={d}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    doc, cfg = _load(args)
    report = theorem_bound(cfg.workload)
    _, metrics = run_rrfp(cfg.workload, "bf", cfg.buffer_limit, cfg.seed,
                          record_trace=False)
    d = _run_dir(cfg)
    payload = report.to_json()
    payload["bf_makespan"] = metrics.makespan
    with open(d / "reports" / "bounds.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    ok = metrics.makespan <= report.upper_bound
    print(f"bounds: L={report.lower_bound} bf_makespan={metrics.makespan} "
          f"upper_bound={report.upper_bound} holds={ok} run={d}")
    return EXIT_OK


def cmd_stats(args) -> int:
    doc, cfg = _load(args)
    if "generator" not in doc:
        raise ConfigError("generator", "stats needs a generator config to "
                                       "sample iterations from")
    gen = GeneratorSpec.from_json(doc["generator"])
    workloads = [generate_workload(gen, cfg.seed + i)
                 for i in range(args.iterations)]
    stats = stats_from_workloads(workloads)
    d = _run_dir(cfg)
    stats.dump_csv(d / "reports" / "stats.csv")
    with open(d / "reports" / "stats.json", "w") as f:
        json.dump(stats.to_json(), f, indent=2, sort_keys=True)
    frac = ", ".join(f"{x:.3f}" for x in stats.stage_fraction)
    print(f"stats: last_stage_share={stats.stage_fraction[-1]:.3f} "
          f"p_hat={stats.p_hat:.3f} rho_hat={stats.rho_hat:.3f} "
          f"fractions=[{frac}] run={d}")
    return EXIT_OK


def cmd_bruteforce(args) -> int:
    doc, cfg = _load(args)
    opt = brute_force_makespan(cfg.workload)
    lb = lower_bound(cfg.workload)
    _, metrics = run_rrfp(cfg.workload, "bf", cfg.buffer_limit, cfg.seed,
                          record_trace=False)
    d = _run_dir(cfg)
    with open(d / "reports" / "bruteforce.json", "w") as f:
        json.dump({"optimum": opt, "lower_bound": lb,
                   "bf_makespan": metrics.makespan}, f, indent=2)
    print(f"bruteforce: L={lb} optimum={opt} bf_makespan={metrics.makespan} run={d}")
    return EXIT_OK


def _run_sweep_unit(doc: dict) -> dict:
    """One sweep run; executed in a worker process."""
    meta = doc.pop("_sweep")
    cfg = resolve_config(doc)
    trace, metrics = _simulate(cfg, cfg.scheduler_kind)
    return dict(meta, seed=cfg.seed, makespan=metrics.makespan)


def cmd_sweep(args) -> int:
    presets = experiment_presets()
    if args.preset:
        if args.preset not in presets:
            raise ConfigError("preset", f"unknown preset {args.preset}; "
                                        f"choose from {sorted(presets)}")
        preset = presets[args.preset]
        units = sweep_units(preset)
        axis = preset.axis
    else:
        if not args.axis:
            raise ConfigError("axis", "sweep needs --preset or --axis")
        axis = args.axis
        if axis not in ("jitter", "limit", "hint", "batch", "imbalance", "depth"):
            raise ConfigError("axis", f"unknown sweep axis {axis}")
        if not args.levels:
            raise ConfigError("levels", "sweep needs --levels v1,v2,...")
        points = []
        for text in args.levels.split(","):
            try:
                points.append(json.loads(text))
            except json.JSONDecodeError:
                points.append(text)
        doc, _ = _load(args)
        from .presets import Preset, sweep_units as expand
        preset = Preset(name=f"cli-{axis}", description="ad hoc sweep",
                        base=doc, axis=axis, points=tuple(points),
                        schedulers=(("1f1b", None), ("rrfp", doc.get(
                            "scheduler", {}).get("hint", "bf"))),
                        seeds=tuple(range(args.paired_seeds)))
        units = expand(preset)

    if args.workers and args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_run_sweep_unit, units))
    else:
        rows = [_run_sweep_unit(u) for u in units]

    # aggregate: per (point, scheduler) mean/std + slowdown vs own first level
    grouped: dict[tuple, list[int]] = {}
    for r in rows:
        grouped.setdefault((r["point"], r["scheduler"]), []).append(r["makespan"])
    schedulers = sorted({s for _, s in grouped})
    points = list(dict.fromkeys(p for p, _ in grouped))
    base_of = {s: statistics.mean(grouped[(points[0], s)]) for s in schedulers}

    out_dir = Path(args.out or "out") / f"sweep-{preset.name}-{run_id_for({'units': len(units), 'name': preset.name})}"
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["level", "scheduler", "mean_makespan_us",
                         "std_us", "slowdown_pct"])
        for p in points:
            for s in schedulers:
                vals = grouped[(p, s)]
                mean = statistics.mean(vals)
                std = statistics.pstdev(vals) if len(vals) > 1 else 0.0
                slow = 100.0 * (mean / base_of[s] - 1.0)
                writer.writerow([p, s, f"{mean:.1f}", f"{std:.1f}", f"{slow:.2f}"])
    with open(out_dir / "sweep_raw.json", "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)

    lines = []
    for p in points:
        cells = []
        for s in schedulers:
            cells.append(f"{s}={statistics.mean(grouped[(p, s)]):.0f}")
        if "1f1b" in schedulers and len(schedulers) == 2:
            other = next(s for s in schedulers if s != "1f1b")
            speedup = (statistics.mean(grouped[(p, "1f1b")])
                       / statistics.mean(grouped[(p, other)]))
            cells.append(f"speedup={speedup:.2f}x")
        lines.append(f"{p}: " + " ".join(cells))
    print(f"sweep {preset.name} ({axis}; {len(units)} runs) -> {csv_path}")
    for line in lines:
        print("  " + line)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                   help="dotted-path config override (repeatable)")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--hint", help="bf|fb|bprio|fprio|bfw|file:PATH")
    p.add_argument("--limit", type=int, help="buffer-size limit")
    p.add_argument("--jitter", help="J0..J3 or config path")
    p.add_argument("--tp", type=int, help="tensor-parallel group size")
    p.add_argument("--live", action="store_true",
                   help="execute on the wall-clock runtime")
    p.add_argument("--watchdog-secs", type=float)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="rrfp",
        description="readiness-driven pipeline iteration simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate-rrfp", "simulate-1f1b", "live", "bounds",
                 "stats", "bruteforce", "sweep"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "stats":
            p.add_argument("--iterations", type=int, default=100)
        if name == "sweep":
            p.add_argument("--preset", help="named preset (see presets module)")
            p.add_argument("--axis",
                           help="jitter|limit|hint|batch|imbalance|depth")
            p.add_argument("--levels", help="comma-separated sweep points")
            p.add_argument("--paired-seeds", type=int, default=3)
            p.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        if args.command == "simulate-rrfp":
            return cmd_simulate(args, "rrfp")
        if args.command == "simulate-1f1b":
            return cmd_simulate(args, "1f1b")
        if args.command == "live":
            return cmd_live(args)
        if args.command == "bounds":
            return cmd_bounds(args)
        if args.command == "stats":
            return cmd_stats(args)
        if args.command == "bruteforce":
            return cmd_bruteforce(args)
        if args.command == "sweep":
            return cmd_sweep(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (json.JSONDecodeError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (EngineDeadlockError, LiveWatchdogError, ScheduleDeadlockError) as e:
        dump_path = Path(args.out or "out") / "deadlock_dump.txt"
        dump_path.parent.mkdir(parents=True, exist_ok=True)
        dump = getattr(e, "dump", str(e))
        dump_path.write_text(str(dump) + "\n")
        print(f"deadlock/watchdog: {e} (dump: {dump_path})", file=sys.stderr)
        return EXIT_DEADLOCK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
