"""Trace validation against a workload's dependency structure.

Checks four properties and reports every violation instead of raising:
precedence (edge delivery respected), per-stage serialization,
completeness (each task exactly once per rank), and duration fidelity.
Wall-clock traces relax duration fidelity to a tolerance band and scale
expected durations by the trace's time scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .trace import Trace, TraceEvent
from .workload import TaskId, Workload, build_task_graph

__all__ = ["Violation", "ValidationReport", "validate_trace"]


@dataclass(frozen=True)
class Violation:
    kind: str  # precedence | serialization | completeness | duration | malformed
    detail: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, detail: str) -> None:
        self.violations.append(Violation(kind, detail))

    def summary(self) -> str:
        if self.ok:
            return "valid"
        return f"{len(self.violations)} violations: " + "; ".join(
            f"[{v.kind}] {v.detail}" for v in self.violations[:10])


def validate_trace(
    trace: Trace,
    workload: Workload,
    injected_delays: dict[TaskId, int] | None = None,
    duration_slack: tuple[int, float, int] = (0, 1.0, 0),
) -> ValidationReport:
    """Check a trace against the workload's dependency rules.

    ``injected_delays`` holds per-task extra compute time (jitter) that
    duration fidelity must account for.  ``duration_slack`` is
    (lower_us, upper_rel, upper_abs_us): an execution of expected length
    d passes if d - lower <= actual <= d * upper_rel + upper_abs.
    Malformed events become violations, never exceptions.
    """
    report = ValidationReport()
    injected = injected_delays or {}
    scale = trace.time_scale if trace.clock == "wall" else 1.0
    lower, upper_rel, upper_abs = duration_slack

    known = set(workload.compute_tasks())
    # end[(task, rank)] and start lookups; rank None folds to 0
    exec_by_rank: dict[tuple[TaskId, int], TraceEvent] = {}
    seen_counts: dict[tuple[TaskId, int], int] = {}
    ranks: set[int] = set()

    for e in trace.events:
        if e.event_kind != "exec":
            continue
        if e.t_end < e.t_start:
            report.add("malformed", f"exec ends before it starts at stage {e.stage}: {e}")
            continue
        task = e.task()
        if task is None or task not in known:
            report.add("malformed", f"unknown task in exec event: {e}")
            continue
        rank = e.rank if e.rank is not None else 0
        ranks.add(rank)
        key = (task, rank)
        seen_counts[key] = seen_counts.get(key, 0) + 1
        exec_by_rank[key] = e

    if not ranks:
        ranks = {0}

    # completeness: each task exactly once on every rank that appears
    for task in known:
        for rank in sorted(ranks):
            cnt = seen_counts.get((task, rank), 0)
            if cnt != 1:
                report.add("completeness",
                           f"{task.key()} executed {cnt} times on rank {rank}")

    # duration fidelity
    for (task, rank), e in sorted(exec_by_rank.items()):
        expected = (workload.latency[task] + injected.get(task, 0)) * scale
        actual = e.t_end - e.t_start
        if actual < expected - lower or actual > expected * upper_rel + upper_abs:
            report.add("duration",
                       f"{task.key()} rank {rank}: duration {actual} outside "
                       f"expected {expected:g} (slack {duration_slack})")

    # per-(stage, rank) serialization
    by_lane: dict[tuple[int, int], list[TraceEvent]] = {}
    for (task, rank), e in exec_by_rank.items():
        by_lane.setdefault((e.stage, rank), []).append(e)
    for (stage, rank), evs in sorted(by_lane.items()):
        evs.sort(key=lambda e: (e.t_start, e.t_end))
        for prev, cur in zip(evs, evs[1:]):
            if cur.t_start < prev.t_end:
                report.add("serialization",
                           f"stage {stage} rank {rank}: {prev.task().key()} "
                           f"overlaps {cur.task().key()}")

    # precedence with per-edge communication delay; wall-clock traces get
    # 2us of slack for microsecond timestamp quantization
    epsilon = 2 if trace.clock == "wall" else 1e-9
    for edge in build_task_graph(workload):
        delay = workload.comm_delay.sample(edge) * scale
        for rank in sorted(ranks):
            src = exec_by_rank.get((edge.src, rank))
            dst = exec_by_rank.get((edge.dst, rank))
            if src is None or dst is None:
                continue  # already a completeness violation
            if dst.t_start < src.t_end + delay - epsilon:
                report.add("precedence",
                           f"{edge.kind} edge {edge.src.key()} -> {edge.dst.key()} "
                           f"rank {rank}: start {dst.t_start} < end {src.t_end} "
                           f"+ delay {delay:g}")
    return report
