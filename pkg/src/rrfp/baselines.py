"""Fixed-order schedules: 1F1B and the single-direction reference pipelines.

A fixed schedule pre-commits a per-stage task order.  Execution is
work-conserving within that order: each stage runs its list head as
soon as the head's predecessors have completed and arrived, and blocks
otherwise, even when later entries would be runnable.  That blocking
semantics is exactly what distinguishes these baselines from
readiness-driven dispatch.
"""

from __future__ import annotations

from dataclasses import dataclass

from .trace import Metrics, StageMetrics, Trace, TraceEvent
from .workload import (
    BACKWARD,
    FORWARD,
    TaskId,
    Workload,
    build_task_graph,
)

__all__ = [
    "FixedSchedule",
    "ScheduleDeadlockError",
    "build_1f1b_schedule",
    "run_fixed",
    "forward_only_makespan",
    "backward_only_makespan",
]


class ScheduleDeadlockError(RuntimeError):
    """Circular waiting among stage heads of a malformed schedule."""

    def __init__(self, message: str, cycle: list[int]):
        super().__init__(message)
        self.cycle = cycle


@dataclass(frozen=True)
class FixedSchedule:
    """Per-stage ordered task lists."""

    per_stage_order: tuple[tuple[TaskId, ...], ...]

    def to_json(self) -> dict:
        return {"per_stage_order": [[t.key() for t in stage]
                                    for stage in self.per_stage_order]}

    @classmethod
    def from_json(cls, obj: dict) -> "FixedSchedule":
        return cls(tuple(tuple(TaskId.from_key(k) for k in stage)
                         for stage in obj["per_stage_order"]))

    def validate_for(self, workload: Workload) -> None:
        owned = {i: set() for i in range(workload.num_stages)}
        for t in workload.compute_tasks():
            owned[t.stage].add(t)
        if len(self.per_stage_order) != workload.num_stages:
            raise ValueError("schedule stage count mismatch")
        for i, order in enumerate(self.per_stage_order):
            if set(order) != owned[i] or len(order) != len(owned[i]):
                raise ValueError(f"stage {i} order must list exactly its own tasks")


def build_1f1b_schedule(workload: Workload) -> FixedSchedule:
    """Non-interleaved 1F1B: warmup of min(M, N-1-i) forwards at stage i,
    then strict F/B alternation until forwards run out, then the
    remaining backwards.  The last stage alternates from the start."""
    if workload.num_chunks != 1:
        raise ValueError("1F1B baseline covers non-interleaved workloads only")
    if workload.decompose_backward:
        raise ValueError("1F1B baseline does not decompose backward")
    n, m = workload.num_stages, workload.num_microbatches
    stages = []
    for i in range(n):
        warmup = min(m, n - 1 - i)
        order: list[TaskId] = [TaskId(i, j, 0, FORWARD) for j in range(warmup)]
        f_next, b_next = warmup, 0
        while f_next < m:
            order.append(TaskId(i, f_next, 0, FORWARD))
            f_next += 1
            order.append(TaskId(i, b_next, 0, BACKWARD))
            b_next += 1
        while b_next < m:
            order.append(TaskId(i, b_next, 0, BACKWARD))
            b_next += 1
        stages.append(tuple(order))
    return FixedSchedule(tuple(stages))


def run_fixed(schedule: FixedSchedule, workload: Workload,
              injected_delays: dict[TaskId, int] | None = None,
              record_trace: bool = True) -> tuple[Trace, Metrics]:
    """Event-driven execution of a pre-committed schedule.

    Start times satisfy start = max(stage clock, latest predecessor
    arrival); the fixpoint below computes them directly since each
    stage's order is fixed.  Raises :class:`ScheduleDeadlockError` with
    the waiting cycle when stage heads wait on each other, which only a
    malformed external schedule can cause.
    """
    injected = injected_delays or {}
    edges = build_task_graph(workload)
    preds: dict[TaskId, list] = {}
    for e in edges:
        preds.setdefault(e.dst, []).append((e.src, workload.comm_delay.sample(e)))

    n = workload.num_stages
    heads = [0] * n
    clock = [0] * n
    end: dict[TaskId, int] = {}
    events: list[TraceEvent] = []
    per_stage_compute = [0] * n
    busy: list[list[tuple[int, int]]] = [[] for _ in range(n)]

    total = sum(len(s) for s in schedule.per_stage_order)
    committed = 0
    while committed < total:
        progressed = False
        for i in range(n):
            order = schedule.per_stage_order[i]
            while heads[i] < len(order):
                task = order[heads[i]]
                arrivals = [end[src] + d for src, d in preds.get(task, ())
                            if src in end]
                if len(arrivals) != len(preds.get(task, ())):
                    break  # some predecessor not finished yet
                dur = workload.latency[task] + injected.get(task, 0)
                start = max([clock[i]] + arrivals)
                end[task] = start + dur
                clock[i] = start + dur
                per_stage_compute[i] += dur
                busy[i].append((start, start + dur))
                if record_trace:
                    events.append(TraceEvent(start, start + dur, i, None,
                                             task.microbatch, task.chunk,
                                             task.direction, "exec"))
                heads[i] += 1
                committed += 1
                progressed = True
        if not progressed:
            cycle = _waiting_cycle(schedule, heads, end, preds)
            raise ScheduleDeadlockError(
                "schedule-induced deadlock: stages "
                f"{cycle} wait on each other "
                f"(heads: {[schedule.per_stage_order[s][heads[s]].key() for s in cycle]})",
                cycle)

    makespan = max(end.values()) if end else 0
    metrics = Metrics(makespan=makespan, total_tasks=total)
    for i in range(n):
        sm = StageMetrics(stage=i, compute=per_stage_compute[i],
                          blocking=makespan - per_stage_compute[i],
                          n_f=sum(1 for t in schedule.per_stage_order[i]
                                  if t.direction == FORWARD),
                          n_b=sum(1 for t in schedule.per_stage_order[i]
                                  if t.direction == BACKWARD))
        metrics.per_stage.append(sm)
        if record_trace:
            prev = 0
            for a, b in sorted(busy[i]):
                if a > prev:
                    events.append(TraceEvent(prev, a, i, None, None, None,
                                             None, "block"))
                prev = max(prev, b)
            if prev < makespan:
                events.append(TraceEvent(prev, makespan, i, None, None, None,
                                         None, "block"))
    return Trace(events=events, clock="virtual"), metrics


def _waiting_cycle(schedule, heads, end, preds) -> list[int]:
    owner = {}
    for i, order in enumerate(schedule.per_stage_order):
        for t in order:
            owner[t] = i
    waits = {}
    for i, order in enumerate(schedule.per_stage_order):
        if heads[i] >= len(order):
            continue
        head = order[heads[i]]
        for src, _ in preds.get(head, ()):
            if src not in end:
                waits[i] = owner.get(src, i)
                break
    # walk until a stage repeats
    start = min(waits)
    seen: list[int] = []
    cur = start
    while cur not in seen:
        seen.append(cur)
        cur = waits.get(cur, cur)
    return seen[seen.index(cur):]


def forward_only_makespan(workload: Workload) -> int:
    """Completion time of the forward-only reference pipeline.

    All forward microbatches start staged at stage 0; inter-stage
    forward dependencies are the only constraint and communication is
    ignored.  Classic fill recurrence:
    start(i, j) = max(end(i-1, j), end(i, j-1)).
    """
    if workload.num_chunks != 1:
        raise ValueError("reference pipelines are non-interleaved")
    table = workload.forward_table()
    return _single_direction(table)


def backward_only_makespan(workload: Workload) -> int:
    """Mirror of :func:`forward_only_makespan`: all backward work staged
    at the last stage, flowing toward stage 0."""
    if workload.num_chunks != 1:
        raise ValueError("reference pipelines are non-interleaved")
    table = workload.backward_table()
    return _single_direction(table[::-1])


def _single_direction(table) -> int:
    n, m = len(table), len(table[0])
    end = [[0] * m for _ in range(n)]
    for j in range(m):
        for i in range(n):
            prev_stage = end[i - 1][j] if i > 0 else 0
            prev_mb = end[i][j - 1] if j > 0 else 0
            end[i][j] = max(prev_stage, prev_mb) + table[i][j]
    return end[n - 1][m - 1]
