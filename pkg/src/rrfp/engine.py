"""Readiness-driven virtual-clock execution engine.

Each stage owns four buffers (forward/backward x ready/finished).
Completions enqueue sends; after the edge's communication delay the
arrival lands in the neighbor's ready buffer and may trigger its next
arbitration round.  Stages never wait for a specific scheduled task:
the hint order only ranks what is currently ready, and backpressure
caps how far forward execution may run ahead of backward.

With a tensor-parallel group size R > 1, every rank of a stage keeps
its own ready view (arrivals carry independent non-negative skew
offsets) and forward/backward dispatch requires a metadata agreement
round; disagreement defers the step until a new arrival changes some
rank's view.  The engine is single-threaded over a virtual integer
clock; the runtime's compute/sender/receiver threads exist here only
as event classes.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .arbitration import (
    ArbiterState,
    BackpressureState,
    Decision,
    HintOrder,
    StageBuffers,
    StageProgress,
    TpGroup,
    advance_round_phase,
    arbitrate,
    tp_coordinate,
    update_backpressure,
)
from .jitter import JitterConfig, build_injection_table
from .rng import substream
from .trace import Metrics, StageMetrics, Trace, TraceEvent
from .workload import (
    BACKWARD,
    CHUNK_WRAP,
    DISPATCH_RANK,
    FORWARD,
    INTER_STAGE_BACKWARD,
    INTER_STAGE_FORWARD,
    WEIGHT,
    DependencyEdge,
    TaskId,
    Workload,
)

__all__ = ["run_rrfp", "EngineDeadlockError"]

# event kinds inside the heap
_COMPLETE = 0
_ARRIVAL = 1
_COORD_END = 2
_RELEASE = 3


class EngineDeadlockError(RuntimeError):
    """Global quiescence with unfinished tasks; carries the waiting state."""

    def __init__(self, message: str, dump: str):
        super().__init__(message)
        self.dump = dump


@dataclass
class _Stage:
    index: int
    ranks: int
    buffers: list[StageBuffers]
    bp: BackpressureState
    arb: ArbiterState = field(default_factory=ArbiterState)
    progress: StageProgress | None = None
    busy_until: int = 0
    coord_until: int = 0
    awaiting_arrival: bool = False
    tasks_remaining: int = 0
    next_admission: int = -1  # microbatch index; stage 0 only
    pending_grads: list[dict] = field(default_factory=list)
    compute: int = 0
    coord: int = 0
    n_w: int = 0
    busy_windows: list[tuple[int, int]] = field(default_factory=list)

    def idle_at(self, now: int) -> bool:
        return self.busy_until <= now and self.coord_until <= now


class _Run:
    def __init__(self, workload: Workload, hint: HintOrder, buffer_limit: int,
                 seed: int, jitter: JitterConfig | None, tp: TpGroup | None,
                 record_trace: bool):
        if buffer_limit < 1:
            raise ValueError("buffer_limit must be >= 1")
        self.w = workload
        self.hint = hint
        self.limit = buffer_limit
        self.seed = seed
        self.record = record_trace
        r = workload.tp_group_size
        if tp is None:
            tp = TpGroup(group_size=r)
        elif tp.group_size != r:
            raise ValueError("TpGroup.group_size must match workload.tp_group_size")
        self.tp = tp
        self.injected = build_injection_table(workload, jitter or JitterConfig(), seed)

        n = workload.num_stages
        self.stages: list[_Stage] = []
        per_stage_tasks = workload.task_count() // n
        for i in range(n):
            st = _Stage(
                index=i,
                ranks=r,
                buffers=[StageBuffers() for _ in range(r)],
                bp=BackpressureState(limit=buffer_limit),
                progress=StageProgress(workload.num_chunks),
                tasks_remaining=per_stage_tasks,
                pending_grads=[{} for _ in range(r)],
            )
            if i == 0:
                st.next_admission = 0
                adm = TaskId(0, 0, 0, FORWARD)
                for b in st.buffers:
                    b.admission = adm
            if workload.decompose_backward:
                shared_w: dict[TaskId, int] = {}
                for b in st.buffers:
                    b.weight_pending = shared_w
            self.stages.append(st)

        self.heap: list[tuple] = []
        self.seq = 0
        self.clock = 0
        self.done = 0
        self.total = workload.task_count()
        self.events: list[TraceEvent] = []
        self.agreed_rounds = 0
        self.deferred_rounds = 0
        # occupancy intervals: (stage, buffer_name, rank) -> list of (open, close)
        self.occ_open: dict[tuple, dict] = {}
        self.occ_closed: dict[tuple, list] = {}

    # -- event plumbing ----------------------------------------------------

    def _push(self, time: int, kind: int, stage: int, rank: int,
              task: TaskId | None, payload=None) -> None:
        if task is None:
            key = (time, stage, 9, 0, 0, rank, self.seq)
        else:
            key = (time, stage, DISPATCH_RANK[task.direction], task.microbatch,
                   task.chunk, rank, self.seq)
        self.seq += 1
        heapq.heappush(self.heap, (key, kind, stage, rank, task, payload))

    def _emit(self, kind: str, t0: int, t1: int, stage: int,
              rank: int | None, task: TaskId | None) -> None:
        if not self.record:
            return
        self.events.append(TraceEvent(
            t_start=t0, t_end=t1, stage=stage, rank=rank,
            microbatch=None if task is None else task.microbatch,
            chunk=None if task is None else task.chunk,
            direction=None if task is None else task.direction,
            event_kind=kind))

    def _occ_inc(self, stage: int, buf: str, rank: int, key, time: int) -> None:
        self.occ_open.setdefault((stage, buf, rank), {})[key] = time

    def _occ_dec(self, stage: int, buf: str, rank: int, key, time: int) -> None:
        opened = self.occ_open.get((stage, buf, rank), {}).pop(key, None)
        if opened is not None:
            self.occ_closed.setdefault((stage, buf, rank), []).append((opened, time))

    # -- message routing ---------------------------------------------------

    def _send(self, src_task: TaskId, end: int) -> None:
        """Route a completed task's output; may schedule arrivals."""
        w, i, c = self.w, src_task.stage, src_task.chunk
        n, c_cnt = w.num_stages, w.num_chunks
        if src_task.direction == FORWARD:
            if i < n - 1:
                dst = TaskId(i + 1, src_task.microbatch, c, FORWARD)
                kind = INTER_STAGE_FORWARD
            elif c < c_cnt - 1:
                dst = TaskId(0, src_task.microbatch, c + 1, FORWARD)
                kind = CHUNK_WRAP
            else:
                # pipeline turn-around: forward output becomes the local grad input
                st = self.stages[i]
                b_task = TaskId(i, src_task.microbatch, c, BACKWARD)
                for rank in range(st.ranks):
                    st.buffers[rank].backward_ready[b_task] = end
                    self._occ_inc(i, "backward_ready", rank, b_task, end)
                return
            buf = "forward_finished"
        else:
            if i > 0:
                dst = TaskId(i - 1, src_task.microbatch, c, BACKWARD)
                kind = INTER_STAGE_BACKWARD
            elif c > 0:
                dst = TaskId(n - 1, src_task.microbatch, c - 1, BACKWARD)
                kind = CHUNK_WRAP
            else:
                return  # first stage, first chunk: gradient leaves the pipeline
            buf = "backward_finished"
        delay = self.w.comm_delay.sample(DependencyEdge(src_task, dst, kind))
        deliver = end + delay
        self._occ_inc(i, buf, 0, (src_task, dst), end)
        self._push(deliver, _RELEASE, i, 0, None, (buf, (src_task, dst)))
        self._emit("send", end, deliver, i, None, src_task)
        for rank in range(self.stages[dst.stage].ranks):
            skew = 0
            if self.tp.skew_hi > 0 and self.stages[dst.stage].ranks > 1:
                rng = substream(self.seed, "skew", dst.key(), rank)
                skew = int(rng.integers(self.tp.skew_lo, self.tp.skew_hi + 1))
            self._push(deliver + skew, _ARRIVAL, dst.stage, rank, dst, None)

    # -- event application -------------------------------------------------

    def _apply_arrival(self, time: int, stage: int, rank: int, task: TaskId) -> None:
        st = self.stages[stage]
        st.awaiting_arrival = False
        if task.direction == FORWARD:
            st.buffers[rank].forward_ready[task] = time
            self._occ_inc(stage, "forward_ready", rank, task, time)
        else:
            # insertion gate: the local forward must already have run
            if (task.microbatch, task.chunk, FORWARD) in st.progress.done:
                st.buffers[rank].backward_ready[task] = time
                self._occ_inc(stage, "backward_ready", rank, task, time)
            else:
                st.pending_grads[rank][task] = time
        self._emit("recv", time, time, stage, rank, task)

    def _apply_complete(self, time: int, stage: int, task: TaskId) -> None:
        st = self.stages[stage]
        st.progress.mark(task)
        st.tasks_remaining -= 1
        self.done += 1
        if task.direction == FORWARD:
            st.bp.n_f += 1
            # a pending gradient may have been gated on this forward
            for rank in range(st.ranks):
                b_task = TaskId(stage, task.microbatch, task.chunk, BACKWARD)
                arrived = st.pending_grads[rank].pop(b_task, None)
                if arrived is not None:
                    st.buffers[rank].backward_ready[b_task] = time
                    self._occ_inc(stage, "backward_ready", rank, b_task, time)
            self._send(task, time)
        elif task.direction == BACKWARD:
            st.bp.n_b += 1
            f_task = TaskId(stage, task.microbatch, task.chunk, FORWARD)
            for rank in range(st.ranks):
                self._occ_dec(stage, "forward_ready", rank, f_task, time)
                self._occ_dec(stage, "backward_ready", rank, task, time)
            if self.w.decompose_backward:
                w_task = TaskId(stage, task.microbatch, task.chunk, WEIGHT)
                st.buffers[0].weight_pending[w_task] = time
            self._send(task, time)
        else:
            st.n_w += 1

    # -- dispatch ----------------------------------------------------------

    def _commit(self, st: _Stage, decision: Decision, start: int) -> None:
        task = decision.task
        dur = self.w.latency[task] + self.injected.get(task, 0)
        end = start + dur
        if decision.kind == FORWARD:
            if st.buffers[0].admission == task:
                st.next_admission += 1
                adm = None
                if st.next_admission < self.w.num_microbatches:
                    adm = TaskId(0, st.next_admission, 0, FORWARD)
                for b in st.buffers:
                    b.admission = adm
            else:
                for b in st.buffers:
                    b.forward_ready.pop(task, None)
        elif decision.kind == BACKWARD:
            for b in st.buffers:
                b.backward_ready.pop(task, None)
        else:
            st.buffers[0].weight_pending.pop(task, None)
        advance_round_phase(self.hint, st.arb, decision)
        st.busy_until = end
        st.compute += dur
        st.busy_windows.append((start, end))
        for rank in range(st.ranks):
            self._emit("exec", start, end, st.index, rank if st.ranks > 1 else None, task)
        self._push(end, _COMPLETE, st.index, 0, task, None)

    def _dispatch(self, stage: int, now: int) -> None:
        st = self.stages[stage]
        if not st.idle_at(now) or st.tasks_remaining == 0:
            return
        st.bp = update_backpressure(st.bp, self.w, st.progress)
        decisions = [arbitrate(st.buffers[r], self.hint, st.bp, st.arb, self.w,
                               st.progress) for r in range(st.ranks)]
        if st.ranks == 1:
            d = decisions[0]
            if d.kind == "wait":
                st.arb.reset()
                return
            self._commit(st, d, now)
            return

        if all(d.kind == "wait" for d in decisions):
            st.arb.reset()
            return
        if all(d.kind == WEIGHT for d in decisions):
            # weight views are identical across ranks, no agreement needed
            assert len({d.task for d in decisions}) == 1
            self._commit(st, decisions[0], now)
            return
        if st.awaiting_arrival:
            return  # a deferred round only retries after a new arrival
        proposals = [d.task if d.kind in (FORWARD, BACKWARD) else None
                     for d in decisions]
        outcome, agreed = tp_coordinate(proposals, self.tp)
        cost = self.tp.coordination_round_cost
        st.coord += cost
        st.busy_windows.append((now, now + cost))
        if outcome == "agreed":
            self.agreed_rounds += 1
            self._emit("coord", now, now + cost, stage, None, agreed)
            kind = FORWARD if agreed.direction == FORWARD else BACKWARD
            self._commit(st, Decision(kind, agreed), now + cost)
        else:
            self.deferred_rounds += 1
            self._emit("coord", now, now + cost, stage, None, None)
            st.coord_until = now + cost
            st.awaiting_arrival = True
            st.arb.reset()
            self._push(now + cost, _COORD_END, stage, 0, None, None)

    # -- main loop ----------------------------------------------------------

    def run(self) -> tuple[Trace, Metrics]:
        for i in range(self.w.num_stages):
            self._dispatch(i, 0)
        while self.heap:
            tick = self.heap[0][0][0]
            touched: set[int] = set()
            while self.heap and self.heap[0][0][0] == tick:
                _, kind, stage, rank, task, payload = heapq.heappop(self.heap)
                if kind == _COMPLETE:
                    self._apply_complete(tick, stage, task)
                elif kind == _ARRIVAL:
                    self._apply_arrival(tick, stage, rank, task)
                elif kind == _RELEASE:
                    buf, key = payload
                    self._occ_dec(stage, buf, 0, key, tick)
                touched.add(stage)
            self.clock = tick
            for stage in sorted(touched):
                self._dispatch(stage, tick)
        if self.done != self.total:
            dump = self._dump_waiting_state()
            raise EngineDeadlockError(
                f"quiescent with {self.total - self.done} unfinished tasks", dump)
        return self._finalize()

    def _dump_waiting_state(self) -> str:
        lines = [f"completed {self.done}/{self.total} tasks at t={self.clock}"]
        for st in self.stages:
            lines.append(
                f"stage {st.index}: remaining={st.tasks_remaining} "
                f"mode={st.bp.mode} D={st.bp.lead} "
                f"fwd_ready={[t.key() for b in st.buffers for t in b.forward_ready]} "
                f"bwd_ready={[t.key() for b in st.buffers for t in b.backward_ready]} "
                f"pending_w={[t.key() for t in st.buffers[0].weight_pending]} "
                f"awaiting_arrival={st.awaiting_arrival}")
        return "\n".join(lines)

    def _finalize(self) -> tuple[Trace, Metrics]:
        makespan = self.clock
        metrics = Metrics(makespan=makespan, total_tasks=self.total,
                          agreed_rounds=self.agreed_rounds,
                          deferred_rounds=self.deferred_rounds)
        for st in self.stages:
            sm = StageMetrics(stage=st.index, compute=st.compute, tp_coord=st.coord,
                              n_f=st.bp.n_f, n_b=st.bp.n_b, n_w=st.n_w)
            sm.blocking = makespan - st.compute - st.coord
            sm.max_occupancy = self._max_occupancy(st.index)
            metrics.per_stage.append(sm)
            if self.record:
                for t0, t1 in _gaps(st.busy_windows, makespan):
                    self._emit("block", t0, t1, st.index, None, None)
        trace = Trace(events=self.events, clock="virtual")
        return trace, metrics

    def _max_occupancy(self, stage: int) -> dict[str, int]:
        out = {}
        for buf in ("forward_ready", "forward_finished",
                    "backward_ready", "backward_finished"):
            worst = 0
            for (s, b, rank), intervals in self.occ_closed.items():
                if s != stage or b != buf:
                    continue
                live = list(intervals)
                live += [(t, self.clock) for t in self.occ_open.get((s, b, rank), {}).values()]
                worst = max(worst, _max_overlap(live))
            for (s, b, rank), opens in self.occ_open.items():
                if s == stage and b == buf and (s, b, rank) not in self.occ_closed:
                    worst = max(worst, _max_overlap(
                        [(t, self.clock) for t in opens.values()]))
            out[buf] = worst
        return out


def _max_overlap(intervals: list[tuple[int, int]]) -> int:
    """Peak number of concurrently open [open, close) intervals."""
    if not intervals:
        return 0
    marks = []
    for a, b in intervals:
        marks.append((a, 1))
        marks.append((max(b, a), -1))
    marks.sort(key=lambda m: (m[0], m[1]))
    cur = peak = 0
    for _, delta in marks:
        cur += delta
        peak = max(peak, cur)
    return peak


def _gaps(busy: list[tuple[int, int]], horizon: int) -> list[tuple[int, int]]:
    """Maximal idle intervals of one stage within [0, horizon]."""
    merged: list[list[int]] = []
    for a, b in sorted(busy):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    gaps = []
    prev = 0
    for a, b in merged:
        if a > prev:
            gaps.append((prev, a))
        prev = max(prev, b)
    if prev < horizon:
        gaps.append((prev, horizon))
    return gaps


def run_rrfp(workload: Workload, hint: HintOrder | str = "bf",
             buffer_limit: int = 32, seed: int = 0, *,
             jitter: JitterConfig | None = None,
             tp: TpGroup | None = None,
             record_trace: bool = True) -> tuple[Trace, Metrics]:
    """Execute one iteration under readiness-driven arbitration.

    Deterministic for fixed inputs.  Raises :class:`EngineDeadlockError`
    (with a full waiting-state dump) if the virtual clock quiesces with
    unfinished tasks, which no valid configuration should ever trigger.
    """
    if isinstance(hint, str):
        hint = HintOrder.parse(hint)
    run = _Run(workload, hint, buffer_limit, seed, jitter, tp, record_trace)
    return run.run()
