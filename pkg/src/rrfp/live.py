"""Wall-clock executor: the same arbitration on real concurrent workers.

Every (stage, rank) runs three threads: a compute worker that polls the
ready buffers through the exact arbitration/backpressure/coordination
functions the virtual engine uses, plus a sender and a receiver moving
messages over bounded in-process queues.  Tasks are timed busy-spins of
their configured durations scaled by ``time_scale``.

Concurrency contract: all buffer mutations for a stage group happen
under that group's lock, cross-stage interaction happens only through
queues, and no lock is held while executing a task or while blocking on
a queue.  Waiting workers park on the group condition and are notified
by buffer insertions.  A watchdog aborts the run and dumps all worker
states if no task completes for ``watchdog_secs``.
"""

from __future__ import annotations

import queue
import threading
import time
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
from .engine import _gaps
from .jitter import JitterConfig, build_injection_table
from .rng import substream
from .trace import Metrics, StageMetrics, Trace, TraceEvent
from .workload import (
    BACKWARD,
    CHUNK_WRAP,
    FORWARD,
    INTER_STAGE_BACKWARD,
    INTER_STAGE_FORWARD,
    WEIGHT,
    DependencyEdge,
    TaskId,
    Workload,
)

__all__ = ["run_live", "LiveWatchdogError"]

_POLL = 0.02  # defensive cv timeout; wakeups normally come from notifications


class LiveWatchdogError(RuntimeError):
    """No completion within the watchdog window; carries a state dump."""

    def __init__(self, message: str, dump: str):
        super().__init__(message)
        self.dump = dump


def _spin_until(deadline_ns: int) -> None:
    # sleep through the bulk, busy-spin the last stretch for precision
    while True:
        remaining = deadline_ns - time.perf_counter_ns()
        if remaining <= 0:
            return
        if remaining > 2_000_000:
            time.sleep((remaining - 1_000_000) / 1e9)
        elif remaining > 300_000:
            time.sleep(0.0001)


@dataclass
class _Group:
    """Shared state of one pipeline stage (all tensor-parallel ranks)."""

    index: int
    ranks: int
    lock: threading.Lock = field(default_factory=threading.Lock)
    cv: threading.Condition = None
    buffers: list[StageBuffers] = field(default_factory=list)
    bp: BackpressureState = None
    arb: ArbiterState = field(default_factory=ArbiterState)
    progress: StageProgress = None
    pending_grads: list[dict] = field(default_factory=list)
    next_admission: int = -1
    tasks_remaining: int = 0
    version: int = 0            # bumped on every buffer insertion
    round_id: int = 0
    proposals: dict = field(default_factory=dict)
    outcome: tuple | None = None
    acks: int = 0
    completers: int = 0
    completion_round: int = 0
    last_sends: list = field(default_factory=list)
    n_w: int = 0

    def dump(self) -> str:
        return (f"stage {self.index}: remaining={self.tasks_remaining} "
                f"mode={self.bp.mode} D={self.bp.lead} round={self.round_id} "
                f"checked_in={sorted(self.proposals)} "
                f"fwd_ready={[t.key() for b in self.buffers for t in b.forward_ready]} "
                f"bwd_ready={[t.key() for b in self.buffers for t in b.backward_ready]} "
                f"pending_w={[t.key() for t in self.buffers[0].weight_pending]}")


class _LiveRun:
    def __init__(self, workload: Workload, hint: HintOrder, buffer_limit: int,
                 time_scale: float, seed: int, jitter: JitterConfig | None,
                 tp: TpGroup | None, watchdog_secs: float):
        if buffer_limit < 1:
            raise ValueError("buffer_limit must be >= 1")
        if time_scale <= 0:
            raise ValueError("time_scale must be positive")
        self.w = workload
        self.hint = hint
        self.limit = buffer_limit
        self.scale = time_scale
        self.seed = seed
        self.watchdog_secs = watchdog_secs
        r = workload.tp_group_size
        if tp is None:
            tp = TpGroup(group_size=r)
        elif tp.group_size != r:
            raise ValueError("TpGroup.group_size must match workload.tp_group_size")
        self.tp = tp
        self.injected = build_injection_table(workload, jitter or JitterConfig(), seed)

        n = workload.num_stages
        cap = buffer_limit + workload.num_chunks
        self.groups: list[_Group] = []
        per_stage = workload.task_count() // n
        for i in range(n):
            g = _Group(index=i, ranks=r,
                       buffers=[StageBuffers() for _ in range(r)],
                       bp=BackpressureState(limit=buffer_limit),
                       progress=StageProgress(workload.num_chunks),
                       pending_grads=[{} for _ in range(r)],
                       tasks_remaining=per_stage)
            g.cv = threading.Condition(g.lock)
            if i == 0:
                g.next_admission = 0
                adm = TaskId(0, 0, 0, FORWARD)
                for b in g.buffers:
                    b.admission = adm
            if workload.decompose_backward:
                shared: dict[TaskId, int] = {}
                for b in g.buffers:
                    b.weight_pending = shared
            self.groups.append(g)

        self.out_q = {(i, k): queue.Queue(maxsize=cap)
                      for i in range(n) for k in range(r)}
        self.in_q = {(i, k): queue.Queue(maxsize=cap)
                     for i in range(n) for k in range(r)}
        self.stop = threading.Event()
        self.failure: str | None = None
        self.completions = 0
        self.trace_lock = threading.Lock()
        self.events: list[TraceEvent] = []
        self.epoch_ns = 0
        self.total = workload.task_count()

    # -- time ---------------------------------------------------------------

    def _now_us(self) -> int:
        return (time.perf_counter_ns() - self.epoch_ns) // 1000

    def _emit(self, kind: str, t0: int, t1: int, stage: int,
              rank: int | None, task: TaskId | None) -> None:
        ev = TraceEvent(t_start=t0, t_end=t1, stage=stage, rank=rank,
                        microbatch=None if task is None else task.microbatch,
                        chunk=None if task is None else task.chunk,
                        direction=None if task is None else task.direction,
                        event_kind=kind)
        with self.trace_lock:
            self.events.append(ev)

    # -- routing (same rules as the virtual engine) --------------------------

    def _route(self, task: TaskId) -> tuple[TaskId, str] | None:
        w, i, c = self.w, task.stage, task.chunk
        n, c_cnt = w.num_stages, w.num_chunks
        if task.direction == FORWARD:
            if i < n - 1:
                return TaskId(i + 1, task.microbatch, c, FORWARD), INTER_STAGE_FORWARD
            if c < c_cnt - 1:
                return TaskId(0, task.microbatch, c + 1, FORWARD), CHUNK_WRAP
            return None  # local turn-around handled by caller
        if i > 0:
            return TaskId(i - 1, task.microbatch, c, BACKWARD), INTER_STAGE_BACKWARD
        if c > 0:
            return TaskId(n - 1, task.microbatch, c - 1, BACKWARD), CHUNK_WRAP
        return None

    # -- threads --------------------------------------------------------------

    def _sender(self, stage: int, rank: int) -> None:
        q = self.out_q[(stage, rank)]
        while not self.stop.is_set():
            try:
                dst_task, delay_us = q.get(timeout=_POLL)
            except queue.Empty:
                continue
            if delay_us:
                time.sleep(delay_us * self.scale / 1e6)
            dest = self.in_q[(dst_task.stage, rank)]
            while not self.stop.is_set():
                try:
                    dest.put(dst_task, timeout=_POLL)
                    break
                except queue.Full:
                    continue

    def _receiver(self, stage: int, rank: int) -> None:
        q = self.in_q[(stage, rank)]
        g = self.groups[stage]
        while not self.stop.is_set():
            try:
                task = q.get(timeout=_POLL)
            except queue.Empty:
                continue
            if self.tp.skew_hi > 0 and g.ranks > 1:
                rng = substream(self.seed, "skew", task.key(), rank)
                skew = int(rng.integers(self.tp.skew_lo, self.tp.skew_hi + 1))
                if skew:
                    time.sleep(skew * self.scale / 1e6)
            now = self._now_us()
            with g.cv:
                if task.direction == FORWARD:
                    g.buffers[rank].forward_ready[task] = now
                else:
                    if (task.microbatch, task.chunk, FORWARD) in g.progress.done:
                        g.buffers[rank].backward_ready[task] = now
                    else:
                        g.pending_grads[rank][task] = now
                g.version += 1
                g.cv.notify_all()
            self._emit("recv", now, now, stage, rank, task)

    def _resolve_round(self, g: _Group) -> tuple:
        """Compute the group outcome; caller holds the lock.

        Every rank's decision is evaluated here, atomically at one
        instant, once all ranks have checked in.  Evaluating inside the
        rendezvous (instead of trusting each rank's earlier proposal)
        means a deferral can only happen while a message is genuinely
        still in flight, so the next arrival always retries it.  The
        outcome carries the buffer version at resolve time so the
        waiting predicates see arrivals that land between resolution
        and a rank's acknowledgement.
        """
        g.bp = update_backpressure(g.bp, self.w, g.progress)
        decisions = [arbitrate(g.buffers[r], self.hint, g.bp, g.arb, self.w,
                               g.progress) for r in range(g.ranks)]
        if all(d.kind == "wait" for d in decisions):
            g.arb.reset()
            return ("wait", None, 0, g.version)
        if all(d.kind == WEIGHT for d in decisions):
            task = decisions[0].task
            self._commit_locked(g, decisions[0])
            return ("exec", task, 0, g.version)
        proposals = [d.task if d.kind in (FORWARD, BACKWARD) else None
                     for d in decisions]
        verdict, agreed = tp_coordinate(proposals, self.tp)
        cost = self.tp.coordination_round_cost if g.ranks > 1 else 0
        if verdict == "agreed":
            kind = FORWARD if agreed.direction == FORWARD else BACKWARD
            self._commit_locked(g, Decision(kind, agreed))
            return ("exec", agreed, cost, g.version)
        g.arb.reset()
        return ("defer", None, cost, g.version)

    def _commit_locked(self, g: _Group, decision: Decision) -> None:
        task = decision.task
        if decision.kind == FORWARD:
            if g.buffers[0].admission == task:
                g.next_admission += 1
                adm = None
                if g.next_admission < self.w.num_microbatches:
                    adm = TaskId(0, g.next_admission, 0, FORWARD)
                for b in g.buffers:
                    b.admission = adm
            else:
                for b in g.buffers:
                    b.forward_ready.pop(task, None)
        elif decision.kind == BACKWARD:
            for b in g.buffers:
                b.backward_ready.pop(task, None)
        else:
            g.buffers[0].weight_pending.pop(task, None)
        advance_round_phase(self.hint, g.arb, decision)

    def _complete_locked(self, g: _Group, task: TaskId, end_us: int) -> list:
        """Completion bookkeeping; returns the sends to enqueue."""
        g.progress.mark(task)
        g.tasks_remaining -= 1
        self.completions += 1
        sends = []
        if task.direction == FORWARD:
            g.bp.n_f += 1
            b_task = TaskId(g.index, task.microbatch, task.chunk, BACKWARD)
            for rank in range(g.ranks):
                arrived = g.pending_grads[rank].pop(b_task, None)
                if arrived is not None:
                    g.buffers[rank].backward_ready[b_task] = end_us
            route = self._route(task)
            if route is None:
                for rank in range(g.ranks):
                    g.buffers[rank].backward_ready[b_task] = end_us
            else:
                sends.append(route)
        elif task.direction == BACKWARD:
            g.bp.n_b += 1
            if self.w.decompose_backward:
                w_task = TaskId(g.index, task.microbatch, task.chunk, WEIGHT)
                g.buffers[0].weight_pending[w_task] = end_us
            route = self._route(task)
            if route is not None:
                sends.append(route)
        else:
            g.n_w += 1
        g.version += 1
        return sends

    def _worker(self, stage: int, rank: int) -> None:
        g = self.groups[stage]
        w = self.w
        while not self.stop.is_set():
            with g.cv:
                while (g.tasks_remaining > 0 and not self.stop.is_set()
                       and (rank in g.proposals or g.outcome is not None)):
                    g.cv.wait(_POLL)
                if g.tasks_remaining == 0 or self.stop.is_set():
                    return
                g.proposals[rank] = True  # rendezvous marker; decisions are
                # recomputed atomically by the resolving rank
                if len(g.proposals) == g.ranks:
                    g.outcome = self._resolve_round(g)
                    g.cv.notify_all()
                else:
                    while g.outcome is None and not self.stop.is_set():
                        g.cv.wait(_POLL)
                    if self.stop.is_set():
                        return
                kind, task, cost, version_snapshot = g.outcome
                g.acks += 1
                if g.acks == g.ranks:
                    g.proposals.clear()
                    g.outcome = None
                    g.acks = 0
                    g.round_id += 1
                    g.cv.notify_all()
                else:
                    rid = g.round_id
                    while g.round_id == rid and not self.stop.is_set():
                        g.cv.wait(_POLL)
                    if self.stop.is_set():
                        return

            if kind == "wait":
                with g.cv:
                    while (g.version == version_snapshot and g.tasks_remaining > 0
                           and not self.stop.is_set()):
                        g.cv.wait(_POLL)
                continue

            if cost:  # one coordination round's wall time, agreed or deferred
                t0 = self._now_us()
                _spin_until(time.perf_counter_ns() + int(cost * self.scale * 1000))
                if rank == 0:
                    self._emit("coord", t0, self._now_us(), stage, None,
                               task if kind == "exec" else None)

            if kind == "defer":
                with g.cv:
                    while (g.version == version_snapshot and g.tasks_remaining > 0
                           and not self.stop.is_set()):
                        g.cv.wait(_POLL)
                continue

            # execute
            dur_us = (w.latency[task] + self.injected.get(task, 0)) * self.scale
            t0 = self._now_us()
            _spin_until(time.perf_counter_ns() + int(dur_us * 1000))
            t1 = self._now_us()
            self._emit("exec", t0, t1, stage, rank if g.ranks > 1 else None, task)
            with g.cv:
                g.completers += 1
                if g.completers == g.ranks:
                    g.completers = 0
                    g.last_sends = self._complete_locked(g, task, t1)
                    g.completion_round += 1
                    g.cv.notify_all()
                else:
                    cr = g.completion_round
                    while g.completion_round == cr and not self.stop.is_set():
                        g.cv.wait(_POLL)
                    if self.stop.is_set():
                        return
                sends = list(g.last_sends)
            # every rank forwards through its own sender lane so each
            # destination rank receives its copy of the message
            for dst_task, edge_kind in sends:
                delay = self.w.comm_delay.sample(
                    DependencyEdge(task, dst_task, edge_kind))
                if rank == 0:
                    self._emit("send", t1, int(t1 + delay * self.scale),
                               stage, None, task)
                q = self.out_q[(stage, rank)]
                while not self.stop.is_set():
                    try:
                        q.put((dst_task, delay), timeout=_POLL)
                        break
                    except queue.Full:
                        continue

    def _watchdog(self) -> None:
        last = -1
        stagnant_since = time.monotonic()
        while not self.stop.is_set():
            time.sleep(0.05)
            if self.completions != last:
                last = self.completions
                stagnant_since = time.monotonic()
                if self.completions >= self.total:
                    return
            elif time.monotonic() - stagnant_since > self.watchdog_secs:
                lines = [f"watchdog: no completion for {self.watchdog_secs}s, "
                         f"{self.completions}/{self.total} done"]
                for g in self.groups:
                    with g.lock:
                        lines.append(g.dump())
                for key, q in sorted(self.in_q.items()):
                    lines.append(f"in_q{key}: {q.qsize()} queued")
                self.failure = "\n".join(lines)
                self.stop.set()
                for g in self.groups:
                    with g.cv:
                        g.cv.notify_all()
                return

    # -- orchestration --------------------------------------------------------

    def run(self) -> tuple[Trace, Metrics]:
        n, r = self.w.num_stages, self.w.tp_group_size
        self.epoch_ns = time.perf_counter_ns()
        threads = []
        for i in range(n):
            for k in range(r):
                threads.append(threading.Thread(
                    target=self._worker, args=(i, k), daemon=True,
                    name=f"compute-{i}.{k}"))
                threads.append(threading.Thread(
                    target=self._sender, args=(i, k), daemon=True,
                    name=f"sender-{i}.{k}"))
                threads.append(threading.Thread(
                    target=self._receiver, args=(i, k), daemon=True,
                    name=f"receiver-{i}.{k}"))
        dog = threading.Thread(target=self._watchdog, daemon=True, name="watchdog")
        for t in threads:
            t.start()
        dog.start()
        for t in threads:
            if t.name.startswith("compute"):
                t.join()
        self.stop.set()
        for t in threads:
            t.join(timeout=2.0)
        dog.join(timeout=2.0)
        if self.failure is not None:
            raise LiveWatchdogError("live run watchdog fired", self.failure)
        return self._finalize()

    def _finalize(self) -> tuple[Trace, Metrics]:
        events = sorted(self.events, key=lambda e: (e.t_start, e.t_end, e.stage,
                                                    e.event_kind))
        makespan = max((e.t_end for e in events if e.event_kind == "exec"),
                       default=0)
        metrics = Metrics(makespan=makespan, total_tasks=self.total)
        final_events = list(events)
        for g in self.groups:
            lane = [(e.t_start, e.t_end) for e in events
                    if e.stage == g.index and e.event_kind in ("exec", "coord")
                    and (e.rank is None or e.rank == 0)]
            compute = sum(e.t_end - e.t_start for e in events
                          if e.stage == g.index and e.event_kind == "exec"
                          and (e.rank is None or e.rank == 0))
            coord = sum(e.t_end - e.t_start for e in events
                        if e.stage == g.index and e.event_kind == "coord")
            sm = StageMetrics(stage=g.index, compute=compute, tp_coord=coord,
                              blocking=makespan - compute - coord,
                              n_f=g.bp.n_f, n_b=g.bp.n_b, n_w=g.n_w)
            metrics.per_stage.append(sm)
            for a, b in _gaps(lane, makespan):
                final_events.append(TraceEvent(a, b, g.index, None, None, None,
                                               None, "block"))
        trace = Trace(events=final_events, clock="wall", time_scale=self.scale)
        return trace, metrics


def run_live(workload: Workload, hint: HintOrder | str = "bf",
             buffer_limit: int = 32, time_scale: float = 1.0, *,
             seed: int = 0, jitter: JitterConfig | None = None,
             tp: TpGroup | None = None,
             watchdog_secs: float = 30.0) -> tuple[Trace, Metrics]:
    """Run one iteration on real concurrent per-stage workers.

    ``time_scale`` converts virtual microseconds into wall microseconds
    (10.0 means one virtual us takes ten real us).  Raises
    :class:`LiveWatchdogError` with a full state dump if progress stalls
    for ``watchdog_secs``.
    """
    if isinstance(hint, str):
        hint = HintOrder.parse(hint)
    run = _LiveRun(workload, hint, buffer_limit, time_scale, seed, jitter, tp,
                   watchdog_secs)
    return run.run()
