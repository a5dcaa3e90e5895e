"""Ready-set arbitration, backpressure, and tensor-parallel agreement.

This is the decision layer shared verbatim by the virtual-clock engine
and the wall-clock executor.  A hint order ranks whatever is currently
ready; it is never a reason to wait for an unready task.  Backpressure
suppresses forward dispatch once a stage's forward lead D = n_f - n_b
reaches the configured limit, switching to a backward drain
(non-interleaved) or to completing one microbatch at a time
(interleaved).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

from .workload import BACKWARD, FORWARD, WEIGHT, TaskId, Workload

__all__ = [
    "StageBuffers",
    "BackpressureState",
    "HintOrder",
    "TpGroup",
    "Decision",
    "ArbiterState",
    "next_by_priority",
    "arbitrate",
    "advance_round_phase",
    "update_backpressure",
    "tp_coordinate",
]

NORMAL = "normal"
DRAIN_BACKWARD = "drain_backward"
FOCUS_MICROBATCH = "focus_microbatch"

HINT_KINDS = ("bf", "fb", "bprio", "fprio", "bfw", "external")


@dataclass(frozen=True)
class HintOrder:
    """Non-binding dispatch preference.

    ``bf`` alternates backward-then-forward per round, ``fb`` is its
    mirror, ``bprio``/``fprio`` are strict direction priorities, and
    ``bfw`` is ``bf`` plus a weight-update fallback when neither
    compute direction is ready.  ``external`` scans an explicit ranked
    list of (direction, chunk-rule) entries.
    """

    kind: str = "bf"
    ranked: tuple[tuple[str, str], ...] = ()  # for kind == "external"

    def __post_init__(self):
        if self.kind not in HINT_KINDS:
            raise ValueError(f"unknown hint kind: {self.kind}")
        if self.kind == "external":
            if not self.ranked:
                raise ValueError("external hint needs a ranked list")
            for direction, rule in self.ranked:
                if direction not in (FORWARD, BACKWARD, WEIGHT) or rule not in ("asc", "desc"):
                    raise ValueError(f"bad external hint entry: {(direction, rule)}")

    @classmethod
    def parse(cls, text: str) -> "HintOrder":
        return cls(kind=text.lower())


@dataclass(frozen=True)
class TpGroup:
    """Tensor-parallel coordination parameters for one stage group."""

    group_size: int = 1
    coordination_round_cost: int = 5
    skew_lo: int = 0
    skew_hi: int = 0  # per-(message, rank) uniform arrival offset

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.skew_lo < 0 or self.skew_hi < self.skew_lo:
            raise ValueError("skew bounds must satisfy 0 <= lo <= hi")


class Decision(NamedTuple):
    kind: str  # "F" | "B" | "W" | "wait"
    task: TaskId | None


WAIT = Decision("wait", None)


@dataclass
class StageBuffers:
    """Ready/finished buffers of one stage (one rank's view).

    ``admission`` models the first-stage data loader: the next
    not-yet-started chunk-0 forward, dispatchable at any time without
    occupying a buffer slot.  Entries map task -> ready time.
    """

    forward_ready: dict[TaskId, int] = field(default_factory=dict)
    backward_ready: dict[TaskId, int] = field(default_factory=dict)
    forward_finished: dict[TaskId, int] = field(default_factory=dict)
    backward_finished: dict[TaskId, int] = field(default_factory=dict)
    weight_pending: dict[TaskId, int] = field(default_factory=dict)
    admission: TaskId | None = None

    def forward_candidates(self) -> list[TaskId]:
        cands = list(self.forward_ready)
        if self.admission is not None:
            cands.append(self.admission)
        return cands

    def backward_candidates(self) -> list[TaskId]:
        return list(self.backward_ready)


def next_by_priority(candidates, direction: str) -> TaskId | None:
    """Pick the highest-priority ready entry within one direction.

    Forward prefers the smaller model-chunk index, backward the larger;
    remaining ties go to the smaller microbatch index.
    """
    if not candidates:
        return None
    if direction == FORWARD:
        return min(candidates, key=lambda t: (t.chunk, t.microbatch))
    return min(candidates, key=lambda t: (-t.chunk, t.microbatch))


@dataclass
class BackpressureState:
    """Forward-lead accounting for one stage."""

    limit: int
    n_f: int = 0
    n_b: int = 0
    mode: str = NORMAL
    focus_microbatch: int = -1
    focus_position: int = 0  # index into the fixed local completion order

    @property
    def lead(self) -> int:
        return self.n_f - self.n_b


def local_completion_order(workload: Workload, microbatch: int) -> list[TaskId]:
    """Fixed per-microbatch order F_0..F_{C-1}, B_{C-1}..B_0 at one stage.

    Stage index is filled in by the caller; tasks here carry stage -1.
    """
    c = workload.num_chunks
    order = [TaskId(-1, microbatch, k, FORWARD) for k in range(c)]
    order += [TaskId(-1, microbatch, k, BACKWARD) for k in reversed(range(c))]
    return order


@dataclass
class StageProgress:
    """Which local compute tasks a stage has finished (per microbatch)."""

    num_chunks: int
    done: set[tuple[int, int, str]] = field(default_factory=set)  # (mb, chunk, dir)

    def mark(self, task: TaskId) -> None:
        if task.direction != WEIGHT:
            self.done.add((task.microbatch, task.chunk, task.direction))

    def microbatch_finished(self, mb: int) -> bool:
        return all((mb, c, d) in self.done
                   for c in range(self.num_chunks) for d in (FORWARD, BACKWARD))

    def next_in_completion_order(self, mb: int) -> tuple[int, TaskId | None]:
        """(position, task with stage unset) of the first unfinished step."""
        pos = 0
        for c in range(self.num_chunks):
            if (mb, c, FORWARD) not in self.done:
                return pos, TaskId(-1, mb, c, FORWARD)
            pos += 1
        for c in reversed(range(self.num_chunks)):
            if (mb, c, BACKWARD) not in self.done:
                return pos, TaskId(-1, mb, c, BACKWARD)
            pos += 1
        return pos, None


def update_backpressure(bp: BackpressureState, workload: Workload,
                        progress: StageProgress) -> BackpressureState:
    """Recompute the backpressure mode before an arbitration round.

    Entering at D >= limit picks drain mode for non-interleaved stages
    and microbatch-focus mode (lowest unfinished index) for interleaved
    ones; dropping below the limit returns to normal arbitration.
    """
    if bp.lead < bp.limit:
        if bp.mode != NORMAL:
            return replace(bp, mode=NORMAL, focus_microbatch=-1, focus_position=0)
        return bp
    if workload.num_chunks == 1:
        if bp.mode != DRAIN_BACKWARD:
            return replace(bp, mode=DRAIN_BACKWARD, focus_microbatch=-1, focus_position=0)
        return bp
    # interleaved: focus the lowest-index unfinished microbatch
    focus = bp.focus_microbatch
    if bp.mode != FOCUS_MICROBATCH or focus < 0 or progress.microbatch_finished(focus):
        focus = -1
        for j in range(workload.num_microbatches):
            if not progress.microbatch_finished(j):
                focus = j
                break
        if focus < 0:
            return replace(bp, mode=NORMAL, focus_microbatch=-1, focus_position=0)
    pos, _ = progress.next_in_completion_order(focus)
    return replace(bp, mode=FOCUS_MICROBATCH, focus_microbatch=focus, focus_position=pos)


@dataclass
class ArbiterState:
    """Round-position state for the alternating hints (bf, fb, bfw)."""

    phase: str = ""  # "" means: start of the hint's round order

    def reset(self) -> None:
        self.phase = ""


def _round_first(hint: HintOrder) -> str:
    return FORWARD if hint.kind == "fb" else BACKWARD


def arbitrate(buffers: StageBuffers, hint: HintOrder, bp: BackpressureState,
              arb: ArbiterState, workload: Workload,
              progress: StageProgress) -> Decision:
    """Select the next task for one stage, or wait.

    Pure with respect to all inputs: round-phase advancement is applied
    separately by :func:`advance_round_phase` once a decision is
    actually committed, so a deferred tensor-parallel round leaves the
    arbitration state untouched.
    """
    if bp.mode == DRAIN_BACKWARD:
        task = next_by_priority(buffers.backward_candidates(), BACKWARD)
        return Decision(BACKWARD, task) if task else WAIT
    if bp.mode == FOCUS_MICROBATCH:
        _, step = progress.next_in_completion_order(bp.focus_microbatch)
        if step is None:
            return WAIT
        if step.direction == FORWARD:
            for t in buffers.forward_candidates():
                if (t.microbatch, t.chunk) == (step.microbatch, step.chunk):
                    return Decision(FORWARD, t)
        else:
            for t in buffers.backward_candidates():
                if (t.microbatch, t.chunk) == (step.microbatch, step.chunk):
                    return Decision(BACKWARD, t)
        return WAIT

    if hint.kind == "external":
        for direction, rule in hint.ranked:
            if direction == FORWARD:
                cands = buffers.forward_candidates()
            elif direction == BACKWARD:
                cands = buffers.backward_candidates()
            else:
                cands = list(buffers.weight_pending)
            if not cands:
                continue
            if direction == FORWARD:
                task = min(cands, key=lambda t: (t.chunk if rule == "asc" else -t.chunk,
                                                 t.microbatch))
            elif direction == BACKWARD:
                task = min(cands, key=lambda t: (-t.chunk if rule == "desc" else t.chunk,
                                                 t.microbatch))
            else:
                task = min(cands, key=lambda t: (-t.chunk, t.microbatch))
            return Decision(direction, task)
        return _weight_fallback(buffers, workload)

    if hint.kind == "bprio":
        order = (BACKWARD, FORWARD)
    elif hint.kind == "fprio":
        order = (FORWARD, BACKWARD)
    else:  # bf / fb / bfw alternate: phase tracks the next direction to probe
        first = arb.phase or _round_first(hint)
        order = (first, BACKWARD if first == FORWARD else FORWARD)

    for direction in order:
        cands = (buffers.backward_candidates() if direction == BACKWARD
                 else buffers.forward_candidates())
        task = next_by_priority(cands, direction)
        if task is not None:
            return Decision(direction, task)
    return _weight_fallback(buffers, workload)


def _weight_fallback(buffers: StageBuffers, workload: Workload) -> Decision:
    # Pending weight updates must run eventually under any hint, or a
    # decomposed workload could never complete.
    if workload.decompose_backward and buffers.weight_pending:
        task = min(buffers.weight_pending, key=lambda t: (-t.chunk, t.microbatch))
        return Decision(WEIGHT, task)
    return WAIT


def advance_round_phase(hint: HintOrder, arb: ArbiterState, decision: Decision) -> None:
    """Commit a dispatched decision's effect on the round position.

    For the alternating hints, executing one direction hands the next
    probe to the other direction; weight updates and waits restart the
    round from the top of the hint order.
    """
    if hint.kind not in ("bf", "fb", "bfw"):
        return
    if decision.kind == BACKWARD:
        arb.phase = FORWARD
    elif decision.kind == FORWARD:
        arb.phase = BACKWARD
    else:
        arb.reset()


def tp_coordinate(proposals: list[TaskId | None], group: TpGroup):
    """Outcome of one metadata agreement round.

    Agreed(task) iff every rank proposed the same present task;
    anything else defers the step with no arbitration state advanced.
    """
    if len(proposals) != group.group_size:
        raise ValueError("one proposal required per rank")
    first = proposals[0]
    if first is not None and all(p == first for p in proposals):
        return ("agreed", first)
    return ("deferred", None)
