"""Timestamped event traces and run metrics.

A trace is an ordered list of events with integer microsecond
timestamps.  Event kinds: ``exec`` (a task ran on a stage), ``send``
(a tensor left a stage; ends at delivery), ``recv`` (it landed in a
ready buffer), ``coord`` (one tensor-parallel agreement round), and
``block`` (a maximal interval in which a stage had nothing to run).
Traces serialize to JSON-lines with a leading meta line that marks
virtual- versus wall-clock origin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .workload import TaskId

__all__ = ["TraceEvent", "Trace", "Metrics"]

EVENT_KINDS = ("exec", "send", "recv", "coord", "block")


@dataclass(frozen=True, slots=True)
class TraceEvent:
    t_start: int
    t_end: int
    stage: int
    rank: int | None
    microbatch: int | None
    chunk: int | None
    direction: str | None
    event_kind: str

    def task(self) -> TaskId | None:
        if self.direction is None:
            return None
        return TaskId(self.stage, self.microbatch, self.chunk, self.direction)

    def to_json(self) -> dict:
        return {
            "t_start": self.t_start,
            "t_end": self.t_end,
            "stage": self.stage,
            "rank": self.rank,
            "microbatch": self.microbatch,
            "chunk": self.chunk,
            "direction": self.direction,
            "event_kind": self.event_kind,
        }


@dataclass
class Trace:
    events: list[TraceEvent] = field(default_factory=list)
    clock: str = "virtual"  # virtual | wall
    time_scale: float = 1.0

    def execs(self, rank: int | None = None) -> list[TraceEvent]:
        return [e for e in self.events
                if e.event_kind == "exec" and (rank is None or e.rank == rank)]

    def makespan(self) -> int:
        ends = [e.t_end for e in self.events if e.event_kind == "exec"]
        return max(ends) if ends else 0

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"meta": {"clock": self.clock,
                                         "time_scale": self.time_scale,
                                         "version": 1}}) + "\n")
            for e in self.events:
                f.write(json.dumps(e.to_json()) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "Trace":
        trace = cls()
        with open(path) as f:
            for line in f:
                obj = json.loads(line)
                if "meta" in obj:
                    trace.clock = obj["meta"].get("clock", "virtual")
                    trace.time_scale = obj["meta"].get("time_scale", 1.0)
                    continue
                trace.events.append(TraceEvent(**obj))
        return trace


@dataclass
class StageMetrics:
    stage: int
    compute: int = 0
    blocking: int = 0
    tp_coord: int = 0
    n_f: int = 0
    n_b: int = 0
    n_w: int = 0
    max_occupancy: dict[str, int] = field(default_factory=dict)


@dataclass
class Metrics:
    makespan: int = 0
    total_tasks: int = 0
    agreed_rounds: int = 0
    deferred_rounds: int = 0
    per_stage: list[StageMetrics] = field(default_factory=list)

    def max_occupancy(self) -> int:
        worst = 0
        for s in self.per_stage:
            for v in s.max_occupancy.values():
                worst = max(worst, v)
        return worst

    def to_json(self) -> dict:
        return {
            "makespan": self.makespan,
            "total_tasks": self.total_tasks,
            "agreed_rounds": self.agreed_rounds,
            "deferred_rounds": self.deferred_rounds,
            "per_stage": [
                {
                    "stage": s.stage,
                    "compute": s.compute,
                    "blocking": s.blocking,
                    "tp_coord": s.tp_coord,
                    "n_f": s.n_f,
                    "n_b": s.n_b,
                    "n_w": s.n_w,
                    "max_occupancy": s.max_occupancy,
                }
                for s in self.per_stage
            ],
        }

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
