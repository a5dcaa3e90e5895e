"""Task graph of one pipeline-parallel training iteration.

A workload describes N pipeline stages, M microbatches and C model
chunks per stage (C=1 means non-interleaved).  Each unit of work is a
:class:`TaskId`; the dependency rules between tasks are produced by
:func:`build_task_graph`.  All durations are virtual microseconds held
in plain ints: no floating-point time exists anywhere in the simulator,
so replays are bit-identical across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .rng import substream

__all__ = [
    "FORWARD",
    "BACKWARD",
    "WEIGHT",
    "TaskId",
    "DependencyEdge",
    "CommDelay",
    "Workload",
    "DistSpec",
    "GeneratorSpec",
    "WorkloadError",
    "build_task_graph",
    "generate_workload",
]

# Direction tags.  Dispatch rank B < F < W breaks event-time ties.
FORWARD = "F"
BACKWARD = "B"
WEIGHT = "W"
DISPATCH_RANK = {BACKWARD: 0, FORWARD: 1, WEIGHT: 2}


class WorkloadError(ValueError):
    """Raised for structurally invalid workloads or generator specs."""


class TaskId(NamedTuple):
    """One unit of work: (stage, microbatch, chunk, direction)."""

    stage: int
    microbatch: int
    chunk: int
    direction: str

    def key(self) -> str:
        """Canonical string form, used as JSON map key."""
        return f"{self.direction}:{self.stage}:{self.microbatch}:{self.chunk}"

    @classmethod
    def from_key(cls, key: str) -> "TaskId":
        d, s, m, c = key.split(":")
        return cls(int(s), int(m), int(c), d)


# Edge kinds
INTER_STAGE_FORWARD = "InterStageForward"
INTER_STAGE_BACKWARD = "InterStageBackward"
LOCAL_F_TO_B = "LocalForwardToBackward"
CHUNK_WRAP = "ChunkWrap"
BACKWARD_TO_WEIGHT = "BackwardToWeight"

# Edge kinds that cross stages and therefore carry communication delay.
COMM_EDGE_KINDS = frozenset({INTER_STAGE_FORWARD, INTER_STAGE_BACKWARD, CHUNK_WRAP})


class DependencyEdge(NamedTuple):
    src: TaskId
    dst: TaskId
    kind: str


@dataclass(frozen=True)
class CommDelay:
    """Per-edge communication delay model.

    ``constant`` applies ``value`` to every cross-stage edge.  The
    distribution kinds sample one integer delay per edge from a
    sub-stream keyed by the edge itself, so the delay an edge sees does
    not depend on execution order or on which scheduler consumes the
    workload.
    """

    kind: str = "constant"  # constant | uniform | lognormal
    value: int = 0
    lo: int = 0
    hi: int = 0
    mu: float = 0.0
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise WorkloadError(f"unknown comm delay kind: {self.kind}")
        if self.kind == "constant" and self.value < 0:
            raise WorkloadError("comm delay must be non-negative")
        if self.kind != "constant" and (self.lo < 0 or self.hi < self.lo):
            raise WorkloadError("comm delay bounds must satisfy 0 <= lo <= hi")

    def sample(self, edge: DependencyEdge) -> int:
        if edge.kind not in COMM_EDGE_KINDS:
            return 0
        if self.kind == "constant":
            return self.value
        rng = substream(self.seed, "comm", edge.src.key(), edge.dst.key())
        if self.kind == "uniform":
            return int(rng.integers(self.lo, self.hi + 1))
        return _truncated_lognormal(rng, self.mu, self.sigma, self.lo, self.hi)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "constant":
            out["value"] = self.value
        else:
            out.update(lo=self.lo, hi=self.hi, seed=self.seed)
            if self.kind == "lognormal":
                out.update(mu=self.mu, sigma=self.sigma)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CommDelay":
        return cls(**obj)


def _truncated_lognormal(rng, mu: float, sigma: float, lo: int, hi: int) -> int:
    # Rejection sample, clamping after a bounded number of tries.
    v = lo
    for _ in range(1000):
        v = int(round(float(np.exp(rng.normal(mu, sigma)))))
        if lo <= v <= hi:
            return v
    return min(max(v, lo), hi)


@dataclass(frozen=True)
class Workload:
    """Static description of one training iteration."""

    num_stages: int
    num_microbatches: int
    num_chunks: int
    tp_group_size: int
    latency: dict[TaskId, int]
    comm_delay: CommDelay = field(default_factory=CommDelay)
    decompose_backward: bool = False
    backward_split_fraction: float = 0.5

    def __post_init__(self):
        if self.num_stages <= 0 or self.num_microbatches <= 0 or self.num_chunks <= 0:
            raise WorkloadError("stages, microbatches, and chunks must be positive")
        if self.tp_group_size < 1:
            raise WorkloadError("tp_group_size must be >= 1")
        if self.decompose_backward and not (0.0 < self.backward_split_fraction < 1.0):
            raise WorkloadError("backward_split_fraction must lie in (0, 1)")
        for task in self.compute_tasks():
            if task not in self.latency:
                raise WorkloadError(f"missing latency for {task.key()}")
        for task, dur in self.latency.items():
            if not isinstance(dur, int) or dur < 0:
                raise WorkloadError(f"latency of {task.key()} must be a non-negative int")
            if task.direction == WEIGHT and not self.decompose_backward:
                raise WorkloadError("WeightUpdate latencies require decompose_backward")
            if not (0 <= task.stage < self.num_stages
                    and 0 <= task.microbatch < self.num_microbatches
                    and 0 <= task.chunk < self.num_chunks):
                raise WorkloadError(f"task {task.key()} out of declared bounds")

    def compute_tasks(self) -> Iterator[TaskId]:
        """All F and B tasks, plus W tasks when backward is decomposed."""
        dirs = (FORWARD, BACKWARD, WEIGHT) if self.decompose_backward else (FORWARD, BACKWARD)
        for i in range(self.num_stages):
            for j in range(self.num_microbatches):
                for c in range(self.num_chunks):
                    for d in dirs:
                        yield TaskId(i, j, c, d)

    def task_count(self) -> int:
        per = 3 if self.decompose_backward else 2
        return self.num_stages * self.num_microbatches * self.num_chunks * per

    def forward_table(self):
        """Forward latencies as an (N, M) list of lists; requires C == 1."""
        assert self.num_chunks == 1
        return [[self.latency[TaskId(i, j, 0, FORWARD)] for j in range(self.num_microbatches)]
                for i in range(self.num_stages)]

    def backward_table(self):
        assert self.num_chunks == 1
        return [[self.latency[TaskId(i, j, 0, BACKWARD)] for j in range(self.num_microbatches)]
                for i in range(self.num_stages)]

    def to_json(self) -> dict:
        return {
            "num_stages": self.num_stages,
            "num_microbatches": self.num_microbatches,
            "num_chunks": self.num_chunks,
            "tp_group_size": self.tp_group_size,
            "latency": {t.key(): v for t, v in sorted(self.latency.items())},
            "comm_delay": self.comm_delay.to_json(),
            "decompose_backward": self.decompose_backward,
            "backward_split_fraction": self.backward_split_fraction,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Workload":
        return cls(
            num_stages=obj["num_stages"],
            num_microbatches=obj["num_microbatches"],
            num_chunks=obj["num_chunks"],
            tp_group_size=obj.get("tp_group_size", 1),
            latency={TaskId.from_key(k): int(v) for k, v in obj["latency"].items()},
            comm_delay=CommDelay.from_json(obj.get("comm_delay", {"kind": "constant", "value": 0})),
            decompose_backward=obj.get("decompose_backward", False),
            backward_split_fraction=obj.get("backward_split_fraction", 0.5),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "Workload":
        return cls.from_json(json.loads(text))


def build_task_graph(workload: Workload) -> list[DependencyEdge]:
    """All dependency edges of the iteration, in deterministic order.

    Forward flows stage 0..N-1 within a chunk and wraps back to stage 0
    for the next chunk; backward mirrors both traversals in reverse.
    Every backward task additionally depends on its local forward task,
    and decomposed weight updates depend on their backward-input part.
    """
    n, m, c_cnt = workload.num_stages, workload.num_microbatches, workload.num_chunks
    edges: list[DependencyEdge] = []
    for j in range(m):
        for c in range(c_cnt):
            for i in range(n):
                f = TaskId(i, j, c, FORWARD)
                b = TaskId(i, j, c, BACKWARD)
                if i > 0:
                    edges.append(DependencyEdge(TaskId(i - 1, j, c, FORWARD), f, INTER_STAGE_FORWARD))
                elif c > 0:
                    edges.append(DependencyEdge(TaskId(n - 1, j, c - 1, FORWARD), f, CHUNK_WRAP))
                if i < n - 1:
                    edges.append(DependencyEdge(TaskId(i + 1, j, c, BACKWARD), b, INTER_STAGE_BACKWARD))
                elif c < c_cnt - 1:
                    edges.append(DependencyEdge(TaskId(0, j, c + 1, BACKWARD), b, CHUNK_WRAP))
                edges.append(DependencyEdge(f, b, LOCAL_F_TO_B))
                if workload.decompose_backward:
                    edges.append(DependencyEdge(b, TaskId(i, j, c, WEIGHT), BACKWARD_TO_WEIGHT))
    return edges


def predecessors(edges: list[DependencyEdge]) -> dict[TaskId, list[DependencyEdge]]:
    out: dict[TaskId, list[DependencyEdge]] = {}
    for e in edges:
        out.setdefault(e.dst, []).append(e)
    return out


def topological_order(workload: Workload, edges: list[DependencyEdge] | None = None) -> list[TaskId]:
    """Kahn topological sort; raises WorkloadError on a cycle."""
    if edges is None:
        edges = build_task_graph(workload)
    indeg: dict[TaskId, int] = {t: 0 for t in workload.compute_tasks()}
    succ: dict[TaskId, list[TaskId]] = {}
    for e in edges:
        indeg[e.dst] += 1
        succ.setdefault(e.src, []).append(e.dst)
    ready = sorted(t for t, d in indeg.items() if d == 0)
    order: list[TaskId] = []
    while ready:
        t = ready.pop()
        order.append(t)
        for s in succ.get(t, ()):
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
    if len(order) != len(indeg):
        raise WorkloadError("dependency graph contains a cycle")
    return order


# ---------------------------------------------------------------------------
# Synthetic workload generation


@dataclass(frozen=True)
class DistSpec:
    """Latency distribution for one direction.

    Bounds (lo, hi) play the role of the global duration bounds: every
    sampled value lies inside them (before any skew factor is applied).
    """

    kind: str  # constant | uniform | lognormal
    value: int = 0
    lo: int = 0
    hi: int = 0
    mu: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            if self.value <= 0:
                raise WorkloadError("constant latency must be positive")
        elif self.kind in ("uniform", "lognormal"):
            if self.lo <= 0:
                raise WorkloadError("lower latency bound must be positive")
            if self.hi < self.lo:
                raise WorkloadError("upper latency bound must be >= lower bound")
        else:
            raise WorkloadError(f"unknown distribution kind: {self.kind}")

    def bounds(self) -> tuple[int, int]:
        if self.kind == "constant":
            return self.value, self.value
        return self.lo, self.hi

    def sample(self, rng) -> int:
        if self.kind == "constant":
            return self.value
        if self.kind == "uniform":
            return int(rng.integers(self.lo, self.hi + 1))
        return _truncated_lognormal(rng, self.mu, self.sigma, self.lo, self.hi)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "constant":
            out["value"] = self.value
        else:
            out.update(lo=self.lo, hi=self.hi)
            if self.kind == "lognormal":
                out.update(mu=self.mu, sigma=self.sigma)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DistSpec":
        return cls(**obj)


def constant(value: int) -> DistSpec:
    return DistSpec("constant", value=value)


def uniform(lo: int, hi: int) -> DistSpec:
    return DistSpec("uniform", lo=lo, hi=hi)


def lognormal(mu: float, sigma: float, lo: int, hi: int) -> DistSpec:
    return DistSpec("lognormal", mu=mu, sigma=sigma, lo=lo, hi=hi)


@dataclass(frozen=True)
class GeneratorSpec:
    """Recipe for a deterministic synthetic workload.

    ``heavy_last`` multiplies both directions at the last stage
    (last-stage-dominant imbalance); ``heavy_prefix`` multiplies forward
    latencies of the first ceil(N/4) stages, modeling a heavy
    vision-style prefix.  Skew factors apply after bound-checked
    sampling and may push values past the declared bounds.
    """

    num_stages: int
    num_microbatches: int
    num_chunks: int = 1
    tp_group_size: int = 1
    forward: DistSpec = field(default_factory=lambda: constant(100))
    backward: DistSpec = field(default_factory=lambda: constant(100))
    comm_delay: CommDelay = field(default_factory=CommDelay)
    decompose_backward: bool = False
    backward_split_fraction: float = 0.5
    heavy_last: float = 1.0
    heavy_prefix: float = 1.0

    def __post_init__(self):
        if self.num_stages <= 0 or self.num_microbatches <= 0 or self.num_chunks <= 0:
            raise WorkloadError("stages, microbatches, and chunks must be positive")
        if self.heavy_last < 1.0 or self.heavy_prefix < 1.0:
            raise WorkloadError("skew factors must be >= 1")

    def to_json(self) -> dict:
        return {
            "num_stages": self.num_stages,
            "num_microbatches": self.num_microbatches,
            "num_chunks": self.num_chunks,
            "tp_group_size": self.tp_group_size,
            "forward": self.forward.to_json(),
            "backward": self.backward.to_json(),
            "comm_delay": self.comm_delay.to_json(),
            "decompose_backward": self.decompose_backward,
            "backward_split_fraction": self.backward_split_fraction,
            "heavy_last": self.heavy_last,
            "heavy_prefix": self.heavy_prefix,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorSpec":
        obj = dict(obj)
        obj["forward"] = DistSpec.from_json(obj["forward"])
        obj["backward"] = DistSpec.from_json(obj["backward"])
        if "comm_delay" in obj:
            obj["comm_delay"] = CommDelay.from_json(obj["comm_delay"])
        return cls(**obj)


def generate_workload(spec: GeneratorSpec, seed: int) -> Workload:
    """Deterministically sample a workload from ``spec``.

    One sub-stream per (stage, direction) keeps derivation
    order-independent: sampling stage 3 never depends on whether stage 2
    was sampled first.
    """
    n, m, c_cnt = spec.num_stages, spec.num_microbatches, spec.num_chunks
    prefix_stages = -(-n // 4)  # ceil(N/4)
    latency: dict[TaskId, int] = {}
    for i in range(n):
        for direction, dist in ((FORWARD, spec.forward), (BACKWARD, spec.backward)):
            rng = substream(seed, "lat", direction, i)
            for c in range(c_cnt):
                for j in range(m):
                    v = dist.sample(rng)
                    if i == n - 1 and spec.heavy_last != 1.0:
                        v = int(round(v * spec.heavy_last))
                    if direction == FORWARD and i < prefix_stages and spec.heavy_prefix != 1.0:
                        v = int(round(v * spec.heavy_prefix))
                    latency[TaskId(i, j, c, direction)] = max(v, 1)

    if spec.decompose_backward:
        beta = spec.backward_split_fraction
        for i in range(n):
            for j in range(m):
                for c in range(c_cnt):
                    b = TaskId(i, j, c, BACKWARD)
                    full = latency[b]
                    grad_part = int(round(beta * full))
                    latency[b] = grad_part
                    latency[TaskId(i, j, c, WEIGHT)] = full - grad_part

    comm = spec.comm_delay
    if comm.kind != "constant" and comm.seed == 0:
        comm = CommDelay(kind=comm.kind, lo=comm.lo, hi=comm.hi,
                         mu=comm.mu, sigma=comm.sigma, seed=seed)
    return Workload(
        num_stages=n,
        num_microbatches=m,
        num_chunks=c_cnt,
        tp_group_size=spec.tp_group_size,
        latency=latency,
        comm_delay=comm,
        decompose_backward=spec.decompose_backward,
        backward_split_fraction=spec.backward_split_fraction,
    )
