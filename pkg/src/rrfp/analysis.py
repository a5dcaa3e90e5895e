"""Analytical quantities: makespan bounds, oracle search, and breakdowns.

The upper bound decomposes readiness-driven makespan into idealized
single-direction pipeline progress plus per-microbatch stage-imbalance
terms; the lower bound L is the total forward+backward work of the last
stage, which no valid schedule can avoid.  All arithmetic is exact over
integer microseconds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .baselines import backward_only_makespan, forward_only_makespan
from .engine import run_rrfp
from .trace import Trace
from .workload import (
    GeneratorSpec,
    TaskId,
    Workload,
    build_task_graph,
    generate_workload,
)

__all__ = [
    "BoundReport",
    "theorem_bound",
    "lower_bound",
    "brute_force_makespan",
    "bottleneck_stats",
    "BottleneckStats",
    "breakdown",
    "BreakdownReport",
    "corollary_ratio_curve",
]


@dataclass(frozen=True)
class BoundReport:
    forward_ref: int          # forward-only reference makespan
    backward_ref: int         # backward-only reference makespan
    forward_imbalance: int    # sum_{j>=1} (F_max^j - F_last^j)
    backward_imbalance: int   # sum_{j<=M-2} (B_max^j - B_last^j)
    upper_bound: int
    lower_bound: int          # L: total last-stage work
    t_max: int                # max_j (F_max^j + B_max^j)

    def to_json(self) -> dict:
        return {
            "forward_ref": self.forward_ref,
            "backward_ref": self.backward_ref,
            "forward_imbalance": self.forward_imbalance,
            "backward_imbalance": self.backward_imbalance,
            "upper_bound": self.upper_bound,
            "lower_bound": self.lower_bound,
            "t_max": self.t_max,
        }

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)


def lower_bound(workload: Workload) -> int:
    """L = total forward + backward work at the last stage.

    Valid for any schedule and any communication model: the last stage
    must execute all of its own tasks serially.  For decomposed
    workloads the weight parts of the last stage count as well, since
    they too are serialized there.
    """
    last = workload.num_stages - 1
    return sum(v for t, v in workload.latency.items() if t.stage == last)


def theorem_bound(workload: Workload) -> BoundReport:
    """Exact evaluation of the BF-arbitration upper bound.

    Restricted to the analytical setting: non-interleaved, zero
    communication delay, no backward decomposition.
    """
    if workload.num_chunks != 1:
        raise ValueError("bound applies to non-interleaved workloads")
    if workload.decompose_backward:
        raise ValueError("bound applies to undecomposed backward")
    if workload.comm_delay.kind != "constant" or workload.comm_delay.value != 0:
        raise ValueError("bound applies at zero communication delay")

    f_tab = workload.forward_table()
    b_tab = workload.backward_table()
    m = workload.num_microbatches
    f_max = [max(row[j] for row in f_tab) for j in range(m)]
    b_max = [max(row[j] for row in b_tab) for j in range(m)]
    f_last = f_tab[-1]
    b_last = b_tab[-1]

    f_ref = forward_only_makespan(workload)
    b_ref = backward_only_makespan(workload)
    f_imb = sum(f_max[j] - f_last[j] for j in range(1, m))
    b_imb = sum(b_max[j] - b_last[j] for j in range(m - 1))
    return BoundReport(
        forward_ref=f_ref,
        backward_ref=b_ref,
        forward_imbalance=f_imb,
        backward_imbalance=b_imb,
        upper_bound=f_ref + b_ref + f_imb + b_imb,
        lower_bound=sum(f_last) + sum(b_last),
        t_max=max(f_max[j] + b_max[j] for j in range(m)),
    )


# ---------------------------------------------------------------------------
# Brute-force optimum

BRUTE_FORCE_TASK_CAP = 12


def brute_force_makespan(workload: Workload) -> int:
    """Minimum makespan over every precedence- and serialization-
    respecting execution, by exhaustive branch-and-bound over
    semi-active schedules.  Refuses workloads above
    ``BRUTE_FORCE_TASK_CAP`` tasks."""
    tasks = list(workload.compute_tasks())
    if len(tasks) > BRUTE_FORCE_TASK_CAP:
        raise ValueError(f"brute force capped at {BRUTE_FORCE_TASK_CAP} tasks")

    edges = build_task_graph(workload)
    preds: dict[TaskId, list] = {t: [] for t in tasks}
    succs: dict[TaskId, list] = {t: [] for t in tasks}
    for e in edges:
        d = workload.comm_delay.sample(e)
        preds[e.dst].append((e.src, d))
        succs[e.src].append((e.dst, d))

    dur = {t: workload.latency[t] for t in tasks}

    # tail(t): longest remaining path starting at t (critical-path bound)
    tail: dict[TaskId, int] = {}

    def _tail(t: TaskId) -> int:
        if t not in tail:
            tail[t] = dur[t] + max([d + _tail(s) for s, d in succs[t]] or [0])
        return tail[t]

    for t in tasks:
        _tail(t)

    stage_load = [0] * workload.num_stages
    for t in tasks:
        stage_load[t.stage] += dur[t]

    # greedy incumbent: always dispatch the ready task with the longest tail
    best = _greedy_schedule(tasks, preds, dur, tail, workload.num_stages)

    n = workload.num_stages
    order = sorted(tasks)

    def dfs(done_end: dict, clocks: tuple, remaining_load: tuple, spent: int):
        nonlocal best
        if len(done_end) == len(tasks):
            best = min(best, max(clocks))
            return
        lb = 0
        for s in range(n):
            if remaining_load[s]:
                lb = max(lb, clocks[s] + remaining_load[s])
        candidates = []
        for t in order:
            if t in done_end:
                continue
            arr = 0
            ok = True
            for src, d in preds[t]:
                if src not in done_end:
                    ok = False
                    break
                arr = max(arr, done_end[src] + d)
            if not ok:
                continue
            start = max(clocks[t.stage], arr)
            lb = max(lb, start + tail[t])
            candidates.append((start, t))
        if lb >= best:
            return
        for start, t in candidates:
            e = start + dur[t]
            clocks2 = list(clocks)
            clocks2[t.stage] = e
            load2 = list(remaining_load)
            load2[t.stage] -= dur[t]
            done_end[t] = e
            dfs(done_end, tuple(clocks2), tuple(load2), spent + dur[t])
            del done_end[t]

    dfs({}, (0,) * n, tuple(stage_load), 0)
    return best


def _greedy_schedule(tasks, preds, dur, tail, n) -> int:
    done_end: dict[TaskId, int] = {}
    clocks = [0] * n
    pending = set(tasks)
    while pending:
        ready = []
        for t in pending:
            arr = 0
            ok = True
            for src, d in preds[t]:
                if src not in done_end:
                    ok = False
                    break
                arr = max(arr, done_end[src] + d)
            if ok:
                ready.append((-(tail[t]), max(clocks[t.stage], arr), t))
        ready.sort()
        _, start, t = ready[0]
        done_end[t] = start + dur[t]
        clocks[t.stage] = start + dur[t]
        pending.remove(t)
    return max(clocks)


# ---------------------------------------------------------------------------
# Bottleneck statistics


@dataclass
class BottleneckStats:
    """Forward-latency bottleneck distribution across stages."""

    stage_fraction: list[float]                 # argmax share per stage
    relative_percentiles: list[dict[str, float]]  # p85/p90/p95 of F_i/F_last
    p_hat: float                                # share of samples where last stage loses
    rho_hat: float                              # worst F_max/F_last over those samples

    def to_json(self) -> dict:
        return {
            "stage_fraction": self.stage_fraction,
            "relative_percentiles": self.relative_percentiles,
            "p_hat": self.p_hat,
            "rho_hat": self.rho_hat,
        }

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["stage", "bottleneck_fraction", "p85", "p90", "p95"])
            for i, (frac, pct) in enumerate(
                    zip(self.stage_fraction, self.relative_percentiles)):
                writer.writerow([i, f"{frac:.6f}", f"{pct['p85']:.6f}",
                                 f"{pct['p90']:.6f}", f"{pct['p95']:.6f}"])


def bottleneck_stats(samples) -> BottleneckStats:
    """Per-stage bottleneck shares over forward latency samples.

    ``samples``: array-like of shape (iterations, stages, microbatches).
    Argmax ties resolve to the higher stage index, so uniform workloads
    attribute every microbatch to the last stage.
    """
    arr = np.asarray(samples, dtype=np.int64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    iters, n, m = arr.shape
    # ties to the higher index: reverse stages, take first argmax, map back
    argmax = n - 1 - np.argmax(arr[:, ::-1, :], axis=1)  # (iters, m)
    counts = np.bincount(argmax.ravel(), minlength=n)
    total = iters * m
    fraction = (counts / total).tolist()

    last = arr[:, -1, :].astype(np.float64)  # (iters, m)
    ratios = arr.astype(np.float64) / last[:, None, :]
    pcts = []
    for i in range(n):
        flat = ratios[:, i, :].ravel()
        pcts.append({"p85": float(np.percentile(flat, 85)),
                     "p90": float(np.percentile(flat, 90)),
                     "p95": float(np.percentile(flat, 95))})

    loses = argmax != (n - 1)
    p_hat = float(loses.mean())
    if loses.any():
        f_max = arr.max(axis=1).astype(np.float64)
        rho_hat = float((f_max[loses] / last[loses]).max())
    else:
        rho_hat = 1.0
    return BottleneckStats(fraction, pcts, p_hat, rho_hat)


def stats_from_workloads(workloads: list[Workload]) -> BottleneckStats:
    """Bottleneck stats treating each workload as one iteration (C=1)."""
    return bottleneck_stats([w.forward_table() for w in workloads])


# ---------------------------------------------------------------------------
# Trace breakdown


@dataclass
class BreakdownReport:
    per_stage: list[dict] = field(default_factory=list)
    totals: dict = field(default_factory=dict)

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["stage", "compute", "blocking", "tp_coord", "iteration"])
            for row in self.per_stage:
                writer.writerow([row["stage"], row["compute"], row["blocking"],
                                 row["tp_coord"], row["iteration"]])


def breakdown(trace: Trace) -> BreakdownReport:
    """Compute / Blocking / TP-Coord totals per stage and overall.

    Per stage the three components sum exactly to the iteration time:
    blocking intervals are recorded for precisely the spans in which a
    stage neither computed nor coordinated.  With tensor parallelism
    the rank-0 lane is reported (lanes are identical in virtual runs).
    """
    makespan = trace.makespan()
    stages = sorted({e.stage for e in trace.events})
    report = BreakdownReport()
    tot = {"compute": 0, "blocking": 0, "tp_coord": 0}
    for s in stages:
        compute = sum(e.t_end - e.t_start for e in trace.events
                      if e.event_kind == "exec" and e.stage == s
                      and (e.rank is None or e.rank == 0))
        coord = sum(e.t_end - e.t_start for e in trace.events
                    if e.event_kind == "coord" and e.stage == s)
        blocking = sum(e.t_end - e.t_start for e in trace.events
                       if e.event_kind == "block" and e.stage == s)
        report.per_stage.append({"stage": s, "compute": compute,
                                 "blocking": blocking, "tp_coord": coord,
                                 "iteration": makespan})
        tot["compute"] += compute
        tot["blocking"] += blocking
        tot["tp_coord"] += coord
    report.totals = dict(tot, iteration=makespan, stages=len(stages))
    return report


# ---------------------------------------------------------------------------
# Corollary decay curve


def corollary_ratio_curve(base: GeneratorSpec, m_values: list[int],
                          seeds: list[int], buffer_limit: int = 32) -> list[dict]:
    """Mean makespan/L of BF arbitration as microbatch count grows.

    ``base`` should be last-stage dominant (heavy_last > 1) so the
    lower bound tracks the unavoidable work.  Returns one row per M.
    """
    rows = []
    for m in m_values:
        spec = GeneratorSpec(
            num_stages=base.num_stages, num_microbatches=m,
            num_chunks=base.num_chunks, tp_group_size=base.tp_group_size,
            forward=base.forward, backward=base.backward,
            comm_delay=base.comm_delay, heavy_last=base.heavy_last,
            heavy_prefix=base.heavy_prefix)
        ratios = []
        for seed in seeds:
            w = generate_workload(spec, seed)
            _, metrics = run_rrfp(w, "bf", buffer_limit, seed, record_trace=False)
            ratios.append(metrics.makespan / lower_bound(w))
        rows.append({"num_microbatches": m,
                     "mean_ratio": float(np.mean(ratios)),
                     "max_ratio": float(np.max(ratios)),
                     "seeds": len(seeds)})
    return rows
