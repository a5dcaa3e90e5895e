import random

import numpy as np
import pytest

from rrfp.analysis import (
    bottleneck_stats,
    breakdown,
    brute_force_makespan,
    corollary_ratio_curve,
    lower_bound,
    stats_from_workloads,
    theorem_bound,
)
from rrfp.baselines import build_1f1b_schedule, run_fixed
from rrfp.engine import run_rrfp
from rrfp.workload import (
    GeneratorSpec,
    generate_workload,
    lognormal,
    uniform,
)

from test_workload import uniform_workload


def test_uniform_two_stage_bound_report():
    report = theorem_bound(uniform_workload(2, 2, f=1, b=1))
    assert report.forward_ref == report.backward_ref == 3
    assert report.forward_imbalance == report.backward_imbalance == 0
    assert report.upper_bound == 6
    assert report.lower_bound == 4
    assert report.t_max == 2


def test_single_stage_degenerate_equalities():
    w = uniform_workload(1, 4, f=5, b=7)
    report = theorem_bound(w)
    total = sum(w.latency.values())
    assert report.upper_bound == report.forward_ref + report.backward_ref == total
    assert report.lower_bound == total


def test_bound_report_internal_invariants():
    for seed in range(30):
        spec = GeneratorSpec(num_stages=5, num_microbatches=7,
                             forward=lognormal(4.5, 0.7, 20, 500),
                             backward=lognormal(4.5, 0.7, 20, 500))
        w = generate_workload(spec, seed)
        r = theorem_bound(w)
        assert r.upper_bound == (r.forward_ref + r.backward_ref
                                 + r.forward_imbalance + r.backward_imbalance)
        assert r.lower_bound <= r.upper_bound
        assert r.forward_imbalance >= 0 and r.backward_imbalance >= 0


def test_bound_precondition_errors():
    with pytest.raises(ValueError):
        theorem_bound(uniform_workload(2, 2, c=2))
    with pytest.raises(ValueError):
        theorem_bound(uniform_workload(2, 2, decompose_backward=True))


def test_bruteforce_critical_path_instance():
    assert brute_force_makespan(uniform_workload(2, 1, f=1, b=1)) == 4


def test_bruteforce_task_cap():
    with pytest.raises(ValueError):
        brute_force_makespan(uniform_workload(4, 4))


def test_oracle_sandwich_on_tiny_instances():
    rng = random.Random(2)
    for _ in range(15):
        n = rng.choice([1, 2, 3])
        m = rng.choice([1, 2, 3])
        if 2 * n * m > 12:
            continue
        spec = GeneratorSpec(num_stages=n, num_microbatches=m,
                             forward=uniform(30, 200), backward=uniform(30, 200))
        w = generate_workload(spec, rng.randint(0, 999))
        opt = brute_force_makespan(w)
        _, metrics = run_rrfp(w, "bf", 32, 0, record_trace=False)
        assert lower_bound(w) <= opt <= metrics.makespan


def test_bruteforce_handles_comm_delay():
    from rrfp.workload import CommDelay
    spec = GeneratorSpec(num_stages=2, num_microbatches=2,
                         forward=uniform(50, 100), backward=uniform(50, 100),
                         comm_delay=CommDelay(kind="constant", value=25))
    w = generate_workload(spec, 1)
    opt = brute_force_makespan(w)
    _, metrics = run_rrfp(w, "bf", 32, 0, record_trace=False)
    assert lower_bound(w) <= opt <= metrics.makespan


def test_uniform_bottleneck_goes_to_last_stage():
    stats = bottleneck_stats(np.full((3, 4, 5), 100))
    assert stats.stage_fraction == [0.0, 0.0, 0.0, 1.0]
    assert stats.p_hat == 0.0


def test_heavy_last_stage_dominates():
    ws = [generate_workload(
        GeneratorSpec(num_stages=4, num_microbatches=6,
                      forward=uniform(80, 120), backward=uniform(80, 120),
                      heavy_last=2.0), seed=s) for s in range(5)]
    stats = stats_from_workloads(ws)
    assert stats.stage_fraction[-1] == 1.0
    assert stats.p_hat == 0.0
    assert stats.rho_hat == 1.0


def test_bottleneck_fractions_match_argmax_oracle():
    rng = np.random.default_rng(0)
    samples = rng.integers(50, 500, size=(100, 4, 6))
    stats = bottleneck_stats(samples)
    assert abs(sum(stats.stage_fraction) - 1.0) < 1e-12
    # independent oracle: per-row max scan with ties to the higher stage
    wins = [0, 0, 0, 0]
    for it in range(100):
        for j in range(6):
            col = samples[it, :, j]
            best = max(range(4), key=lambda i: (col[i], i))
            wins[best] += 1
    assert stats.stage_fraction == [w / 600 for w in wins]
    losing = sum(w for w in wins[:-1]) / 600
    assert stats.p_hat == losing


def test_breakdown_zero_coord_without_tp():
    w = uniform_workload(3, 4)
    trace, _ = run_rrfp(w, "bf", 32, 0)
    report = breakdown(trace)
    assert all(row["tp_coord"] == 0 for row in report.per_stage)
    for row in report.per_stage:
        assert row["compute"] + row["blocking"] + row["tp_coord"] == row["iteration"]


def test_breakdown_single_stage_has_no_blocking():
    w = uniform_workload(1, 5)
    trace, _ = run_rrfp(w, "bf", 32, 0)
    report = breakdown(trace)
    assert report.per_stage[0]["blocking"] == 0


def test_breakdown_identity_on_fixed_schedule_trace():
    w = uniform_workload(4, 6)
    trace, _ = run_fixed(build_1f1b_schedule(w), w)
    for row in breakdown(trace).per_stage:
        assert row["compute"] + row["blocking"] + row["tp_coord"] == row["iteration"]


def test_ratio_curve_single_stage_is_exactly_one():
    base = GeneratorSpec(num_stages=1, num_microbatches=4,
                         forward=uniform(80, 120), backward=uniform(80, 120))
    rows = corollary_ratio_curve(base, [4, 16], seeds=[0, 1, 2])
    assert all(r["mean_ratio"] == 1.0 for r in rows)


def test_ratio_curve_decays_with_batch():
    base = GeneratorSpec(num_stages=4, num_microbatches=8,
                         forward=uniform(80, 120), backward=uniform(80, 120),
                         heavy_last=3.0)
    rows = corollary_ratio_curve(base, [8, 32], seeds=list(range(5)))
    assert rows[1]["mean_ratio"] < rows[0]["mean_ratio"]
