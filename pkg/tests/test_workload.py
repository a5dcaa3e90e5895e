import json

import pytest

from rrfp.workload import (
    BACKWARD,
    FORWARD,
    WEIGHT,
    CommDelay,
    DependencyEdge,
    GeneratorSpec,
    TaskId,
    Workload,
    WorkloadError,
    build_task_graph,
    constant,
    generate_workload,
    lognormal,
    topological_order,
    uniform,
)


def uniform_workload(n, m, c=1, f=100, b=100, **kw):
    spec = GeneratorSpec(num_stages=n, num_microbatches=m, num_chunks=c,
                         forward=constant(f), backward=constant(b), **kw)
    return generate_workload(spec, seed=0)


def test_minimal_graph_edges():
    w = uniform_workload(2, 1)
    edges = {(e.src, e.dst) for e in build_task_graph(w)}
    f0 = TaskId(0, 0, 0, FORWARD)
    f1 = TaskId(1, 0, 0, FORWARD)
    b0 = TaskId(0, 0, 0, BACKWARD)
    b1 = TaskId(1, 0, 0, BACKWARD)
    assert edges == {(f0, f1), (f1, b1), (b1, b0), (f0, b0)}


def test_single_stage_interleaving_has_chunk_wrap():
    w = uniform_workload(1, 1, c=2)
    wraps = [e for e in build_task_graph(w) if e.kind == "ChunkWrap"]
    assert DependencyEdge(TaskId(0, 0, 0, FORWARD), TaskId(0, 0, 1, FORWARD),
                          "ChunkWrap") in wraps


def test_edge_count_matches_enumeration():
    # brute-force enumeration of the rules: M * (2(N-1) inter-stage + N local)
    w = uniform_workload(4, 2)
    assert len(build_task_graph(w)) == 2 * (2 * 3 + 4) == 20


@pytest.mark.parametrize("n,m,c,dec", [(1, 1, 1, False), (3, 4, 2, False),
                                       (5, 2, 1, True), (2, 3, 3, True)])
def test_graph_is_acyclic(n, m, c, dec):
    w = uniform_workload(n, m, c=c, decompose_backward=dec)
    order = topological_order(w)
    assert len(order) == w.task_count()


def test_generator_constant_case():
    w = uniform_workload(4, 4)
    assert all(v == 100 for v in w.latency.values())


def test_generator_deterministic():
    spec = GeneratorSpec(num_stages=3, num_microbatches=5,
                         forward=uniform(80, 120), backward=uniform(80, 120))
    assert generate_workload(spec, 7).latency == generate_workload(spec, 7).latency


def test_generator_seeds_differ():
    spec = GeneratorSpec(num_stages=3, num_microbatches=5,
                         forward=uniform(80, 120), backward=uniform(80, 120))
    a = generate_workload(spec, 7).latency
    b = generate_workload(spec, 8).latency
    assert a != b


def test_generator_respects_bounds():
    spec = GeneratorSpec(num_stages=4, num_microbatches=8,
                         forward=lognormal(4.6, 0.8, 40, 400),
                         backward=uniform(60, 90))
    w = generate_workload(spec, 3)
    for t, v in w.latency.items():
        lo, hi = (40, 400) if t.direction == FORWARD else (60, 90)
        assert lo <= v <= hi


def test_generator_rejects_bad_bounds():
    with pytest.raises(WorkloadError):
        uniform(0, 10)
    with pytest.raises(WorkloadError):
        uniform(20, 10)
    with pytest.raises(WorkloadError):
        lognormal(1.0, 0.5, -5, 10)
    with pytest.raises(WorkloadError):
        constant(0)


def test_rejects_zero_sizes():
    with pytest.raises(WorkloadError):
        uniform_workload(0, 1)
    with pytest.raises(WorkloadError):
        uniform_workload(1, 0)
    with pytest.raises(WorkloadError):
        GeneratorSpec(num_stages=1, num_microbatches=1, num_chunks=0)


def test_decomposed_split_sums_exactly():
    for beta in (0.3, 0.5, 0.77):
        spec = GeneratorSpec(num_stages=2, num_microbatches=3,
                             forward=uniform(50, 150), backward=uniform(51, 149),
                             decompose_backward=True, backward_split_fraction=beta)
        w = generate_workload(spec, 5)
        undec = generate_workload(
            GeneratorSpec(num_stages=2, num_microbatches=3,
                          forward=uniform(50, 150), backward=uniform(51, 149)),
            5)
        for t in undec.compute_tasks():
            if t.direction != BACKWARD:
                continue
            b = w.latency[t]
            wpart = w.latency[TaskId(t.stage, t.microbatch, t.chunk, WEIGHT)]
            assert b + wpart == undec.latency[t]
            assert b == round(beta * undec.latency[t])


def test_weight_latencies_require_decomposition():
    w = uniform_workload(2, 1)
    lat = dict(w.latency)
    lat[TaskId(0, 0, 0, WEIGHT)] = 10
    with pytest.raises(WorkloadError):
        Workload(num_stages=2, num_microbatches=1, num_chunks=1,
                 tp_group_size=1, latency=lat)


def test_task_bounds_checked():
    w = uniform_workload(2, 1)
    lat = dict(w.latency)
    lat[TaskId(5, 0, 0, FORWARD)] = 10
    with pytest.raises(WorkloadError):
        Workload(num_stages=2, num_microbatches=1, num_chunks=1,
                 tp_group_size=1, latency=lat)


def test_workload_json_roundtrip():
    spec = GeneratorSpec(num_stages=3, num_microbatches=2, num_chunks=2,
                         tp_group_size=2, forward=uniform(50, 150),
                         backward=uniform(50, 150), decompose_backward=True,
                         comm_delay=CommDelay(kind="uniform", lo=5, hi=20, seed=4))
    w = generate_workload(spec, 9)
    again = Workload.loads(w.dumps())
    assert again == w
    # generator spec round-trips through its own schema too
    assert GeneratorSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


def test_heavy_prefix_scales_leading_forward_stages():
    plain = uniform_workload(8, 2)
    skewed = uniform_workload(8, 2, heavy_prefix=3.0)
    for t in plain.compute_tasks():
        factor = 3 if (t.direction == FORWARD and t.stage < 2) else 1
        assert skewed.latency[t] == plain.latency[t] * factor


def test_heavy_last_scales_both_directions():
    plain = uniform_workload(4, 2)
    skewed = uniform_workload(4, 2, heavy_last=2.0)
    for t in plain.compute_tasks():
        factor = 2 if t.stage == 3 else 1
        assert skewed.latency[t] == plain.latency[t] * factor
